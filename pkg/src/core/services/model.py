from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

from src.config.run_config import RunConfig
from src.core import tensorcore as tc
from src.core.backbone import BackboneParams, denoise
from src.core.context import ContextParams, encode_vehicles
from src.core.diffusion import DiffusionSchedule, SampleResult, SamplingNoise, make_schedule, sample, training_loss
from src.core.rng import child_rng
from src.core.scalar_backbone import ScalarBackboneParams, scalar_denoise
from src.core.tensorcore import Tensor
from src.processing.batching import SceneBatch
from src.utils.errors import InputError
from src.utils.logging import logger

ParamTree = Dict[str, np.ndarray]
TensorTree = Mapping[str, Tensor]


class EquiDiffModel:
    """Context encoder, noise predictor and diffusion schedule of one configuration.

    Parameters live in a flat name -> array dictionary; ``ema`` holds the
    evaluation shadow. Every method that computes takes an optional bound tree
    so training can differentiate through the same code that sampling uses.
    """

    def __init__(self, config: RunConfig, params: ParamTree, ema: Optional[ParamTree] = None):
        expected = set(self.init_params(config, 0))
        missing, extra = expected - set(params), set(params) - expected
        if missing or extra:
            raise InputError(f"parameters do not fit variant {config.variant}: "
                             f"missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        self.config = config
        self.params = dict(params)
        self.ema = dict(ema) if ema is not None else {k: np.array(v) for k, v in params.items()}
        self.schedule: DiffusionSchedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)

    @staticmethod
    def init_params(config: RunConfig, seed: int) -> ParamTree:
        rng = child_rng(seed, "init")
        tree = ContextParams.init(rng, config.hidden_dim, config.gat_heads)
        backbone = ScalarBackboneParams if config.variant == "no_equivariance" else BackboneParams
        tree.update(backbone.init(rng, config.hidden_dim, config.channels, config.layers,
                                  config.future_frames, config.history_channels))
        return tree

    @classmethod
    def initialize(cls, config: RunConfig, seed: Optional[int] = None) -> "EquiDiffModel":
        seed = config.seed if seed is None else seed
        params = cls.init_params(config, seed)
        logger.info(f"Initialized {config.variant} model with {sum(v.size for v in params.values())} parameters")
        return cls(config, params)

    def bind(self, use_ema: bool = False, requires_grad: bool = False) -> Dict[str, Tensor]:
        return tc.bind(self.ema if use_ema else self.params, requires_grad)

    def modules(self, tree: TensorTree):
        context = ContextParams.from_tree(tree)
        if self.config.variant == "no_equivariance":
            return context, ScalarBackboneParams.from_tree(tree, self.config.layers)
        return context, BackboneParams.from_tree(tree, self.config.layers)

    def context(self, batch: SceneBatch, tree: TensorTree) -> Tensor:
        context, _ = self.modules(tree)
        return encode_vehicles(batch.histories, batch.adjacency, batch.ego_index, context,
                               use_gat=self.config.variant != "no_context")

    def denoise(self, y_k, k, c: Tensor, history_vectors: np.ndarray, tree: TensorTree) -> Tensor:
        _, backbone = self.modules(tree)
        fn = scalar_denoise if self.config.variant == "no_equivariance" else denoise
        return fn(y_k, k, c, backbone, history_vectors, heads=self.config.attention_heads,
                  num_steps=self.config.diffusion_steps)

    def loss(self, batch: SceneBatch, rng: np.random.Generator, tree: TensorTree) -> Tensor:
        if batch.offsets is None:
            raise InputError("loss: batch has no future offsets")
        c = self.context(batch, tree)

        def denoiser(y_k: np.ndarray, ks: np.ndarray) -> Tensor:
            return self.denoise(y_k, ks, c, batch.history_vectors, tree)

        return training_loss(batch.offsets, denoiser, self.schedule, rng)

    def sampling_denoiser(self, batch: SceneBatch, use_ema: bool = True) -> Callable[[np.ndarray, int], np.ndarray]:
        tree = self.bind(use_ema)
        c = self.context(batch, tree)

        def denoiser(y_k: np.ndarray, k: int) -> np.ndarray:
            return self.denoise(y_k, k, c, batch.history_vectors, tree).numpy()

        return denoiser

    def sample(self, batch: SceneBatch, rng: Optional[np.random.Generator] = None,
               noise: Optional[SamplingNoise] = None, record: Iterable[int] = (),
               use_ema: bool = True) -> SampleResult:
        """One offset sequence [B, T_pre, 2] per scene of ``batch``."""
        shape = (batch.size, self.config.future_frames, 2)
        return sample(self.sampling_denoiser(batch, use_ema), self.schedule, shape, rng=rng, noise=noise, record=record)
