from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.config.settings import settings
from src.core import tensorcore as tc
from src.core.diffusion import ema_update
from src.core.models.scene import Scene
from src.core.optim import Adam
from src.core.rng import child_rng
from src.core.services.model import EquiDiffModel
from src.processing.batching import SceneBatch, collate
from src.utils.errors import InputError, NumericError, TrainingError
from src.utils.logging import logger

PathLike = Union[str, Path]


@dataclass
class TrainingResult:
    losses: List[Tuple[int, float]] = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")

    @property
    def probe_ratio(self) -> float:
        return self.probe_final / self.probe_initial


class Trainer:
    """Adam on the simplified noise-prediction loss with an EMA shadow of the weights.

    Minibatches, diffusion steps and noises all come from one seeded stream; a
    fixed probe batch with its own fixed noise is scored before the first step
    (raw weights) and after the last (EMA weights).
    """

    def __init__(self, model: EquiDiffModel, scenes: Sequence[Scene], seed: Optional[int] = None):
        if not scenes:
            raise InputError("training corpus is empty")
        self.model = model
        self.config = model.config
        self.scenes = list(scenes)
        self.seed = self.config.seed if seed is None else seed
        self.optimizer = Adam(model.params, lr=self.config.learning_rate, beta1=self.config.adam_beta1,
                              beta2=self.config.adam_beta2, eps=self.config.adam_eps)
        probe_rng = child_rng(self.seed, "probe")
        size = min(self.config.batch_size, len(self.scenes))
        self.probe = self._collate(probe_rng.choice(len(self.scenes), size=size, replace=False))

    def _collate(self, idx: np.ndarray) -> SceneBatch:
        return collate([self.scenes[i] for i in idx], self.config.history_channels)

    def probe_loss(self, use_ema: bool) -> float:
        loss = self.model.loss(self.probe, child_rng(self.seed, "probe-noise"), self.model.bind(use_ema))
        return loss.item()

    def step(self, step: int, rng: np.random.Generator) -> float:
        replace = len(self.scenes) < self.config.batch_size
        batch = self._collate(rng.choice(len(self.scenes), size=self.config.batch_size, replace=replace))
        try:
            loss = self.model.loss(batch, rng, self.model.bind(requires_grad=True))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss is {value} at step {step}")
            grads = tc.gradients(loss)
        except NumericError as e:
            raise TrainingError(f"training diverged at step {step}: {e}")
        self.model.params = self.optimizer.step(self.model.params, grads)
        self.model.ema = ema_update(self.model.ema, self.model.params, self.config.ema_decay)
        return value

    def train(self, loss_log: Optional[PathLike] = None) -> TrainingResult:
        steps = self.config.train_steps
        result = TrainingResult(probe_initial=self.probe_loss(use_ema=False))
        logger.info(f"Training {self.config.variant} model for {steps} steps on {len(self.scenes)} scenes; "
                    f"initial probe loss {result.probe_initial:.4f}")
        rng = child_rng(self.seed, "train")
        every = max(1, settings.LOSS_LOG_EVERY)
        for step in tqdm(range(steps), desc="train", disable=not settings.SHOW_PROGRESS):
            try:
                value = self.step(step, rng)
            except TrainingError as e:
                logger.error(str(e))
                raise
            if step % every == 0 or step == steps - 1:
                result.losses.append((step, value))
                logger.info(f"step {step}: loss {value:.6f}")
        result.probe_final = self.probe_loss(use_ema=True)
        logger.info(f"Final EMA probe loss {result.probe_final:.4f} "
                    f"({result.probe_final / result.probe_initial:.3f} of initial)")
        if loss_log is not None:
            write_loss_log(result.losses, loss_log)
        return result


def write_loss_log(losses: Sequence[Tuple[int, float]], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(losses), columns=["step", "loss"])
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote loss log {path}")
