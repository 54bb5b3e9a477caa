"""Structural property checks shared by the test suite and ``equidiff check``.

Every check returns a ``PropertyResult`` whose ``margin`` is the worst observed
deviation; a property passes when its margin stays below its threshold.
Rotated inputs are stacked along a new leading axis so each check runs one
batched forward pass per input instead of one per rotation.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from rich.console import Console
from rich.table import Table

from src.config.run_config import RunConfig
from src.config.settings import settings
from src.core import tensorcore as tc
from src.core.context import GATParams, GRUParams, encode_scene, gat_fuse, gru_step
from src.core.diffusion import SamplingNoise, draw_sampling_noise, make_schedule, noise_loss, q_sample
from src.core.models.scene import NeighborGraph, Scene
from src.core.rng import child_rng
from src.core.services.model import EquiDiffModel
from src.core.vn import (VNBlockParams, rotation_matrix, vn_attention, vn_layernorm, vn_linear, vn_relu,
                         vn_transformer_block)
from src.processing.batching import collate
from src.utils.logging import logger

LAYER_TOL = 1e-9
MODEL_TOL = 1e-8
GRAD_TOL = 1e-4
SCHEDULE_TOL = 1e-12
ORACLE_LOSS_TOL = 1e-20
STANDARD_ERRORS = 4.0
MONTE_CARLO_DRAWS = 10_000


@dataclass
class PropertyResult:
    group: str
    name: str
    margin: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.margin)) and self.margin < self.threshold


def relative_deviation(actual: np.ndarray, expected: np.ndarray) -> float:
    actual, expected = np.asarray(actual), np.asarray(expected)
    return float(np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), 1e-12))


def random_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    """[count, 2, 2] rotation matrices at uniform angles."""
    return np.stack([rotation_matrix(a) for a in rng.uniform(0.0, 2.0 * np.pi, size=count)])


def _rotate_each(x: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    # x [..., 2] -> [R, ..., 2] with x @ R_i in row i
    flat = x.reshape(-1, 2)
    return np.einsum("nj,rjk->rnk", flat, rotations).reshape((len(rotations),) + x.shape)


def equivariance_deviation(fn: Callable[..., np.ndarray], inputs: Sequence[np.ndarray],
                           rotations: np.ndarray) -> float:
    """Worst relative deviation of fn(x R) from fn(x) R.

    ``fn`` receives every input with an extra leading batch axis and returns an
    output with the same leading axis.
    """
    base = fn(*[x[None] for x in inputs])[0]
    rotated = fn(*[_rotate_each(x, rotations) for x in inputs])
    expected = _rotate_each(base, rotations)
    return max(relative_deviation(rotated[i], expected[i]) for i in range(len(rotations)))


def randomize(tree: Dict[str, np.ndarray], rng: np.random.Generator, scale: float = 0.2) -> Dict[str, np.ndarray]:
    """Parameters with noise added everywhere, so zero-initialized paths take part."""
    return {name: v + scale * rng.standard_normal(np.shape(v)) for name, v in tree.items()}


def random_scene(rng: np.random.Generator, neighbors: int, history_frames: int = 15, radius_m: float = 50.0,
                 with_future: int = 0, scene_id: str = "random") -> Scene:
    """A scene of smooth random walks; neighbors end within ``radius_m`` of the ego."""

    def walk(length: int) -> np.ndarray:
        heading = rng.uniform(0.0, 2.0 * np.pi) + np.cumsum(rng.normal(0.0, 0.1, size=length))
        speed = rng.uniform(0.5, 3.0) * (1.0 + 0.1 * rng.standard_normal(length))
        steps = speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=-1)
        return np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])

    track = walk(history_frames + with_future - 1)
    history = track[:history_frames] - track[history_frames - 1]
    history[-1] = 0.0
    future = track[history_frames:] - track[history_frames - 1] if with_future else None
    hists = []
    for _ in range(neighbors):
        r, a = radius_m * 0.8 * np.sqrt(rng.uniform()), rng.uniform(0.0, 2.0 * np.pi)
        w = walk(history_frames - 1)
        hists.append(w - w[-1] + r * np.array([np.cos(a), np.sin(a)]))
    neighbor_histories = np.stack(hists) if hists else np.zeros((0, history_frames, 2))
    ids = list(range(2, neighbors + 2))
    last = np.concatenate([np.zeros((1, 2)), neighbor_histories[:, -1]])
    return Scene(
        scene_id=scene_id, ego_id=1, history=history, future=future, neighbor_ids=ids,
        neighbor_histories=neighbor_histories, graph=NeighborGraph.from_positions([1] + ids, last, radius_m),
        maneuver=None,
    )


# equivariance -------------------------------------------------------------------------

def _np(fn):
    return lambda *args: fn(*args).numpy()


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def layer_equivariance(rng: np.random.Generator, rotations: int, inputs: int, channels: int = 8,
                       tokens: int = 6, heads: int = 2) -> List[PropertyResult]:
    block = VNBlockParams.from_tree(tc.bind(randomize(VNBlockParams.init(rng, channels, "b"), rng)), "b")
    w, w2 = _uniform(rng, channels, channels), _uniform(rng, channels, channels)
    gamma, beta = _uniform(rng, channels), _uniform(rng, channels)
    layers: Dict[str, tuple] = {
        "vn_linear": (_np(lambda x: vn_linear(w, x)), 1),
        "vn_relu": (_np(lambda x: vn_relu(x, w, w2)), 1),
        "vn_attention": (_np(lambda q, k, z: vn_attention(q, k, z, heads)), 3),
        "vn_layernorm": (_np(lambda x: vn_layernorm(x, gamma, beta)), 1),
        "vn_transformer_block": (_np(lambda x: vn_transformer_block(x, block, heads)), 1),
    }
    results = []
    for name, (fn, arity) in layers.items():
        worst = 0.0
        for _ in range(inputs):
            xs = [rng.standard_normal((tokens, channels, 2)) for _ in range(arity)]
            worst = max(worst, equivariance_deviation(fn, xs, random_rotations(rng, rotations)))
        results.append(PropertyResult("equivariance", name, worst, LAYER_TOL))
    return results


def denoiser_equivariance(model: EquiDiffModel, rng: np.random.Generator, rotations: int,
                          inputs: int) -> PropertyResult:
    config = model.config
    tree = model.bind()

    def at(context: np.ndarray, k: int):
        def fn(y, hv):
            c = np.broadcast_to(context, (len(y), context.shape[0]))
            return model.denoise(y, k, c, hv, tree).numpy()
        return fn

    worst = 0.0
    for _ in range(inputs):
        fn = at(rng.standard_normal(config.hidden_dim), int(rng.integers(1, config.diffusion_steps + 1)))
        y = rng.standard_normal((config.future_frames, 2))
        hv = rng.standard_normal((config.history_channels, 2))
        worst = max(worst, equivariance_deviation(fn, [y, hv], random_rotations(rng, rotations)))
    return PropertyResult("equivariance", f"denoise[{config.variant}]", worst, MODEL_TOL)


def sampling_equivariance(model: EquiDiffModel, rng: np.random.Generator, rotations: int) -> PropertyResult:
    """Rotating the scene and every injected noise rotates the sampled offsets."""
    config = model.config
    scene = random_scene(rng, 4, config.history_frames, config.radius_m)
    mats = random_rotations(rng, rotations)
    shape = (1, config.future_frames, 2)
    noise = draw_sampling_noise(rng, shape, config.diffusion_steps)
    base = model.sample(collate([scene], config.history_channels, with_future=False), noise=noise).offsets[0]
    rotated_noise = SamplingNoise(
        initial=np.stack([noise.initial[0] @ r for r in mats]),
        steps=np.stack([noise.steps[:, 0] @ r for r in mats], axis=1),
    )
    batch = collate([scene.rotate(r) for r in mats], config.history_channels, with_future=False)
    out = model.sample(batch, noise=rotated_noise).offsets
    worst = max(relative_deviation(out[i], base @ mats[i]) for i in range(len(mats)))
    return PropertyResult("equivariance", f"sample[{config.variant}]", worst, MODEL_TOL)


def context_invariance(model: EquiDiffModel, rng: np.random.Generator, rotations: int,
                       neighbor_counts: Sequence[int] = (0, 1, 8)) -> List[PropertyResult]:
    config = model.config
    context = model.modules(model.bind())[0]
    use_gat = config.variant != "no_context"
    results = []
    for n in neighbor_counts:
        scene = random_scene(rng, n, config.history_frames, config.radius_m)
        base = encode_scene(scene, context, use_gat).numpy()
        worst = max(
            relative_deviation(encode_scene(scene.rotate(r), context, use_gat).numpy(), base)
            for r in random_rotations(rng, rotations)
        )
        results.append(PropertyResult("invariance", f"encode_scene[{n} neighbors]", worst, MODEL_TOL))
    return results


# gradients ----------------------------------------------------------------------------

def _weighted(fn: Callable[[Dict[str, tc.Tensor]], tc.Tensor], weights: np.ndarray):
    return lambda t: tc.sum_(tc.mul(fn(t), weights))


def gradient_checks(rng: np.random.Generator, points: int, coords: int = 4) -> List[PropertyResult]:
    """Central differences vs. backward for each layer on small random problems."""
    C, T, D = 4, 3, 6

    def u(*shape):
        return _uniform(rng, *shape)

    def block_point():
        return randomize(VNBlockParams.init(rng, C, "b"), rng)

    def gru_point():
        p = GRUParams.init(rng, D, "g")
        p.update({"v": u(2), "h": u(D)})
        return p

    def gat_point():
        p = GATParams.init(rng, 2, D, D, "a")
        p["x"] = u(4, D)
        return p

    adjacency = np.array([[1, 1, 0, 1], [1, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]], dtype=bool)
    cases = {
        "vn_linear": (lambda: {"w": u(C, C), "x": u(T, C, 2)},
                      lambda t: vn_linear(t["w"], t["x"]), (T, C, 2)),
        "vn_relu": (lambda: {"w": u(C, C), "d": u(C, C), "x": u(T, C, 2)},
                    lambda t: vn_relu(t["x"], t["w"], t["d"]), (T, C, 2)),
        "vn_attention": (lambda: {"q": u(T, C, 2), "k": u(T, C, 2), "z": u(T, C, 2)},
                         lambda t: vn_attention(t["q"], t["k"], t["z"], 2), (T, C, 2)),
        "vn_layernorm": (lambda: {"x": u(T, C, 2), "g": u(C), "b": u(C)},
                         lambda t: vn_layernorm(t["x"], t["g"], t["b"]), (T, C, 2)),
        "vn_transformer_block": (lambda: dict(block_point(), x=u(T, C, 2)),
                                 lambda t: vn_transformer_block(t["x"], VNBlockParams.from_tree(t, "b"), 2), (T, C, 2)),
        "gru_step": (gru_point, lambda t: gru_step(t["v"], t["h"], GRUParams.from_tree(t, "g")), (D,)),
        "gat_fuse": (gat_point, lambda t: gat_fuse(t["x"], adjacency, GATParams.from_tree(t, "a")), (4, D)),
    }
    results = []
    for name, (make_point, fn, out_shape) in cases.items():
        worst = 0.0
        for _ in range(points):
            f = _weighted(fn, rng.standard_normal(out_shape))
            worst = max(worst, tc.grad_check(f, make_point(), max_coords=coords, rng=rng))
        results.append(PropertyResult("gradient", name, worst, GRAD_TOL))
    results.append(loss_gradient_check(rng, points, coords))
    return results


def tiny_config(variant: str = "full") -> RunConfig:
    return RunConfig(hidden_dim=6, channels=4, layers=1, gat_heads=2, attention_heads=1, history_channels=2,
                     diffusion_steps=10, history_frames=5, future_frames=4, radius_m=50.0, variant=variant)


def loss_gradient_check(rng: np.random.Generator, points: int, coords: int = 4) -> PropertyResult:
    """End-to-end gradient of the training loss through context encoder and denoiser."""
    config = tiny_config()
    worst = 0.0
    for i in range(points):
        scenes = [random_scene(rng, j, config.history_frames, with_future=config.future_frames, scene_id=str(j))
                  for j in (0, 2)]
        batch = collate(scenes, config.history_channels)
        model = EquiDiffModel(config, randomize(EquiDiffModel.init_params(config, i), rng))
        seed = int(rng.integers(0, 2 ** 32))

        def loss(tree, model=model, batch=batch, seed=seed):
            return model.loss(batch, child_rng(seed, "loss"), tree)

        worst = max(worst, tc.grad_check(loss, model.params, max_coords=coords, rng=rng))
    return PropertyResult("gradient", "training_loss", worst, GRAD_TOL)


# diffusion ----------------------------------------------------------------------------

def diffusion_checks(config: RunConfig, rng: np.random.Generator, draws: int = MONTE_CARLO_DRAWS) -> List[PropertyResult]:
    s = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    ratio = np.max(np.abs(s.alpha_bars[1:] / s.alpha_bars[:-1] - s.alphas[1:]))
    logsum = np.max(np.abs(s.alpha_bars - np.exp(np.cumsum(np.log(s.alphas)))))
    results = [
        PropertyResult("diffusion", "alpha_bar ratio identity", float(ratio), SCHEDULE_TOL),
        PropertyResult("diffusion", "alpha_bar log-sum identity", float(logsum), SCHEDULE_TOL),
        PropertyResult("diffusion", "forward marginal consistency", marginal_consistency(s, rng, draws), STANDARD_ERRORS),
    ]

    y0 = rng.standard_normal((8, config.future_frames, 2))
    ks = rng.integers(1, s.num_steps + 1, size=len(y0))
    eps = rng.standard_normal(y0.shape)
    y_k = q_sample(y0, ks, eps, s)
    abar = s.alpha_bar(ks)[:, None, None]
    recovered = (y_k - np.sqrt(abar) * y0) / np.sqrt(1.0 - abar)
    oracle = noise_loss(eps, tc.Tensor(recovered)).item()
    results.append(PropertyResult("diffusion", "oracle denoiser loss", oracle, ORACLE_LOSS_TOL))
    return results


def marginal_consistency(s, rng: np.random.Generator, draws: int, k: Optional[int] = None) -> float:
    """Iterated one-step noising vs. the closed-form marginal, in standard errors."""
    k = k or s.num_steps // 4 or 1
    y0 = np.array([1.5, -0.5])
    x = np.broadcast_to(y0, (draws, 2)).copy()
    for j in range(1, k + 1):
        x = np.sqrt(s.alpha(j)) * x + np.sqrt(s.beta(j)) * rng.standard_normal((draws, 2))
    mean, var = np.sqrt(s.alpha_bar(k)) * y0, 1.0 - s.alpha_bar(k)
    sample_cov = np.cov(x, rowvar=False)
    mean_z = np.abs(x.mean(axis=0) - mean) / np.sqrt(var / draws)
    var_z = np.abs(np.diag(sample_cov) - var) / (var * np.sqrt(2.0 / (draws - 1)))
    cov_z = abs(sample_cov[0, 1]) / (var / np.sqrt(draws))
    return float(max(mean_z.max(), var_z.max(), cov_z))


# suite --------------------------------------------------------------------------------

def run_property_suite(config: RunConfig, seed: int = 0, rotations: Optional[int] = None,
                       inputs: Optional[int] = None, grad_points: Optional[int] = None) -> List[PropertyResult]:
    rotations = rotations or settings.CHECK_ROTATIONS
    inputs = inputs or settings.CHECK_INPUTS
    grad_points = grad_points or settings.CHECK_INPUTS
    model = EquiDiffModel(config, randomize(EquiDiffModel.init_params(config, seed), child_rng(seed, "perturb")))

    results: List[PropertyResult] = []
    logger.info(f"Checking layer equivariance ({inputs} inputs x {rotations} rotations)")
    results += layer_equivariance(child_rng(seed, "layers"), rotations, inputs)
    logger.info(f"Checking the {config.variant} model")
    results.append(denoiser_equivariance(model, child_rng(seed, "denoise"), rotations, inputs))
    results.append(sampling_equivariance(model, child_rng(seed, "sample"), rotations))
    results += context_invariance(model, child_rng(seed, "context"), rotations)
    logger.info(f"Checking gradients at {grad_points} points per layer")
    results += gradient_checks(child_rng(seed, "grad"), grad_points)
    results += diffusion_checks(config, child_rng(seed, "diffusion"))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {failed}")
    return results


def print_results(results: Sequence[PropertyResult], console: Optional[Console] = None) -> None:
    table = Table(title="Property checks")
    table.add_column("group")
    table.add_column("property")
    table.add_column("margin", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("status")
    for r in results:
        status = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.group, r.name, f"{r.margin:.3e}", f"{r.threshold:.0e}", status)
    (console or Console()).print(table)
