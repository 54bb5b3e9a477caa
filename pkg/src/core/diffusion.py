"""DDPM machinery over offset sequences: schedule, forward noising, loss, sampler, EMA.

Steps are 1-indexed throughout: k = 1 is the least noisy step and k = K the
pure-noise end. Schedule arrays are stored 0-indexed, so step k lives at k - 1.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from src.core import tensorcore as tc
from src.core.tensorcore import Tensor
from src.utils.errors import DimensionError, InputError

Steps = Union[int, np.ndarray]
# (y_k [B, T, 2], k [B]) -> eps_hat [B, T, 2]
TrainingDenoiser = Callable[[np.ndarray, np.ndarray], Tensor]
# (y_k [..., T, 2], k) -> eps_hat of the same shape
SamplingDenoiser = Callable[[np.ndarray, int], Union[Tensor, np.ndarray]]


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def _index(self, k: Steps) -> np.ndarray:
        ks = np.asarray(k)
        if not np.issubdtype(ks.dtype, np.integer):
            raise InputError(f"diffusion step must be an integer, got {ks.dtype}")
        if np.any(ks < 1) or np.any(ks > self.num_steps):
            raise InputError(f"diffusion step outside 1..{self.num_steps}: {ks.min()}..{ks.max()}")
        return ks - 1

    def beta(self, k: Steps):
        return self.betas[self._index(k)]

    def alpha(self, k: Steps):
        return self.alphas[self._index(k)]

    def alpha_bar(self, k: Steps):
        return self.alpha_bars[self._index(k)]


def make_schedule(num_steps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_start`` at k = 1 to ``beta_end`` at k = K."""
    if num_steps < 2:
        raise InputError(f"make_schedule: need at least 2 steps, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InputError(f"make_schedule: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return DiffusionSchedule(num_steps, betas, alphas, alpha_bars)


def _per_example(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    # broadcast one coefficient per leading example over the trailing [T, 2]
    return np.reshape(values, np.shape(values) + (1,) * (like.ndim - np.ndim(values)))


def q_sample(y0: np.ndarray, k: Steps, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """sqrt(abar_k) y0 + sqrt(1 - abar_k) eps; ``k`` is a scalar or one step per leading example."""
    y0, eps = np.asarray(y0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if y0.shape != eps.shape:
        raise DimensionError(f"q_sample: y0 {y0.shape} and eps {eps.shape} differ")
    abar = _per_example(schedule.alpha_bar(k), y0)
    return np.sqrt(abar) * y0 + np.sqrt(1.0 - abar) * eps


def draw_training_noise(rng: np.random.Generator, shape: Tuple[int, ...], num_steps: int):
    """One step uniform on 1..K and one standard-normal eps per example of a [B, T, 2] batch."""
    ks = rng.integers(1, num_steps + 1, size=shape[0])
    eps = rng.standard_normal(shape)
    return ks, eps


def noise_loss(eps: np.ndarray, eps_hat: Tensor) -> Tensor:
    """Mean over the batch of the per-example squared error summed over [T, 2]."""
    if tuple(eps.shape) != eps_hat.shape:
        raise DimensionError(f"training_loss: predicted noise {eps_hat.shape} vs target {eps.shape}")
    residual = tc.sub(eps, eps_hat)
    per_example = tc.sum_(tc.reshape(tc.mul(residual, residual), (eps.shape[0], -1)), axis=1)
    return tc.mean(per_example)


def training_loss(y0: np.ndarray, denoiser: TrainingDenoiser, schedule: DiffusionSchedule,
                  rng: np.random.Generator) -> Tensor:
    """Simplified DDPM objective on a [B, T, 2] batch of clean offsets.

    ``denoiser`` carries the batch's conditioning and is called once with the
    noisy batch and its per-example steps.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.ndim != 3 or y0.shape[-1] != 2:
        raise DimensionError(f"training_loss: expected [B, T, 2] offsets, got {y0.shape}")
    ks, eps = draw_training_noise(rng, y0.shape, schedule.num_steps)
    return noise_loss(eps, tc.as_tensor(denoiser(q_sample(y0, ks, eps, schedule), ks)))


def reverse_step(y_k: np.ndarray, k: int, eps_hat: np.ndarray, z: Optional[np.ndarray],
                 schedule: DiffusionSchedule) -> np.ndarray:
    """One ancestral step y_k -> y_{k-1} with fixed variance beta_k; z is ignored at k = 1."""
    y_k, eps_hat = np.asarray(y_k, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    if y_k.shape != eps_hat.shape:
        raise DimensionError(f"reverse_step: y_k {y_k.shape} and eps_hat {eps_hat.shape} differ")
    beta, alpha, abar = schedule.beta(k), schedule.alpha(k), schedule.alpha_bar(k)
    mean = (y_k - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
    if k == 1 or z is None:
        return mean
    z = np.asarray(z, dtype=np.float64)
    if z.shape != y_k.shape:
        raise DimensionError(f"reverse_step: z {z.shape} does not match y_k {y_k.shape}")
    return mean + np.sqrt(beta) * z


@dataclass(frozen=True)
class SamplingNoise:
    """Initial state y_K and the per-step noises; ``steps[k - 1]`` is the z used at step k."""
    initial: np.ndarray
    steps: np.ndarray

    def rotate(self, rotation: np.ndarray) -> "SamplingNoise":
        return SamplingNoise(self.initial @ rotation, self.steps @ rotation)


def draw_sampling_noise(rng: np.random.Generator, shape: Tuple[int, ...], num_steps: int) -> SamplingNoise:
    initial = rng.standard_normal(shape)
    steps = rng.standard_normal((num_steps,) + tuple(shape))
    steps[0] = 0.0
    return SamplingNoise(initial, steps)


@dataclass
class SampleResult:
    offsets: np.ndarray
    trace: Dict[int, np.ndarray] = field(default_factory=dict)


def sample(denoiser: SamplingDenoiser, schedule: DiffusionSchedule, shape: Tuple[int, ...],
           rng: Optional[np.random.Generator] = None, noise: Optional[SamplingNoise] = None,
           record: Iterable[int] = ()) -> SampleResult:
    """Ancestral sampling from y_K ~ N(0, I) down to y_0.

    Noise comes from ``noise`` when given (so a rotated copy can be replayed),
    otherwise it is drawn from ``rng``. States for the steps in ``record``
    (K..0) are kept in the returned trace.
    """
    if noise is None:
        if rng is None:
            raise InputError("sample: pass either rng or noise")
        noise = draw_sampling_noise(rng, shape, schedule.num_steps)
    if noise.initial.shape != tuple(shape) or noise.steps.shape != (schedule.num_steps,) + tuple(shape):
        raise DimensionError(f"sample: noise {noise.initial.shape}/{noise.steps.shape} for shape {shape}")
    wanted = set(int(k) for k in record)
    bad = [k for k in wanted if not 0 <= k <= schedule.num_steps]
    if bad:
        raise InputError(f"sample: cannot record steps {sorted(bad)} outside 0..{schedule.num_steps}")

    y = np.array(noise.initial, dtype=np.float64)
    trace: Dict[int, np.ndarray] = {}
    if schedule.num_steps in wanted:
        trace[schedule.num_steps] = y.copy()
    for k in range(schedule.num_steps, 0, -1):
        eps_hat = denoiser(y, k)
        eps_hat = eps_hat.numpy() if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
        y = reverse_step(y, k, eps_hat, noise.steps[k - 1], schedule)
        if k - 1 in wanted:
            trace[k - 1] = y.copy()
    return SampleResult(offsets=y, trace=trace)


def ema_update(shadow: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray],
               decay: float) -> Dict[str, np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * params, as a new dictionary."""
    if not 0.0 <= decay <= 1.0:
        raise InputError(f"ema_update: decay must lie in [0, 1], got {decay}")
    if set(shadow) != set(params):
        raise InputError(f"ema_update: parameter trees differ in {sorted(set(shadow) ^ set(params))}")
    updated = {}
    for name, value in shadow.items():
        p = np.asarray(params[name], dtype=np.float64)
        if p.shape != np.shape(value):
            raise DimensionError(f"ema_update: {name} has shape {p.shape}, shadow {np.shape(value)}")
        updated[name] = decay * np.asarray(value, dtype=np.float64) + (1.0 - decay) * p
    return updated
