from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from src.config.run_config import RunConfig
from src.config.settings import settings
from src.core.models.report import HorizonReport
from src.core.models.scene import Scene, Trajectory
from src.core.rng import make_rng
from src.core.services.model import EquiDiffModel
from src.processing.batching import collate
from src.processing.scene_builder import from_offsets
from src.processing.synthetic import scenes_from_trajectories
from src.processing.trajectory_loader import load_maneuvers, load_trajectories
from src.utils.errors import CheckpointError, DimensionError, InputError
from src.utils.logging import logger

VARIANTS = ("full", "no_equivariance", "no_context", "cv")
CV_WINDOW = 5

PathLike = Union[str, Path]


def horizon_label(frame: int, frame_rate_hz: float) -> str:
    return f"{frame / frame_rate_hz:g}s"


def rmse_horizons(preds: np.ndarray, truths: np.ndarray, horizons: Sequence[int] = (5, 10, 15, 20, 25),
                  frame_rate_hz: float = 5.0, **report_fields) -> HorizonReport:
    """sqrt(mean over scenes of ||p_hat_t - p_t||^2) at each 1-based horizon frame t."""
    preds, truths = np.asarray(preds, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.ndim != 3 or preds.shape[-1] != 2:
        raise DimensionError(f"rmse_horizons: predictions {preds.shape} vs truths {truths.shape}")
    if not len(preds):
        raise InputError("rmse_horizons: no scenes to score")
    bad = [h for h in horizons if not 1 <= h <= preds.shape[1]]
    if bad:
        raise InputError(f"rmse_horizons: horizons {bad} outside 1..{preds.shape[1]}")
    sq = ((preds - truths) ** 2).sum(axis=-1)
    rmse = {horizon_label(h, frame_rate_hz): float(np.sqrt(sq[:, h - 1].mean())) for h in horizons}
    return HorizonReport(rmse=rmse, sample_count=len(preds), **report_fields)


def cv_baseline(history: Union[Trajectory, np.ndarray], future_frames: int) -> np.ndarray:
    """Extrapolate the mean velocity of the last five history frames from the last position."""
    pts = history.positions if isinstance(history, Trajectory) else np.asarray(history, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"cv_baseline: expected [T, 2] history, got {pts.shape}")
    if len(pts) < 2:
        raise InputError("cv_baseline: history needs at least 2 points")
    window = pts[-CV_WINDOW:]
    velocity = (window[-1] - window[0]) / (len(window) - 1)
    return pts[-1] + np.arange(1, future_frames + 1)[:, None] * velocity


def _best_of(candidates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    # lowest mean displacement over the whole horizon
    errors = np.linalg.norm(candidates - truth[None], axis=-1).mean(axis=-1)
    return candidates[int(np.argmin(errors))]


def predict_positions(model: EquiDiffModel, scenes: Sequence[Scene], n: int, seed: int,
                      best_of: bool = False) -> np.ndarray:
    """Predicted future positions [S, T_pre, 2] in scene coordinates: the mean of ``n`` samples."""
    rng = make_rng(seed)
    chunk = max(1, model.config.batch_size // n)
    preds: List[np.ndarray] = []
    starts = range(0, len(scenes), chunk)
    for start in tqdm(starts, desc="eval", disable=not settings.SHOW_PROGRESS):
        part = scenes[start:start + chunk]
        batch = collate(part, model.config.history_channels, with_future=False).repeat(n)
        offsets = model.sample(batch, rng=rng).offsets.reshape(len(part), n, -1, 2)
        positions = from_offsets(offsets, np.zeros(2))
        for scene, candidates in zip(part, positions):
            preds.append(_best_of(candidates, scene.future) if best_of else candidates.mean(axis=0))
    return np.stack(preds)


def run_eval(variant: str, model: Optional[EquiDiffModel], scenes: Sequence[Scene], n: int = 1,
             seed: int = 0, best_of: bool = False, run: Optional[RunConfig] = None,
             maneuver: Optional[str] = None) -> HorizonReport:
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if n < 1:
        raise InputError(f"samples per scene must be >= 1, got {n}")
    if not scenes:
        raise InputError("run_eval: no scenes to evaluate")
    missing = [s.scene_id for s in scenes if s.future is None]
    if missing:
        raise InputError(f"run_eval: scenes without ground truth: {missing[:5]}")
    truths = np.stack([s.future for s in scenes])

    if variant == "cv":
        config = run or (model.config if model else RunConfig())
        preds = np.stack([cv_baseline(s.history, truths.shape[1]) for s in scenes])
        n, config_hash = 1, None
    else:
        if model is None:
            raise CheckpointError(f"variant {variant} needs a checkpoint")
        if model.config.variant != variant:
            raise CheckpointError(f"checkpoint holds variant {model.config.variant}, not {variant}")
        config = model.config
        preds = predict_positions(model, scenes, n, seed, best_of)
        config_hash = config.config_hash()

    report = rmse_horizons(
        preds, truths, config.horizon_frames(), config.frame_rate_hz,
        samples_per_scene=n, seed=seed, variant=variant, best_of=best_of and variant != "cv",
        maneuver=maneuver, config_hash=config_hash,
    )
    logger.info(f"Evaluated {variant} on {len(scenes)} scenes:\n{report.to_text()}")
    return report


def load_split_scenes(path: PathLike, run: RunConfig, feet: bool = False, split_name: str = "test",
                      maneuver: Optional[Sequence[str]] = None) -> List[Scene]:
    """Scenes of a corpus split; ``path`` is a corpus directory or a trajectory CSV.

    A ``maneuvers.csv`` beside the trajectories restricts egos to the labelled
    vehicles and attaches the labels; ``maneuver`` then keeps only those classes.
    """
    path = Path(path)
    csv = path / f"{split_name}.csv" if path.is_dir() else path
    labels_path = csv.parent / "maneuvers.csv"
    labels = load_maneuvers(labels_path) if labels_path.exists() else None
    scenes = scenes_from_trajectories(load_trajectories(csv, feet=feet), run, labels)
    if maneuver:
        wanted = set(maneuver)
        if labels is None:
            raise InputError(f"cannot filter by maneuver: no {labels_path}")
        scenes = [s for s in scenes if s.maneuver in wanted]
        logger.info(f"Kept {len(scenes)} scenes with maneuver in {sorted(wanted)}")
    return scenes
