from .trajectory_loader import load_trajectories, write_trajectories, downsample, downsample_corpus
from .scene_builder import build_scenes, build_inference_scene, to_offsets, from_offsets
from .synthetic import synth_generate, split
from .batching import SceneBatch, collate

__all__ = [
    'load_trajectories', 'write_trajectories', 'downsample', 'downsample_corpus',
    'build_scenes', 'build_inference_scene', 'to_offsets', 'from_offsets',
    'synth_generate', 'split', 'SceneBatch', 'collate',
]
