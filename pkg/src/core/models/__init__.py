from .scene import Trajectory, NeighborGraph, Scene
from .report import HorizonReport

__all__ = ['Trajectory', 'NeighborGraph', 'Scene', 'HorizonReport']
