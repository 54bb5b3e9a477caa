from .model import EquiDiffModel
from .trainer import Trainer, TrainingResult
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = ['EquiDiffModel', 'Trainer', 'TrainingResult', 'save_checkpoint', 'load_checkpoint']
