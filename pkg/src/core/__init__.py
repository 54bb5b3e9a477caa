from .services.model import EquiDiffModel
from .services.trainer import Trainer

__all__ = ['EquiDiffModel', 'Trainer']
