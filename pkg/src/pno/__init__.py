"""Costate-regularized neural operators for a two-player intersection game."""
from .game import GameGeometry
from .operator import OperatorConfig, OperatorEnsemble, load_checkpoint, save_checkpoint

__all__ = ["GameGeometry", "OperatorConfig", "OperatorEnsemble", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
