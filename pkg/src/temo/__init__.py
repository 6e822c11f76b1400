"""Text-driven multi-object mesh stylization.

A style field over the mesh surface is optimised so that renders match a
prompt; each surface point attends only to the words of the noun phrase
matched to its object.
"""
from .geometry import CameraPose, Mesh, load_mesh, normalize_unit_sphere
from .render import SGLight, default_lights, shade, shade_pixel
from .stylefield import StyleField, load_checkpoint, save_checkpoint
from .trainer import TeMOStylizer, TrainConfig, evaluate, parse_scene, train

__all__ = ["CameraPose", "Mesh", "load_mesh", "normalize_unit_sphere", "SGLight", "default_lights", "shade",
           "shade_pixel", "StyleField", "load_checkpoint", "save_checkpoint", "TeMOStylizer", "TrainConfig",
           "evaluate", "parse_scene", "train"]
