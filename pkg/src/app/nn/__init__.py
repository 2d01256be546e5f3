from .graph import LayerSpec, ModelGraph, ParamSet, Trace
from .initializers import build_graph, derive_seed, he_normal_init
from .optim import EarlyStopping, ReduceLROnPlateau, adamw_step

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "ParamSet",
    "Trace",
    "build_graph",
    "derive_seed",
    "he_normal_init",
    "EarlyStopping",
    "ReduceLROnPlateau",
    "adamw_step",
]
