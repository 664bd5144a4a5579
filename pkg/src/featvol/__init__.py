"""Editable neural feature volumes for novel view synthesis and scene editing."""

from featvol.feature_volume import FeatureVolume, load_volume, new_volume, save_volume
from featvol.render_net import NetDescriptor, RenderParams, init_params, load_params, save_params

__all__ = [
    "FeatureVolume",
    "NetDescriptor",
    "RenderParams",
    "init_params",
    "load_params",
    "load_volume",
    "new_volume",
    "save_params",
    "save_volume",
]

__version__ = "0.1.0"
