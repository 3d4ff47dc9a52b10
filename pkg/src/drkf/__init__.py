"""Rotation-robust local features from rotated kernel fusion and teacher distillation."""
from .network import FeatureOutput, Model, ModelConfig
from .mofa import MofaTeacher, mofa_forward
from .rkf_conv import RkfLayer, reparameterize, rkf_forward

__version__ = "0.1.0"

__all__ = ["FeatureOutput", "Model", "ModelConfig", "MofaTeacher", "mofa_forward", "RkfLayer", "reparameterize",
           "rkf_forward", "__version__"]
