"""Speaker embeddings with asymmetric cross attention in place of temporal pooling."""

from .model import AcaNet, ModelConfig, build_ablation, count_params

__version__ = "0.1.0"

__all__ = ["AcaNet", "ModelConfig", "build_ablation", "count_params", "__version__"]
