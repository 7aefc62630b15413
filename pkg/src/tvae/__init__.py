"""Transformation-aware variational autoencoder (T-VAE) with VAE / VAE+ baselines."""
from .config import RunConfig, load_config
from .networks import TVAE, VAE, ModelSpec, build_model

__all__ = ["RunConfig", "load_config", "TVAE", "VAE", "ModelSpec", "build_model"]
__version__ = "0.1.0"
