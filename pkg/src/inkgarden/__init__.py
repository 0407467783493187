"""Desk-scale latent text-to-image diffusion with LoRA fine-tuning and panoramas."""

__version__ = "0.1.0"

from .tensor import Tensor, Parameter, precision, no_grad

__all__ = ["Tensor", "Parameter", "precision", "no_grad", "__version__"]
