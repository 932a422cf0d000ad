"""srmae: desk-scale masked image modeling with image scale as the
self-supervised signal, built on a minimal reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
