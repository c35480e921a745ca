"""Bayer demosaicing with windowed self-attention and shared channel attention."""

__version__ = "0.1.0"

from .autograd import Tape, Tensor  # noqa: F401
