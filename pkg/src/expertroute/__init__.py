"""Post-hoc per-token routing among independently trained LoRA experts."""

from .tensor import Tensor, Tape

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "__version__"]
