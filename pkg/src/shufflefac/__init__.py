"""ShuffleFAC: lightweight frequency-aware CNN engine, cost analyzer and latency profiler."""
from .tensor import GradientTape, Tensor, backward, load_tensor, save_tensor
from .model import Model, ShuffleFACConfig, build, load, save, summary
from .complexity import ComplexityReport, model_cost

__all__ = [
    "GradientTape", "Tensor", "backward", "load_tensor", "save_tensor",
    "Model", "ShuffleFACConfig", "build", "load", "save", "summary",
    "ComplexityReport", "model_cost",
]
__version__ = "0.1.0"
