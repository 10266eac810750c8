"""gUNet image dehazing on a small numpy autodiff engine.

Submodules: ``tensor``/``functional`` (ops and gradients), ``arch`` (model
builder), ``cost`` (params and MACs), ``haze`` (synthetic data and metrics),
``train`` (optimizer, loop, checkpoints) and ``cli``.
"""

__version__ = "0.1.0"

from .arch import ModelConfig, ParamStore, build_gunet, forward_dehaze, fold_network  # noqa: E402
from .cost import CostReport, cost_report, count_macs, count_params  # noqa: E402
from .errors import (ConfigError, DataIOError, FingerprintError, GUNetError,  # noqa: E402
                     NumericError, ShapeError)
from .haze import HazeParams, generate_dataset, invert_haze, psnr, ssim, synthesize_haze  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402
from .train import (TrainConfig, load_checkpoint, lr_schedule, save_checkpoint,  # noqa: E402
                    train_loop)

__all__ = [
    "ModelConfig", "ParamStore", "build_gunet", "forward_dehaze", "fold_network",
    "CostReport", "cost_report", "count_macs", "count_params",
    "ConfigError", "DataIOError", "FingerprintError", "GUNetError", "NumericError", "ShapeError",
    "HazeParams", "generate_dataset", "invert_haze", "psnr", "ssim", "synthesize_haze",
    "Tensor", "no_grad",
    "TrainConfig", "load_checkpoint", "lr_schedule", "save_checkpoint", "train_loop",
]
