"""fatquant: int8 quantization with adjustable-threshold fine-tuning.

Pipeline: fold batch norm -> rescale DWS chains -> calibrate -> fine-tune
thresholds / pointwise scales on unlabeled data -> compile to an integer
model that matches the fake-quant simulation bit for bit.
"""

from .backend import KERNEL_BACKEND
from .data import Dataset, load_dataset, read_idx, select_calibration, write_idx
from .engine import (
    QuantizedModel,
    compile_model,
    export_model,
    import_model,
    load_fatq,
    run_int8,
    save_fatq,
)
from .layers import LayerSpec
from .model import Graph, graphs_equal, load_model, save_model
from .quant import (
    CalibStats,
    QuantConfig,
    QuantParams,
    adjusted_threshold,
    calibrate,
    dequantize,
    fake_quant_forward,
    params_from_stats,
    quantize_bias,
    quantize_tensor,
    ste_backward,
    surrogate_forward,
)
from .simulate import PointwiseScales, QuantizedNet
from .tensor import histogram, round_half_away
from .transforms import DwsRescaleReport, dws_rescale, fold_batch_norm
from .tune import (
    OptimizerState,
    TrainConfig,
    adam_step,
    cosine_lr,
    distillation_loss,
    finetune,
)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "Dataset", "load_dataset", "read_idx", "select_calibration", "write_idx",
    "QuantizedModel", "compile_model", "export_model", "import_model",
    "load_fatq", "run_int8", "save_fatq",
    "LayerSpec", "Graph", "graphs_equal", "load_model", "save_model",
    "CalibStats", "QuantConfig", "QuantParams", "adjusted_threshold",
    "calibrate", "dequantize", "fake_quant_forward", "params_from_stats",
    "quantize_bias", "quantize_tensor", "ste_backward", "surrogate_forward",
    "PointwiseScales", "QuantizedNet",
    "histogram", "round_half_away",
    "DwsRescaleReport", "dws_rescale", "fold_batch_norm",
    "OptimizerState", "TrainConfig", "adam_step", "cosine_lr",
    "distillation_loss", "finetune",
    "__version__",
]
