"""DNN inference from one abstract sliding-window layer, one loop nest and one blocked layout."""

from .engine import Pointwise, run_layer
from .kernels import KernelConfig, choose_config
from .layout import BlockedTensor, PlainTensor, pack_activations, unpack_activations
from .model import ModelPlan, infer, load_model, memory_report
from .params import LayerClass, LayerParams, ReductionOp, classify, output_shape
from .quantized import QuantParams, run_layer_quantized

__version__ = "0.1.0"

__all__ = [
    "BlockedTensor", "KernelConfig", "LayerClass", "LayerParams", "ModelPlan", "PlainTensor",
    "Pointwise", "QuantParams", "ReductionOp", "choose_config", "classify", "infer", "load_model",
    "memory_report", "output_shape", "pack_activations", "run_layer", "run_layer_quantized",
    "unpack_activations",
]
