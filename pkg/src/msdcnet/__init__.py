"""Multi-scale dense stereo matching network on a small numpy autodiff core."""
from ._kernels import BACKEND
from .data import StereoSample, SynthSpec, generate_synthetic_pair, synthetic_dataset
from .gradcheck import GradCheckReport, grad_check
from .metrics import MetricReport, d1_rate, disparity_metrics, smooth_l1_loss
from .model import ModelConfig, ModelParams, count_params, forward, layer_plan
from .tensor import Parameter, Tensor, no_grad
from .train import AdamState, Checkpoint, TrainRunConfig, adam_step, run_training

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "StereoSample", "SynthSpec", "generate_synthetic_pair", "synthetic_dataset",
    "GradCheckReport", "grad_check", "MetricReport", "d1_rate", "disparity_metrics",
    "smooth_l1_loss", "ModelConfig", "ModelParams", "count_params", "forward", "layer_plan",
    "Parameter", "Tensor", "no_grad", "AdamState", "Checkpoint", "TrainRunConfig", "adam_step",
    "run_training",
]
