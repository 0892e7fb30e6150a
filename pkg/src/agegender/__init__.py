"""Multi-task age-bucket and gender prediction with attention and residual CNNs, in numpy."""

from .data import BucketScheme, SampleRecord, age_to_bucket, parse_utk_filename, scan_dataset, split_dataset
from .evaluation import MetricsReport, aabd, accuracy, confusion_matrix, evaluate, probability_histogram
from .models import (
    Ensemble,
    MultiTaskModel,
    MultiTaskModelSpec,
    Prediction,
    attention_net_spec,
    attention_taps,
    build_attention_net,
    build_resnet_lite,
    ensemble_predict,
    forward_multitask,
    resnet_lite_spec,
)
from .serialization import load_model, save_model
from .tensor import GradTape, Tensor, backward, no_grad
from .training import Adam, TrainConfig, multitask_loss, train

__version__ = "0.1.0"
