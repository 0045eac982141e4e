"""SEDMamba: selective state-space error detection over long embedding sequences."""

from .complexity import ComplexityReport, complexity_report, count_params, estimate_flops, sweep_report
from .data import (AnnotationTrack, EmbeddingSequence, LabeledSequence, SynthConfig, derive_frame_labels,
                   load_embeddings, save_embeddings, synth_generate)
from .errors import (ConfigError, DataError, DimensionError, GraphError, NumericError, SedError,
                     UndefinedMetricError)
from .metrics import MetricsReport, average_precision, group_instances, roc_auc, stratified_eval
from .model import ModelConfig, SEDMamba, receptive_field_formula
from .tensor import Tensor, no_grad
from .training import TrainConfig, adamw_step, bce_loss, evaluate, train_run

__version__ = "0.1.0"
