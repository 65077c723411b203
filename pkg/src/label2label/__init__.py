"""Attribute recognition as label-sentence modelling, on a small numpy autograd engine."""

from .aqn import AttributeQueryNetwork, aqn_forward, readout
from .backbone import Backbone, FeatureMap, extract_features, positional_table_2d
from .config import RunConfig, from_mapping
from .data import SynthSpec, bayes_oracle, generate, load_dataset
from .icmlm import ICMLM, MASK, embed_words, icmlm_forward, infer, mask_sentence, mlm_no_image_forward
from .model import Label2Label, ModelConfig
from .objectives import (
    MetricReport,
    attribute_weights,
    bce_loss,
    compute_instance_metrics,
    compute_mA,
    per_attribute_error,
    total_loss,
)
from .tensor import Tensor, backward, check_grad, no_grad
from .train import evaluate, export_attention, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
