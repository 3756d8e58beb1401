"""Rank-aggregated ensemble of layer-wise generative classifiers.

Makes a pre-trained feed-forward classifier robust at inference time by
scoring each parametric layer's pre-activation response PMFs against
class-conditional mixtures and aggregating the per-layer class rankings with
Borda counts. Ships with the attack generators (FGSM/PGD/SPSA) and the
evaluation harness used to verify the defense at desk scale.
"""

from .errors import FormatError, ValidationError
from .engine import (
    Conv2d, Flatten, Linear, MaxPool2d, NetworkModel, ReLU, FeatureTrace,
    conv2d_forward, linear_forward, forward_logits, forward_with_trace,
    input_gradient, softmax, train_sgd, small_cnn,
)
from .core import (
    BordaTally, GenerativeEnsemble, LayerSignature, RankPreference,
    layer_signature, build_ensemble, kl_divergence, rank_layer, borda_layer,
    regroup_predict, per_layer_accuracy, select_k,
)
from .attacks import (
    AttackConfig, AdversarialRecord, fgsm, pgd, pgd_high_confidence, spsa,
    spsa_gradient_estimate, filter_successful, draw_target,
)
from .dataio import (
    LabeledDataset, load_mnist, load_cifar10, save_model, load_model,
    save_ensemble, load_ensemble, save_adversarial_set, load_adversarial_set,
    ReportRow, write_report,
)

__version__ = "0.1.0"

__all__ = [
    "FormatError", "ValidationError",
    "Conv2d", "Flatten", "Linear", "MaxPool2d", "NetworkModel", "ReLU",
    "FeatureTrace", "conv2d_forward", "linear_forward", "forward_logits",
    "forward_with_trace", "input_gradient", "softmax", "train_sgd", "small_cnn",
    "BordaTally", "GenerativeEnsemble", "LayerSignature", "RankPreference",
    "layer_signature", "build_ensemble", "kl_divergence", "rank_layer",
    "borda_layer", "regroup_predict", "per_layer_accuracy", "select_k",
    "AttackConfig", "AdversarialRecord", "fgsm", "pgd", "pgd_high_confidence",
    "spsa", "spsa_gradient_estimate", "filter_successful", "draw_target",
    "LabeledDataset", "load_mnist", "load_cifar10", "save_model", "load_model",
    "save_ensemble", "load_ensemble", "save_adversarial_set",
    "load_adversarial_set", "ReportRow", "write_report",
]
