from .losses import bce_loss, softmax_cross_entropy
from .model import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    ForwardCache,
    ModelSpec,
    ParamSet,
    ShapeError,
    Softmax,
    backward,
    backward_with_input,
    cnn_classifier_spec,
    forward,
    init_model,
    mlp_spec,
    predict_class,
)
from .optim import OptimizerState, apply_adam, apply_sgd, apply_update

__all__ = [
    "Activation", "Conv2d", "Dense", "Flatten", "ForwardCache", "ModelSpec", "ParamSet",
    "ShapeError", "Softmax", "backward", "backward_with_input", "bce_loss", "cnn_classifier_spec",
    "forward", "init_model", "mlp_spec", "predict_class", "softmax_cross_entropy",
    "OptimizerState", "apply_adam", "apply_sgd", "apply_update",
]
