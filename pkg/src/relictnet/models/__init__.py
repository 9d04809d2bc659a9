from .encoder import DenseEncoder, EncoderSpec, build_encoder
from .heads import (
    ARCHITECTURES,
    FPN,
    Classifier,
    LinkNet,
    ModelSpec,
    Segmenter,
    UNet,
    build_classifier,
    build_model,
    build_segmenter,
)
from .store import (
    CheckpointError,
    ParameterStore,
    TransferError,
    encoder_state_equal,
    transfer_encoder,
)

__all__ = [
    "ARCHITECTURES",
    "CheckpointError",
    "Classifier",
    "DenseEncoder",
    "EncoderSpec",
    "FPN",
    "LinkNet",
    "ModelSpec",
    "ParameterStore",
    "Segmenter",
    "TransferError",
    "UNet",
    "build_classifier",
    "build_encoder",
    "build_model",
    "build_segmenter",
    "encoder_state_equal",
    "transfer_encoder",
]
