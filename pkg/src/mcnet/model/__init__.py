from mcnet.model.audit import REFERENCE_PARAMS, ShapeAuditReport, shape_audit
from mcnet.model.checkpoint import checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint
from mcnet.model.config import CROSS_MAPPINGS, KERNEL_SIZES, STRATEGIES, ModelConfig
from mcnet.model.graph import (
    CrossFusion,
    ModelGraph,
    assemble_model,
    build_decoder_submodule,
    build_encoder_submodule,
    build_integration_module,
    parameter_count,
)
from mcnet.model.train import EpochRecord, evaluate_loss, fit, train_epoch

__all__ = [
    "CROSS_MAPPINGS", "CrossFusion", "EpochRecord", "KERNEL_SIZES", "ModelConfig", "ModelGraph",
    "REFERENCE_PARAMS", "STRATEGIES", "ShapeAuditReport", "assemble_model",
    "build_decoder_submodule", "build_encoder_submodule", "build_integration_module",
    "checkpoint_bytes", "evaluate_loss", "fit", "load_checkpoint", "parameter_count",
    "read_checkpoint", "save_checkpoint", "shape_audit", "train_epoch",
]
