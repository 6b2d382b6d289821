"""Collective perception training framework: scenario data, training runs,
evaluation geometry and the control protocol parser."""

from ._coperc import (
    ConfigError,
    DataError,
    average_precision,
    encoder_grad_slots,
    generate,
    list_meta_files,
    load_frames,
    nms,
    normalize_config,
    parse_control,
    rotated_iou,
    run,
)

__all__ = [
    "ConfigError",
    "DataError",
    "average_precision",
    "encoder_grad_slots",
    "generate",
    "list_meta_files",
    "load_frames",
    "nms",
    "normalize_config",
    "parse_control",
    "rotated_iou",
    "run",
]
