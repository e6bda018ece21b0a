"""Open-set single-source domain generalization with style, content and edge-based augmentation."""

from .core import (
    ConfigError,
    DataError,
    DebugError,
    LabelSpace,
    LossBreakdown,
    NumericError,
    SampleRecord,
    ShapeError,
    TrainConfig,
    make_label_space,
    validate_config,
)

__version__ = "0.1.0"
