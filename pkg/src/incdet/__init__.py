"""Incremental learning for anchor-free detectors with selective and inter-related distillation."""
from .data import (
    DetectionDataset, DetectionSample, SplitSpec, SynthSpec, generate_synthetic, load_voc_annotations,
    synthetic_catalog, write_voc,
)
from .distill import (
    DistillConfig, LossBreakdown, aggregate_feature_distillation, feature_distillation_loss,
    inter_related_loss, pairwise_feature_distance, preset_config, select_ir_samples, total_loss,
)
from .errors import (
    AnnotationParseError, CatalogError, ConfigurationError, IncdetError, NumericError, ResumeError,
    ShapeError, StructuralError, TapError,
)
from .metrics import DetectionRecord, EvalReport, average_precision, evaluate_report, f1i, mean_ap
from .model import (
    Checkpoint, DetectorConfig, TapPoint, build_detector, expand_classes, forward_with_taps,
    load_checkpoint, restore_old_class_parameters, save_checkpoint, tap,
)
from .protocol import IncrementalScenario, make_scenario, step_class_partition, step_test_data, step_train_data
from .train import StepResult, TrainConfig, run_scenario, train_base, train_incremental_step

__version__ = "0.1.0"
