"""Multi-exit Monte-Carlo dropout networks with accelerator mapping.

The pipeline: describe a feed-forward network (netspec), attach early
exits and dropout sites (netspec), sample it (inference + dropout +
runtime), score quality and cost (metrics), sweep the joint design
space (explorer), and plan the hardware mapping (mapping + emitter).
"""

from .datasets import Dataset, NoiseSpec, load_dataset, make_blobs, save_dataset
from .dropout import DropoutConfig, MaskSet, derive_seed, generate_masks
from .emitter import AcceleratorPlan, emit_plan, load_plan, render_report, save_plan
from .explorer import (
    Constraints,
    DesignPoint,
    EvaluationSettings,
    ExplorationGrids,
    Priority,
    enumerate_design_points,
    evaluate_design_point,
    explore,
    filter_and_rank,
)
from .inference import (
    PredictionSet,
    confidence_exit,
    ensemble,
    ensemble_dataset,
    predict,
    run_trunk,
)
from .mapping import (
    HardwareModel,
    MappingPlan,
    build_mapping,
    default_hardware_model,
    estimate_latency,
    estimate_resources,
    load_hardware_model,
    pareto_mappings,
)
from .metrics import (
    FlopReport,
    MetricsReport,
    accuracy,
    average_predictive_entropy,
    cost_multi_exit,
    cost_single_exit,
    count_flops,
    expected_calibration_error,
    predictive_entropy,
    reduction_rate,
)
from .netspec import (
    LayerSpec,
    MultiExitSpec,
    NetworkSpec,
    insert_dropout,
    keep_exits,
    load_multi_exit,
    load_network,
    place_exits,
    save_multi_exit,
    save_network,
    scale_channels,
    validate,
)
from .runtime import QFormat, load_weights, quantize, save_weights
from .train import TrainConfig, train_toy

__version__ = "0.1.0"

__all__ = [
    "AcceleratorPlan",
    "Constraints",
    "Dataset",
    "DesignPoint",
    "DropoutConfig",
    "EvaluationSettings",
    "ExplorationGrids",
    "FlopReport",
    "HardwareModel",
    "LayerSpec",
    "MappingPlan",
    "MaskSet",
    "MetricsReport",
    "MultiExitSpec",
    "NetworkSpec",
    "NoiseSpec",
    "PredictionSet",
    "Priority",
    "QFormat",
    "TrainConfig",
    "accuracy",
    "average_predictive_entropy",
    "build_mapping",
    "confidence_exit",
    "cost_multi_exit",
    "cost_single_exit",
    "count_flops",
    "default_hardware_model",
    "derive_seed",
    "emit_plan",
    "ensemble",
    "ensemble_dataset",
    "enumerate_design_points",
    "estimate_latency",
    "estimate_resources",
    "evaluate_design_point",
    "expected_calibration_error",
    "explore",
    "filter_and_rank",
    "generate_masks",
    "insert_dropout",
    "keep_exits",
    "load_dataset",
    "load_hardware_model",
    "load_multi_exit",
    "load_network",
    "load_plan",
    "load_weights",
    "make_blobs",
    "pareto_mappings",
    "place_exits",
    "predict",
    "predictive_entropy",
    "quantize",
    "reduction_rate",
    "render_report",
    "run_trunk",
    "save_dataset",
    "save_multi_exit",
    "save_network",
    "save_plan",
    "save_weights",
    "scale_channels",
    "train_toy",
    "validate",
]
