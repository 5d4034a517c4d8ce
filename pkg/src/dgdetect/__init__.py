"""Domain-generalized single-stage object detection toolkit.

Builds water-quality-restyled training domains, trains a grid detector
with optional adversarial domain loss and invariance penalty, and ships
the evaluation/analysis harness (mAP, performance matrices, style
distances, saliency maps).
"""

from .data import (
    AnnotatedImage,
    AnnotationParseError,
    BoxLabel,
    DatasetManifest,
    DomainId,
    ManifestError,
    SplitEntry,
    assign_domain_labels,
    load_manifest,
    write_manifest,
)
from .detector import (
    Detection,
    DetectorConfig,
    GridTarget,
    LossBreakdown,
    RawPrediction,
    assign_targets,
    decode,
    nms,
    yolo_loss,
)
from .dim import DimConfig, DomainClassifier, GradientReversal, domain_classify, domain_loss, grl
from .evaluation import (
    EvalConfig,
    PerfMatrix,
    SaliencyMap,
    average_precision,
    evaluate,
    iou,
    perf_delta_matrix,
    smoothgrad,
    style_perf_correlation,
)
from .irm import (
    IrmConfig,
    PenaltyBreakdown,
    batch_penalty,
    penalty_closed_form,
    penalty_finite_diff,
)
from .model import DetectorModel, build_model, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate_synthetic_dataset
from .train import TrainConfig, TrainRecord, fit, total_loss, train_step
from .wqt import (
    ColorStats,
    StyleDistanceMatrix,
    WaterParams,
    build_distance_matrix,
    color_stats,
    simulate_water,
    style_distance,
    synthesize_domains,
    transfer_color,
)

__version__ = "0.1.0"
