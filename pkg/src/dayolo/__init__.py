"""Domain-adaptive one-stage detection at desk scale."""
from .adaptation import (DomainAdaptation, ScaleWeights, mlcr_loss, msia_loss, ria_loss,
                         roi_pool)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (CorruptionSpec, DetectionDataset, SceneSpec, generate_synthetic_domain_pair,
                   load_dataset, save_dataset)
from .diagnostics import consensus_gap, image_domain_accuracy
from .evaluation import average_precision, evaluate_detector, evaluate_map, export_features
from .grl import GradientReversal, GrlConfig, grl_apply
from .model import (BoxAnnotation, Detection, Detector, DetectorConfig, ImageSample, ShapeError,
                    ValidationError, decode_detections, detection_loss)
from .training import (DAYolo, DivergenceError, LossBundle, TrainConfig, compose_total_loss, fit, train_step,
                       validate_log)

__version__ = "0.1.0"
