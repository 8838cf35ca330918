"""Text-prompted zero-shot segmentation: mask proposals, overlap filters,
contrastive image-text heads and prompt-driven segment selection."""
from .data import (CaptionStyle, CaptionedSample, DatasetManifest, PreprocessedImage, SplitSpec,
                   build_caption, preprocess_image, split_dataset)
from .encoders import (EmbeddingBatch, EmbeddingModel, HashBackend, Modality, OraclePairedEncoder,
                       ProjectionHead, mock_hash_encoder, project)
from .errors import (ConfigError, InvalidInputError, NoCandidatesError, ShapeError, TrainingDiverged,
                     UnknownLabelError)
from .filters import FilterConfig, dedup, filter_pipeline, split_intersections
from .masks import ColorRegionProposer, Mask, SyntheticScene, iou, rle_decode, rle_encode, synthetic_proposer
from .selector import Pipeline, RandomChooser, RenderMode, SelectionResult, render_segment, select_segment
from .trainer import (GridResult, PlateauScheduler, TrainerConfig, TrainRecord, clip_loss,
                      contrastive_targets, grid_search, similarity_logits, train, train_on_features)

__version__ = "0.1.0"
