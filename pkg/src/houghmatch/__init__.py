"""Trainable region matching with offset-bin Hough voting."""

from .embedding import EmbeddingParams, ScoreMode, init_params, load_params, save_params
from .errors import FormatError, HoughMatchError, InvalidInputError, NumericError
from .features import FeatureGrid, load_feature_grid, roi_pool, save_feature_grid
from .geometry import BinGrid, Box, ImageSize, assign_bin, iou, offset
from .learning import LabeledPair, SampleConfig, TrainConfig, prepare_pair, train
from .scoring import MatchSet, best_matches, build_match_set, score_dense, score_sparse

__version__ = "0.1.0"
