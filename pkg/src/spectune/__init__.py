"""Spectral-domain parameter-efficient fine-tuning for toy point-cloud transformers."""

from .adapter import AdapterContext, AdapterParams, count_trainable, pcsa_backward, pcsa_forward
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, ContractError, DataError, NumericError, RangeError, SizeError,
                     SpectuneError)
from .graph import SpectralBasis, build_adjacency, eigendecompose, graph_basis, laplacian
from .ordering import OrderingResult, sort_keypoints
from .pointcloud import PatchSet, PointCloud, TokenMatrix, farthest_point_sampling, group_patches
from .spectral import dct_basis, gft, igft, total_variation

__version__ = "0.1.0"
