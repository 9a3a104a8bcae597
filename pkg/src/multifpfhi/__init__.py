"""Point-cloud anomaly detection from fused geometric (FPFH) and intensity histograms.

A defect-free reference scan is reduced to a coreset memory bank of
per-point descriptors; test points are scored by their distance to the bank.
"""

from .core import (LABEL_NAMES, NeighborGraph, NormalField, PointCloud, SpatialIndex, ball_query,
                   build_index, estimate_normals, radius_graph, voxel_downsample)
from .errors import (ConfigError, DegenerateInputError, FileAccessError, FormatError,
                     LayoutMismatchError, MultiFPFHIError, ParameterError)
from .features import (Block, FeatureMatrix, darboux_angles, extract_features, fpfh,
                       fuse_multimodal, intensity_histogram, spfh)
from .patchcore import AnomalyResult, MemoryBank, build_memory, classify, score
from .eval import EvalReport, evaluate, f1_at, kde, label_stats
from .config import RunConfig, load_config

__version__ = "0.1.0"
