"""Semi-supervised change detection with an adapter-tuned hierarchical siamese encoder."""

from .core import BiTemporalPair, DatasetManifest, PairRecord, PartitionSpec, load_pair, validate_manifest
from .network import ChangeDetector, NetworkConfig, build_network
from .trainer import LossBreakdown, TrainConfig, fit

__version__ = "0.1.0"
