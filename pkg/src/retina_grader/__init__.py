"""Diabetic-retinopathy severity grading from colour fundus photographs.

Morphological preprocessing, a small convolutional network trained by plain
SGD, and a seeded, reproducible training and evaluation pipeline.
"""

from importlib.metadata import PackageNotFoundError, version

from .data import DatasetManifest, Severity, SplitConfig, load_manifest, stratified_split
from .errors import RetinaGraderError
from .modelfile import ModelFile, load_model, save_model
from .morph import PreprocSpec, StructuringElement, preprocess
from .nn import Network, NetworkSpec, default_network_spec
from .tensor import Rng, Tensor
from .train import Metrics, TrainConfig, run_training

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "Metrics", "ModelFile", "Network", "NetworkSpec", "PreprocSpec",
    "RetinaGraderError", "Rng", "Severity", "SplitConfig", "StructuringElement", "Tensor",
    "TrainConfig", "default_network_spec", "load_manifest", "load_model", "preprocess",
    "run_training", "save_model", "stratified_split",
]
