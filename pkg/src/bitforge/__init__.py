"""Hardware-aware mixed-precision quantization search on small CNNs."""

__version__ = "0.1.0"

from .data import Dataset, DatasetSplits, load_splits, synthetic_splits
from .netgraph import (LayerSpec, ModelFileError, ModelGraph, ShapeMismatchError, TrainingDiverged,
                       evaluate, finetune, forward, layer_features, load_model, save_model, train_float)
from .policy import BitwidthPolicy, PolicyMismatchError
from .quantizer import (CodebookQuant, Histogram, QuantParams, calibrate_clip, kmeans_quantize,
                        linear_quantize, model_size, quantize_model)
from .hwsim import CostReport, HardwareConfig, bitops, preset, simulate
from .agent import AgentConfig, DDPGAgent, MlpNet, Transition
from .search import Budget, QuantEnv, RewardConfig, action_to_bits, enforce_budget, parse_limit, search
