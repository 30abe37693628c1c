"""Neural architecture search with straight-through gradients over sampled sub-graphs."""
from .autodiff import (ContractError, GraphError, NumericError, Tensor, backward, detach,
                       no_grad, precision, set_precision, straight_through)
from .config import ConfigError, ExperimentConfig, load_config, planted_context_config
from .estimators import EstimatorConfig
from .metrics import MemoryModel, account_memory
from .pipeline import run_pipeline, warmup_ablation
from .supernet import (NetSpec, SuperNetwork, count_subgraphs, derive_top1, preset,
                       sample_subgraph)

__version__ = "0.1.0"
