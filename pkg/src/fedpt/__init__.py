"""Federated proxy tuning at desk scale.

Devices fine-tune LoRA adapters on a small byte-level transformer; the server
averages them, steers a frozen large model with the small model's logit offset
and distils that proxy-tuned ensemble back into the small adapter.
"""

from .adapter import AdaptedModel, LoraAdapter, deserialize, new_adapter, serialize
from .config import ExperimentConfig, load_config
from .distill import DistillConfig, distill, kd_loss
from .errors import ConfigurationError, ContractViolation, FedPTError, FormatError, InputError
from .evaluation import dist_n, evaluate, rouge_l
from .federation import FedConfig, aggregate, local_update, run_experiment, run_round, select_devices
from .model import LARGE, SMALL, ModelConfig, ModelParams, forward_logits, init_params, nll_loss
from .proxy import ProxyEnsemble, proxy_logits

__all__ = [
    "AdaptedModel", "ConfigurationError", "ContractViolation", "DistillConfig",
    "ExperimentConfig", "FedConfig", "FedPTError", "FormatError", "InputError", "LARGE",
    "LoraAdapter", "ModelConfig", "ModelParams", "ProxyEnsemble", "SMALL", "aggregate",
    "deserialize", "dist_n", "distill", "evaluate", "forward_logits", "init_params", "kd_loss",
    "load_config", "local_update", "new_adapter", "nll_loss", "proxy_logits", "rouge_l",
    "run_experiment", "run_round", "select_devices", "serialize",
]
