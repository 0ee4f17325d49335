"""
Scene Graph Reasoner Configuration

Training hyperparameters and the output directories used by the CLI.
Config files are line-based key=value files (parsed with python-dotenv).
"""

import os
from dataclasses import asdict, dataclass, fields

from dotenv import dotenv_values

from error_handler import ErrorCategory, SGRError

# Output directories, relative to the working directory
LOG_DIR = "logs"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class TrainConfig:
    """
    Hyperparameters of one training run

    Defaults use lr 5e-5 and batch 16; the hidden size is kept small
    enough for CPU training.
    """
    learning_rate: float = 5e-5
    batch_size: int = 16
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 128
    epochs: int = 50
    seed: int = 13
    eval_every: int = 1
    use_structure_encoder: bool = True
    use_context_encoder: bool = True
    knowledge_train: bool = True
    knowledge_test: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Reject non-positive hyperparameters"""
        for name in ("learning_rate", "batch_size", "hidden_size", "num_layers",
                     "num_heads", "max_len", "epochs", "eval_every"):
            value = getattr(self, name)
            if value <= 0:
                raise SGRError("config value must be positive", ErrorCategory.CONTRACT,
                               key=name, value=value)
        if self.seed < 0:
            raise SGRError("seed must be non-negative", ErrorCategory.CONTRACT, seed=self.seed)
        if self.hidden_size % self.num_heads != 0:
            raise SGRError("hidden_size must be divisible by num_heads", ErrorCategory.CONTRACT,
                           hidden_size=self.hidden_size, num_heads=self.num_heads)
        if self.max_len < 4:
            raise SGRError("max_len too small for [CLS] x [SEP]", ErrorCategory.CONTRACT,
                           max_len=self.max_len)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build a config from already-typed or string values"""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise SGRError("unknown config key(s)", ErrorCategory.CONTRACT, keys=",".join(unknown))
        kwargs = {name: _coerce(name, known[name].type, value) for name, value in values.items()}
        return cls(**kwargs)


def _coerce(name, field_type, value):
    """Convert a raw config value to the dataclass field type"""
    type_name = field_type if isinstance(field_type, str) else field_type.__name__
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if type_name == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise SGRError("config value has the wrong type", ErrorCategory.CONTRACT,
                       key=name, value=text, expected=type_name)
    return text


def load_config(path=None, **overrides):
    """
    Load a TrainConfig from a key=value file

    Args:
        path (str): Config file path; None gives the defaults
        **overrides: Values that win over the file (e.g. seed from --seed)

    Returns:
        TrainConfig: Validated configuration
    """
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise SGRError("config file not found", ErrorCategory.IO, path=path)
        values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    values.update({key: value for key, value in overrides.items() if value is not None})
    return TrainConfig.from_dict(values)


def save_config(config, path):
    """Write a TrainConfig as key=value lines"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in config.to_dict().items():
            f.write(f"{key}={value}\n")


def get_log_dir():
    """Get the directory for the issue log and training logs"""
    os.makedirs(LOG_DIR, exist_ok=True)
    return LOG_DIR


def get_checkpoint_dir():
    """Get the directory for parameter checkpoints"""
    os.makedirs(CHECKPOINT_DIR, exist_ok=True)
    return CHECKPOINT_DIR
