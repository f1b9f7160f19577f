"""
Configuration for sparse FastTucker training runs.
Contains the default hyperparameters, the training config dataclass and the
command-line run config.
"""

from dataclasses import dataclass, asdict, field, fields
from typing import Dict, List, Optional, Any
import json
import os

from model import Hyperparams

# ============================================================================
# DEFAULTS
# ============================================================================

# Training variants, in the order the bench harness reports them
VARIANTS = ("fasttucker", "fastertucker", "fastertucker-coo", "plus")

# Matrix product backends (see tile_kernels.create_kernels)
KERNELS = ("tiled", "flat")

SUBCOMMANDS = ("gen", "train", "eval", "bench")

DEFAULT_LR_A = 1e-3
DEFAULT_LR_B = 1e-3
DEFAULT_REG_A = 1e-4
DEFAULT_REG_B = 1e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_RANK = 16  # both J_n and R
DEFAULT_EPOCHS = 50
DEFAULT_TEST_FRACTION = 0.1

# Workers fallback when --workers is not given
ENV_THREADS = "FTK_THREADS"


class ConfigError(ValueError):
    """Raised when a run configuration is invalid."""


# ============================================================================
# CONFIGURATION DATACLASSES
# ============================================================================


@dataclass
class TrainConfig:
    """Configuration dataclass for a training run."""

    variant: str = "plus"

    # Ranks: per-mode J_n wins over the uniform value
    ranks: Optional[List[int]] = None
    rank_j: int = DEFAULT_RANK
    rank: int = DEFAULT_RANK  # R

    # SGD settings
    lr_a: float = DEFAULT_LR_A
    lr_b: float = DEFAULT_LR_B
    reg_a: float = DEFAULT_REG_A
    reg_b: float = DEFAULT_REG_B
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE

    # Execution
    workers: int = 1
    seed: int = 0
    store_c: bool = False  # plus core phase reads a precomputed C cache
    kernel: str = "tiled"
    wave_size: Optional[int] = None  # None = derived from the tensor dims

    # Initialization scale; None = derived from the train values
    init_scale: Optional[float] = None

    test_fraction: float = DEFAULT_TEST_FRACTION

    def resolve_ranks(self, order: int) -> List[int]:
        """
        Per-mode ranks J_1..J_N for a tensor of the given order.

        Args:
            order: Tensor order N

        Returns:
            List of N ranks
        """
        if self.ranks is None:
            return [self.rank_j] * order
        if len(self.ranks) != order:
            raise ConfigError(
                f"--ranks lists {len(self.ranks)} values but the tensor has order {order}"
            )
        return list(self.ranks)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            lr_a=self.lr_a,
            lr_b=self.lr_b,
            reg_a=self.reg_a,
            reg_b=self.reg_b,
            epochs=self.epochs,
            batch_size=self.batch_size,
        )

    def validate(self):
        """Check every field; raises ConfigError on the first problem."""
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant '{self.variant}' (expected one of {', '.join(VARIANTS)})"
            )
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel '{self.kernel}'")
        if self.store_c and self.variant != "plus":
            raise ConfigError("--store-c only applies to the plus variant")
        ranks = self.ranks if self.ranks is not None else [self.rank_j]
        if any(j < 1 for j in ranks) or self.rank < 1:
            raise ConfigError("ranks must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.wave_size is not None and self.wave_size < 1:
            raise ConfigError("wave size must be at least 1")
        if self.init_scale is not None and self.init_scale <= 0:
            raise ConfigError("init scale must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test fraction must lie in (0, 1)")
        try:
            self.hyperparams().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        """
        Convert the config to a dictionary for JSON serialization.

        Returns:
            Dictionary representation of the config
        """
        result = asdict(self)
        if result.get("ranks") is not None:
            result["ranks"] = list(result["ranks"])
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """
        Create a TrainConfig instance from a dictionary.

        Args:
            data: Dictionary containing config values

        Returns:
            TrainConfig instance
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

        config_data = data.copy()
        if config_data.get("ranks") is not None:
            config_data["ranks"] = [int(j) for j in config_data["ranks"]]
        return cls(**config_data)

    def save_to_json(self, filepath: str):
        """
        Save the config to a JSON file.

        Args:
            filepath: Path to save the JSON file
        """
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)

    @classmethod
    def load_from_json(cls, filepath: str) -> "TrainConfig":
        """
        Load a config from a JSON file.

        Args:
            filepath: Path to the JSON file

        Returns:
            TrainConfig instance
        """
        with open(filepath, "r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{filepath}: expected a JSON object")
        return cls.from_dict(data)


@dataclass
class RunConfig:
    """Resolved command-line configuration, validated before any work starts."""

    command: str
    input: Optional[str] = None
    output: Optional[str] = None
    model_path: Optional[str] = None
    history_path: Optional[str] = None
    csv: bool = False
    full_scale: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.command not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand '{self.command}'")
        if self.command == "gen" and not self.output:
            raise ConfigError("gen requires -o/--output")
        if self.command in ("train", "eval", "bench") and not self.input:
            raise ConfigError(f"{self.command} requires -i/--input")
        if self.command == "eval" and not self.model_path:
            raise ConfigError("eval requires -m/--model")
        self.train.validate()


def resolve_workers(value: Optional[int] = None) -> int:
    """
    Worker count from an explicit value, else FTK_THREADS, else 1.

    Args:
        value: Value given on the command line, or None

    Returns:
        Positive worker count
    """
    if value is not None:
        if value < 1:
            raise ConfigError("--workers must be at least 1")
        return value

    env = os.environ.get(ENV_THREADS)
    if env is None or env.strip() == "":
        return 1
    try:
        workers = int(env)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got '{env}'")
    if workers < 1:
        raise ConfigError(f"{ENV_THREADS} must be at least 1")
    return workers
