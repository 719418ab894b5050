"""Run configuration: model dimensions, data generation, schedule and paths."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("none", "separate-A", "mlp-fusion", "unimodal-V", "unimodal-T")
MODES = ("factored", "composed")

# Fields that do not change what gets computed; excluded from the config hash.
_PATH_FIELDS = ("out", "data", "checkpoint")


@dataclass
class RunConfig:
    # model
    d_model: int = 64
    d_state: int = 16
    raw_dim: int = 32
    kernel_size: int = 3
    delta_rank: int | None = None
    depth: int = 1
    discretization: str = "zoh"
    chunk: int = 0
    ablation: str = "none"
    freeze_A: bool = False
    # data
    mode: str = "composed"
    frames: int = 32
    text_len: int = 24
    n_verbs: int = 8
    n_nouns: int = 12
    k_v: int = 4
    noise: float = 0.5
    n_samples: int = 8900
    # optimisation
    epochs: int = 20
    batch_size: int = 64
    warmup_epochs: int = 2
    base_lr: float = 1e-6
    peak_lr: float = 1e-3
    fusion_peak_lr: float = 3e-3
    final_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    # paths
    out: str = "runs/default"
    data: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.discretization not in ("zoh", "euler"):
            raise ConfigError(f"discretization must be 'zoh' or 'euler', got {self.discretization!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.chunk < 0:
            raise ConfigError("chunk must be >= 0 (0 selects the sequential scan)")
        for name in ("d_model", "d_state", "raw_dim", "depth", "frames", "text_len", "n_verbs", "n_nouns",
                     "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.k_v <= self.frames:
            raise ConfigError(f"k_v must lie in [0, frames], got {self.k_v}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")

    @property
    def separate_A(self) -> bool:
        return self.ablation == "separate-A"

    @property
    def modalities(self) -> tuple[str, ...]:
        if self.ablation == "unimodal-V":
            return ("V",)
        if self.ablation == "unimodal-T":
            return ("T",)
        return ("V", "T")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = {k: v for k, v in data.items() if k not in known}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> RunConfig:
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of every non-path field."""
        d = {k: v for k, v in self.to_dict().items() if k not in _PATH_FIELDS}
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def data_hash(self) -> str:
        """Hash of the fields that determine the synthetic dataset."""
        keys = ("mode", "frames", "text_len", "raw_dim", "n_verbs", "n_nouns", "k_v", "noise", "n_samples", "seed")
        canon = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()
