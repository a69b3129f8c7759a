"""Run configuration: a flat ``key = value`` text file with typed fields."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from examrec.errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # encoders
    embed_dim: int = 64
    rgat_layers: int = 2
    n_heads: int = 2
    kan_blocks: int = 2
    kan_grid: int = 5
    kan_order: int = 3
    kan_range: float = 1.0
    ff_dim: int = 0  # 0 -> 2 * embed_dim
    max_len: int = 64
    dropout: float = 0.1
    fusion: str = "spatial_query"
    # diffusion
    diff_steps: int = 50
    noise_scale: float = 0.1
    noise_min: float = 0.001
    noise_max: float = 0.01
    step_dim: int = 16
    inference_steps: int = -1  # -1 -> diff_steps
    k: int = 40
    gate_eps: float = 0.2
    gate_window: int = 5
    reset_denoiser: bool = False
    # optimization
    reg_lambda: float = 1e-5
    lr: float = 1e-3
    denoiser_lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    denoiser_epochs: int = -1  # -1 -> epochs
    rounds: int = 3
    train_negatives: int = 8
    eval_negatives: int = 99
    seed: int = 0
    select_by_validation: bool = True
    # ablations
    use_diffusion: bool = True
    use_rgat: bool = True
    use_kansformer: bool = True
    task_adaptive: bool = True

    @property
    def n_denoiser_epochs(self) -> int:
        return self.epochs if self.denoiser_epochs < 0 else self.denoiser_epochs

    @property
    def n_inference_steps(self) -> int:
        return self.diff_steps if self.inference_steps < 0 else self.inference_steps

    def validate(self) -> "RunConfig":
        positive = ("embed_dim", "rgat_layers", "n_heads", "kan_grid", "kan_order", "max_len",
                    "diff_steps", "step_dim", "k", "batch_size", "rounds", "train_negatives",
                    "eval_negatives")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("kan_blocks", "epochs", "ff_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.embed_dim % self.n_heads:
            raise ConfigError("n_heads", "must divide embed_dim")
        if self.ff_dim and self.ff_dim < self.embed_dim:
            raise ConfigError("ff_dim", "must be >= embed_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.kan_range <= 0:
            raise ConfigError("kan_range", "must be positive")
        if not 0.0 < self.gate_eps <= 1.0:
            raise ConfigError("gate_eps", "must lie in (0, 1]")
        if self.gate_window <= 1:
            raise ConfigError("gate_window", "must exceed 1")
        if not 0.0 <= self.noise_scale <= 1.0:
            raise ConfigError("noise_scale", "must lie in [0, 1]")
        if not 0.0 < self.noise_min < self.noise_max < 1.0:
            raise ConfigError("noise_min", "need 0 < noise_min < noise_max < 1")
        if self.noise_scale * self.noise_max >= 1.0:
            raise ConfigError("noise_scale", "noise_scale * noise_max must be < 1")
        if self.n_inference_steps > self.diff_steps:
            raise ConfigError("inference_steps", "cannot exceed diff_steps")
        if self.lr < 0 or self.denoiser_lr < 0 or self.reg_lambda < 0:
            raise ConfigError("lr", "learning rates and reg_lambda must be >= 0")
        if self.fusion not in ("spatial_query", "temporal_query", "pooled", "linear"):
            raise ConfigError("fusion", f"unknown mode {self.fusion!r}")
        return self

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply string-valued overrides, converting to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in overrides.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ConfigError(key, "unknown configuration key")
            changes[name] = _convert(name, types[name], raw)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        overrides = {}
        for no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {no}", f"expected key = value, got {line!r}")
            overrides[key.strip()] = value.strip()
        return cls().with_overrides(overrides)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(name: str, typ: str, raw: str):
    raw = str(raw).strip()
    try:
        if typ == "bool":
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {typ}") from None
