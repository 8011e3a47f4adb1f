"""Model hyperparameters and layer-pattern resolution."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

from .numerics import ConfigurationError

NORMALIZATIONS = ("divide_by_sum", "rms", "softmax", "scaled_softmax", "none")
RANKER_MODES = ("unidirectional", "bidirectional", "off")

# named static/dynamic arrangements; anything else is read as a literal "SDSD..." string
NAMED_PATTERNS = (
    "interleaved_sd",
    "interleaved_ds",
    "single_dynamic_head",
    "single_dynamic_tail",
    "two_stage_sd",
    "two_stage_ds",
    "all_static",
    "all_dynamic",
)


class CoverageWarning(UserWarning):
    """S(k+1) is far from the training sequence length."""


def resolve_pattern(pattern: str, n_layers: int) -> list[str]:
    """Expand a pattern name (or literal ``"SDSD"``) to ``n_layers`` kinds."""
    L = n_layers
    if pattern == "interleaved_sd":
        kinds = ["S" if i % 2 == 0 else "D" for i in range(L)]
    elif pattern == "interleaved_ds":
        kinds = ["D" if i % 2 == 0 else "S" for i in range(L)]
    elif pattern == "single_dynamic_head":
        kinds = ["D"] + ["S"] * (L - 1)
    elif pattern == "single_dynamic_tail":
        kinds = ["S"] * (L - 1) + ["D"]
    elif pattern == "two_stage_sd":
        kinds = ["S"] * (L // 2) + ["D"] * (L - L // 2)
    elif pattern == "two_stage_ds":
        kinds = ["D"] * (L // 2) + ["S"] * (L - L // 2)
    elif pattern == "all_static":
        kinds = ["S"] * L
    elif pattern == "all_dynamic":
        kinds = ["D"] * L
    else:
        kinds = list(pattern.upper())
        if len(kinds) != L or any(k not in "SD" for k in kinds):
            raise ConfigurationError(
                f"pattern {pattern!r} is neither one of {NAMED_PATTERNS} "
                f"nor a length-{L} string over 'S'/'D'")
    return ["static" if k == "S" else "dynamic" for k in kinds]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d: int = 64
    m: int = 256
    m_h: int = 128
    m_t: int = 128
    N: int = 256
    S: int = 32
    k: int = 3
    L: int = 6
    pattern: str = "interleaved_sd"
    normalization: str = "divide_by_sum"
    ranker_mode: str = "unidirectional"
    compression_on: bool = True
    residual_on: bool = True
    gate_on: bool = True
    decoupled_on: bool = True
    bias_on: bool = True
    tie_embeddings: bool = True
    eps_sim: float = 1e-6
    mask_rate: float = 0.20
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.m != self.m_h + self.m_t:
            raise ConfigurationError(f"m ({self.m}) must equal m_h + m_t ({self.m_h} + {self.m_t})")
        if self.m_t <= 0 or self.m_t % 2:
            raise ConfigurationError(f"m_t must be a positive even number, got {self.m_t}")
        if min(self.vocab_size, self.d, self.N, self.S, self.L) < 1 or self.m_h < 0 or self.k < 0:
            raise ConfigurationError("sizes must be positive (k and m_h may be zero)")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"normalization must be one of {NORMALIZATIONS}")
        if self.ranker_mode not in RANKER_MODES:
            raise ConfigurationError(f"ranker_mode must be one of {RANKER_MODES}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigurationError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.eps_sim <= 0:
            raise ConfigurationError("eps_sim must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError("dtype must be float64 or float32")
        resolve_pattern(self.pattern, self.L)
        coverage = self.S * (self.k + 1)
        if self.ranker_mode != "off" and not (self.N / 2 <= coverage <= 2 * self.N):
            warnings.warn(
                f"S(k+1) = {coverage} is more than 2x away from N = {self.N}",
                CoverageWarning, stacklevel=3)

    @property
    def d_ctx(self) -> int:
        """Width of each tail half (gate and contextual)."""
        return self.m_t // 2

    @property
    def layer_kinds(self) -> list[str]:
        if not self.decoupled_on:
            return ["coupled"] * self.L
        return resolve_pattern(self.pattern, self.L)

    @property
    def uses_compressor(self) -> bool:
        return self.ranker_mode != "off" and self.compression_on

    @property
    def context_width(self) -> int:
        """Rows C seen by every processor layer."""
        if self.ranker_mode == "off" or self.compression_on:
            return self.S
        return (self.k + 1) * self.S

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown model keys {unknown}; valid keys: {sorted(names)}")
        return cls(**data)
