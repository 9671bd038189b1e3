"""Dataclass configs and strict config-file loading.

Config files are YAML (JSON is accepted too, being a YAML subset) with the
top-level sections ``data``, ``model``, ``train`` and ``bench``. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from mtfm.errors import ConfigurationError

ATTN_NORMS = ("valid", "seq_len", "none")
PRECISIONS = ("f32", "f64")


@dataclass
class GeneratorConfig:
    n_scenarios: int = 3
    n_users: int = 1000
    seq_len_min: int = 4
    seq_len_max: int = 16
    rt_len_min: int = 2
    rt_len_max: int = 8
    exposures_min: int = 2
    exposures_max: int = 14
    positive_rate: float = 0.3
    # tolerated |empirical CTR rate - positive_rate| on generated data
    positive_rate_tolerance: float = 0.05
    noise: float = 0.5
    signal: float = 3.0
    n_items: int = 300
    latent_dim: int = 8
    window_start: int = 10_000
    window_len: int = 1_000
    seed: int = 0

    def validate(self) -> None:
        if self.n_scenarios < 1:
            raise ConfigurationError("n_scenarios must be >= 1")
        if self.n_users < 0:
            raise ConfigurationError("n_users must be >= 0")
        for lo, hi in (
            ("seq_len_min", "seq_len_max"),
            ("rt_len_min", "rt_len_max"),
            ("exposures_min", "exposures_max"),
        ):
            a, b = getattr(self, lo), getattr(self, hi)
            if a < 0 or b < a:
                raise ConfigurationError(f"need 0 <= {lo} <= {hi}, got {a}, {b}")
        if self.exposures_min < 1:
            raise ConfigurationError("every user needs at least one exposure")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigurationError("positive_rate must lie in (0, 1)")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if self.n_items < 2 or self.latent_dim < 1:
            raise ConfigurationError("n_items >= 2 and latent_dim >= 1 required")
        if self.window_len < 1 or self.window_start < 1:
            raise ConfigurationError("window_start and window_len must be positive")


@dataclass
class ModelConfig:
    d_model: int = 64
    blocks: int = 4
    target_layers: int = 3
    full_layers: int = 1
    heads: int = 4
    kv_heads: int = 2
    d_head: int | None = None
    d_emb: int = 16
    n_experts: int = 4
    d_expert: int | None = None
    attn_norm: str = "valid"
    norm_eps: float = 1e-6
    zero_init_output: bool = False

    @property
    def head_dim(self) -> int:
        return self.d_head if self.d_head is not None else self.d_model // self.heads

    @property
    def expert_dim(self) -> int:
        return self.d_expert if self.d_expert is not None else self.d_model

    @property
    def group_size(self) -> int:
        """Query heads per key/value head."""
        return self.heads // self.kv_heads

    @property
    def label(self) -> str:
        if self.full_layers == 0:
            return f"({self.target_layers}:0)x{self.blocks} lazy decoder"
        return f"({self.target_layers}:{self.full_layers})x{self.blocks}"

    def layer_kinds(self) -> list[str]:
        """Layer schedule: per block, target layers first then full layers."""
        return (["target"] * self.target_layers + ["full"] * self.full_layers) * self.blocks

    def validate(self) -> None:
        if min(self.d_model, self.blocks, self.heads, self.kv_heads, self.d_emb) < 1:
            raise ConfigurationError("d_model, blocks, heads, kv_heads, d_emb must be >= 1")
        if self.target_layers < 0 or self.full_layers < 0:
            raise ConfigurationError("layer counts must be >= 0")
        if self.target_layers + self.full_layers < 1:
            raise ConfigurationError("each block needs at least one layer")
        if self.heads % self.kv_heads:
            raise ConfigurationError(
                f"heads ({self.heads}) must be a multiple of kv_heads ({self.kv_heads})"
            )
        if self.d_head is None and self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads when d_head is unset")
        if self.head_dim < 1 or self.n_experts < 1 or self.expert_dim < 1:
            raise ConfigurationError("d_head, n_experts, d_expert must be >= 1")
        if self.attn_norm not in ATTN_NORMS:
            raise ConfigurationError(f"attn_norm must be one of {ATTN_NORMS}")


# Values reported for the production model; the desk defaults above scale them down.
REFERENCE_MODEL = ModelConfig(
    d_model=768, blocks=4, target_layers=3, full_layers=1, heads=3, kv_heads=1
)
REFERENCE_LR = 3e-4


@dataclass
class TrainConfig:
    lr: float = REFERENCE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    precision: str = "f32"
    clip_norm: float | None = 1.0
    # 0 means once per pass over the training users
    eval_every: int = 0
    holdout_fraction: float = 0.1
    threads: int = 1
    log_every: int = 100

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps >= 0 and batch_size >= 1 required")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in [0, 1)")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")


@dataclass
class BenchConfig:
    configs: list[str] = field(
        default_factory=lambda: ["(0:1)x4", "(1:1)x4", "(3:1)x4", "(5:1)x4", "(1:0)x4"]
    )
    sizes: list[list[int]] = field(default_factory=lambda: [[512, 16], [1024, 32]])
    kv_variants: list[str] = field(default_factory=lambda: ["G=H", "G=1"])
    repeats: int = 2
    precision: str = "f32"

    def validate(self) -> None:
        for label in self.configs:
            parse_layout(label)
        for size in self.sizes:
            if len(size) != 2 or size[0] < 1 or not 1 <= size[1] <= size[0]:
                raise ConfigurationError(f"bench size must be [N, L_T] with 1 <= L_T <= N: {size}")
        for kv in self.kv_variants:
            if kv not in ("G=H", "G=1"):
                raise ConfigurationError(f"unknown kv variant {kv!r}")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}")


_LAYOUT = re.compile(r"^\((\d+):(\d+)\)x(\d+)$")


def parse_layout(label: str) -> tuple[int, int, int]:
    """Parse a ``(K:P)xB`` label into (target_layers, full_layers, blocks)."""
    m = _LAYOUT.match(label.replace(" ", "").replace("×", "x"))
    if not m:
        raise ConfigurationError(f"layout must look like '(K:P)xB', got {label!r}")
    k, p, b = (int(g) for g in m.groups())
    if k + p < 1 or b < 1:
        raise ConfigurationError(f"empty layout {label!r}")
    return k, p, b


@dataclass
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.bench.validate()


def _build(cls, values: dict[str, Any], where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    return cls(**values)


def run_config_from_dict(raw: dict[str, Any]) -> RunConfig:
    sections = {"data": GeneratorConfig, "model": ModelConfig, "train": TrainConfig, "bench": BenchConfig}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a mapping")
    unknown = sorted(set(raw) - set(sections))
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = RunConfig(**{name: _build(cls, raw.get(name, {}), name) for name, cls in sections.items()})
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: cannot parse config: {exc}") from exc
    return run_config_from_dict(raw)


def load_generator_config(path: str | Path) -> GeneratorConfig:
    """Load a flat generator config (keys n_scenarios, n_users, seq_len_min, ...)."""
    with Path(path).open("r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    cfg = _build(GeneratorConfig, raw, "generator")
    cfg.validate()
    return cfg
