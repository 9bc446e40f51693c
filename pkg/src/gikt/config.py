"""Run configuration: validated training knobs plus flat key=value file IO.

The on-disk format is one ``key=value`` per line, no nesting, so configs
stay diff-friendly and parseable without extra dependencies. Unknown keys
are rejected. Every command writes its fully-resolved config next to its
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

RECAP_MODES = ("hard_exercise", "soft_exercise", "hard_state", "soft_state")
RECAP_SCORES = ("cosine", "dot")
LOSS_REDUCTIONS = ("mean", "sum")

#: Closed set of experiment variants plus "custom" for ad-hoc configs.
VARIANTS = (
    "GIKT",
    "GIKT-RHS",
    "GIKT-RH",
    "GIKT-RS",
    "GIKT-RA",
    "GIKT-HE",
    "GIKT-SE",
    "GIKT-HS",
    "GIKT-SS",
    "custom",
)


@dataclass
class TrainConfig:
    embed_dim: int = 100
    lstm_sizes: tuple[int, int] = (200, 100)
    gcn_layers: int = 3
    n_q: int = 4
    n_s: int = 4
    recap_mode: str = "soft_state"
    recap_k: int = 5
    recap_v: float = 0.0
    recap_score: str = "cosine"
    recap_on_raw_embeddings: bool = False
    skills_in_interaction: int = 4
    uniform_attention: bool = False
    batch_size: int = 32
    learning_rate: float = 0.001
    keep_prob: float = 0.8
    epochs: int = 40
    patience: int = 5
    seed: int = 1
    inference_runs: int = 1
    max_len: int = 200
    split_ratio: float = 0.8
    loss_reduction: str = "mean"
    grad_clip: float = 0.0
    eq1_literal: bool = False
    per_type_weights: bool = False

    def validate(self) -> "TrainConfig":
        checks = [
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (len(self.lstm_sizes) == 2 and all(h >= 1 for h in self.lstm_sizes),
             "lstm_sizes must be two positive sizes"),
            (self.lstm_sizes[1] == self.embed_dim,
             f"second LSTM size must equal embed_dim so states can interact with "
             f"question vectors; got {self.lstm_sizes[1]} vs {self.embed_dim}"),
            (0 <= self.gcn_layers <= 3, "gcn_layers must be in 0..3"),
            (self.n_q >= 1 and self.n_s >= 1, "n_q and n_s must be >= 1"),
            (self.recap_mode in RECAP_MODES, f"recap_mode must be one of {RECAP_MODES}"),
            (self.recap_k >= 0, "recap_k must be >= 0"),
            (-1.0 <= self.recap_v <= 1.0, "recap_v must be in [-1, 1]"),
            (self.recap_score in RECAP_SCORES, f"recap_score must be one of {RECAP_SCORES}"),
            (self.skills_in_interaction >= 0, "skills_in_interaction must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate >= 0.0, "learning_rate must be >= 0"),
            (0.0 < self.keep_prob <= 1.0, "keep_prob must be in (0, 1]"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.inference_runs >= 1, "inference_runs must be >= 1"),
            (self.max_len >= 2, "max_len must be >= 2"),
            (0.0 < self.split_ratio < 1.0, "split_ratio must be in (0, 1)"),
            (self.loss_reduction in LOSS_REDUCTIONS,
             f"loss_reduction must be one of {LOSS_REDUCTIONS}"),
            (self.grad_clip >= 0.0, "grad_clip must be >= 0 (0 disables clipping)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = dict(values)
        if "lstm_sizes" in kwargs:
            kwargs["lstm_sizes"] = tuple(kwargs["lstm_sizes"])
        return cls(**kwargs).validate()


def _parse_value(name: str, text: str, target_type) -> object:
    text = text.strip()
    if target_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    # tuple of ints, e.g. lstm_sizes=200,100
    return tuple(int(p) for p in text.split(",") if p.strip())


_FIELD_TYPES = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def parse_config_text(lines, source: str = "<config>") -> dict:
    """Parse key=value lines into typed config values; unknown keys rejected."""
    values: dict = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {line!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{line_no}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, text, _FIELD_TYPES[key])
        except ValueError:
            raise ConfigError(f"{source}:{line_no}: bad value for {key}: {text.strip()!r}") from None
    return values


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    with open(path, encoding="utf8") as fh:
        values = parse_config_text(fh, source=path)
    if overrides:
        values.update(overrides)
    return TrainConfig.from_dict(values)


def save_config(config: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf8") as fh:
        for f in fields(config):
            value = getattr(config, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Config overrides for one named experiment variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid names: {', '.join(VARIANTS)}")
    overrides: dict = {
        "GIKT": {},
        "custom": {},
        "GIKT-RHS": {"recap_k": 0, "skills_in_interaction": 0},
        "GIKT-RH": {"recap_k": 0},
        "GIKT-RS": {"skills_in_interaction": 0},
        "GIKT-RA": {"uniform_attention": True},
        "GIKT-HE": {"recap_mode": "hard_exercise"},
        "GIKT-SE": {"recap_mode": "soft_exercise"},
        "GIKT-HS": {"recap_mode": "hard_state"},
        "GIKT-SS": {"recap_mode": "soft_state"},
    }[variant]
    return replace(config, **overrides).validate()


def normalize_variant_name(name: str) -> str:
    """Accept both 'RH' and 'GIKT-RH' spellings."""
    name = name.strip()
    if name in VARIANTS:
        return name
    prefixed = f"GIKT-{name.upper()}"
    if prefixed in VARIANTS:
        return prefixed
    raise ConfigError(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
