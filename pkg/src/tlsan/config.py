"""Flat ``key = value`` run configuration shared by every subcommand."""

from dataclasses import asdict, dataclass, field, fields

from .evaluate import DEFAULT_KS
from .synth import SynthSpec
from .train import TrainConfig

PATH_KEYS = ("reviews", "meta", "dataset", "checkpoint", "metrics", "report")
TRAIN_KEYS = tuple(TrainConfig.field_names())
SYNTH_KEYS = {f"synth_{f.name}": f.name for f in fields(SynthSpec)}


class ConfigError(ValueError):
    pass


def _synth_default(name):
    return getattr(SynthSpec(), name)


@dataclass
class Config:
    # paths
    reviews: str = ""
    meta: str = ""
    dataset: str = ""
    checkpoint: str = ""
    metrics: str = ""
    report: str = ""
    # dataset construction and evaluation
    data_seed: int = 0
    eval_ks: tuple = DEFAULT_KS
    eval_seed: int = 0
    # training
    d_f: int = TrainConfig.d_f
    heads: int = TrainConfig.heads
    max_long: int = TrainConfig.max_long
    batch_size: int = TrainConfig.batch_size
    l2: float = TrainConfig.l2
    epochs: int = TrainConfig.epochs
    seed: int = TrainConfig.seed
    lr_initial: float = TrainConfig.lr_initial
    lr_drop_fraction: float = TrainConfig.lr_drop_fraction
    lr_after: float = TrainConfig.lr_after
    negatives_per_positive: int = TrainConfig.negatives_per_positive
    loss_reduction: str = TrainConfig.loss_reduction
    eval_every: int = TrainConfig.eval_every
    eval_k: int = TrainConfig.eval_k
    no_short: bool = False
    fixed_gamma: bool = False
    fixed_position: bool = False
    # synthetic generator
    synth_n_users: int = field(default_factory=lambda: _synth_default("n_users"))
    synth_n_items: int = field(default_factory=lambda: _synth_default("n_items"))
    synth_n_categories: int = field(default_factory=lambda: _synth_default("n_categories"))
    synth_days: int = field(default_factory=lambda: _synth_default("days"))
    synth_long_affinity_strength: float = field(default_factory=lambda: _synth_default("long_affinity_strength"))
    synth_recent_drift_probability: float = field(
        default_factory=lambda: _synth_default("recent_drift_probability"))
    synth_seed: int = field(default_factory=lambda: _synth_default("seed"))

    def validate(self):
        self.train_config()
        self.synth_spec().validate()
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be a non-empty list of positive integers")
        return self

    def train_config(self):
        try:
            return TrainConfig(**{k: getattr(self, k) for k in TRAIN_KEYS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth_spec(self):
        return SynthSpec(**{name: getattr(self, key) for key, name in SYNTH_KEYS.items()})

    def to_text(self):
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: type(getattr(Config(), f.name)) for f in fields(Config)}


def coerce(key, raw):
    """Convert the text ``raw`` to the type of ``Config.<key>``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text):
    """Parse config text into a ``{key: value}`` dict; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def resolve(file_values=None, overrides=None):
    """Defaults, then file values, then command-line overrides (``None`` = unset)."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    return Config(**values).validate()
