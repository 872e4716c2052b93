"""Model and run configuration, plus the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .hte import EXPERT_NAMES


class ConfigError(ValueError):
    pass


# Ablation switch names accepted on the command line and in config files.
SWITCHES = {
    "w/o-hte": {"disable_hte": True},
    "w/o-hte-r": {"disable_routing": True},
    "w/o-routing": {"disable_routing": True},
    "w/o-sam": {"disable_sam": True},
    "w/o-prompt": {"static_prompt": True},
    "w/o-llm": {"disable_llm": True},
    "w/o-linear": {"experts": ("CNN", "LSTM")},
    "w/o-cnn": {"experts": ("Linear", "LSTM")},
    "w/o-lstm": {"experts": ("Linear", "CNN")},
    "k=1": {"k": 1},
    "k=2": {"k": 2},
    "k=3": {"k": 3},
}


@dataclass(frozen=True)
class ModelConfig:
    L: int = 672
    S: int = 96
    period: int = 24
    d: int = 64
    k: int = 2
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 256
    backbone_init_std: float = 0.02
    alpha: float = 0.06
    beta: float = 0.06
    tau: float = 0.07
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 32
    max_steps: int = 0  # 0 = no cap
    seed: int = 42
    experts: tuple[str, ...] = EXPERT_NAMES
    disable_hte: bool = False
    disable_routing: bool = False
    disable_sam: bool = False
    static_prompt: bool = False
    disable_llm: bool = False
    train_noise: bool = True
    eval_noise: bool = False

    def __post_init__(self):
        if self.L % self.S:
            raise ConfigError(f"lookback {self.L} not divisible by patch length {self.S}")
        if self.L // self.S + 1 > self.max_positions:
            raise ConfigError("lookback has more patches than backbone positions")
        if not 1 <= self.k <= len(EXPERT_NAMES):
            raise ConfigError(f"k={self.k} out of range")
        if set(self.experts) - set(EXPERT_NAMES) or not self.experts:
            raise ConfigError(f"bad expert subset {self.experts}")
        object.__setattr__(self, "experts", tuple(n for n in EXPERT_NAMES if n in self.experts))

    @property
    def N(self) -> int:
        return self.L // self.S

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.disable_sam else self.beta

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_switches(self, switches) -> "ModelConfig":
        changes = {}
        for s in switches:
            if s not in SWITCHES:
                raise ConfigError(f"unknown switch {s!r}", {"switch": s})
            changes.update(SWITCHES[s])
        return self.replace(**changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["experts"] = list(self.experts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "experts" in kwargs:
            kwargs["experts"] = tuple(kwargs["experts"])
        return cls(**kwargs)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    csv: str | None = None
    date_column: str | None = "date"
    value_columns: list[str] | None = None
    synth: str | None = None  # path to a synthetic-corpus spec
    split_counts: tuple[int, int, int] | None = None
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    train_stride: int = 1
    horizons: tuple[int, ...] = (96, 192, 336, 720)
    switches: tuple[str, ...] = ()
    out: str = "runs/default"
    threads: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d


# ----------------------------------------------------------------- key=value format


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; '#' starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, target):
    if isinstance(target, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return value


_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_ALIASES = {
    "window.L": "L",
    "window.S": "S",
    "window.period": "period",
    "model.d": "d",
    "model.layers": "n_layers",
    "model.heads": "n_heads",
    "model.max_positions": "max_positions",
    "model.init_std": "backbone_init_std",
    "moe.k": "k",
    "moe.experts": "experts",
    "loss.alpha": "alpha",
    "loss.beta": "beta",
    "loss.tau": "tau",
    "optim.lr": "lr",
    "optim.epochs": "epochs",
    "optim.batch": "batch",
    "optim.max_steps": "max_steps",
    "seed": "seed",
    "noise.train": "train_noise",
    "noise.eval": "eval_noise",
}


def run_config_from_kv(kv: dict[str, str], base_dir: Path | None = None) -> RunConfig:
    defaults = ModelConfig()
    model_kwargs = {}
    run = RunConfig()
    for key, value in kv.items():
        try:
            if key in _ALIASES:
                name = _ALIASES[key]
                model_kwargs[name] = _coerce(value, getattr(defaults, name))
            elif key.startswith("ablation.") and key[len("ablation.") :] in _MODEL_KEYS:
                name = key[len("ablation.") :]
                model_kwargs[name] = _coerce(value, getattr(defaults, name))
            elif key == "ablation.switches":
                run.switches = _coerce(value, ())
            elif key == "data.csv":
                run.csv = value
            elif key == "data.date_column":
                run.date_column = value or None
            elif key == "data.value_columns":
                run.value_columns = list(_coerce(value, ()))
            elif key == "data.synth":
                run.synth = value
            elif key == "split.counts":
                run.split_counts = tuple(int(v) for v in _coerce(value, ()))
            elif key == "split.fractions":
                run.split_fractions = tuple(float(v) for v in _coerce(value, ()))
            elif key == "window.H" or key == "eval.horizons":
                run.horizons = tuple(int(v) for v in _coerce(value, ()))
            elif key == "train.stride":
                run.train_stride = int(value)
            elif key == "out.dir":
                run.out = value
            elif key == "threads":
                run.threads = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    for path_attr in ("csv", "synth"):
        p = getattr(run, path_attr)
        if p and base_dir is not None and not Path(p).is_absolute():
            setattr(run, path_attr, str(base_dir / p))
    model = ModelConfig(**model_kwargs)
    if run.switches:
        model = model.with_switches(run.switches)
    run.model = model
    return run


def load_run_config(path: str | Path) -> RunConfig:
    """Relative data paths stay relative to the working directory."""
    path = Path(path)
    return run_config_from_kv(parse_kv(path.read_text(encoding="utf-8")))


# -------------------------------------------------------------------- synthetic spec


def synth_spec_from_kv(kv: dict[str, str]):
    """``length``, ``channels``, ``seed``, ``regimes`` (comma list), ``block`` and
    ``<regime>.<param>`` overrides, e.g. ``sinusoid.period=24``. Returns (SynthSpec, seed)."""
    from .series import REGIMES, RegimeSpec, SynthSpec

    kv = dict(kv)
    try:
        length = int(kv.pop("length", "2000"))
        channels = int(kv.pop("channels", "1"))
        seed = int(kv.pop("seed", "42"))
        block = int(kv.pop("block", "96"))
        names = [n.strip() for n in kv.pop("regimes", ",".join(REGIMES[:3])).split(",") if n.strip()]
        params: dict[str, dict] = {n: {} for n in names}
        blocks = {n: block for n in names}
        for key, value in kv.items():
            regime, _, param = key.partition(".")
            if regime not in params or not param:
                raise ConfigError(f"unknown synth key {key!r}")
            if param == "block":
                blocks[regime] = int(value)
            else:
                params[regime][param] = float(value)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad synth spec value: {exc}") from exc
    unknown = [n for n in names if n not in REGIMES]
    if unknown:
        raise ConfigError(f"unknown regime {unknown[0]!r}")
    spec = SynthSpec([RegimeSpec(n, blocks[n], params[n]) for n in names], length, channels)
    return spec, seed


def load_synth_spec(path: str | Path):
    return synth_spec_from_kv(parse_kv(Path(path).read_text(encoding="utf-8")))
