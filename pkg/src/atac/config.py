"""Run configuration: nested dataclasses with a JSON file form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from . import augment
from .attacks import AdaptiveConfig, PgdConfig
from .baselines import TtcParams
from .data import TaskConfig
from .defense import AtacParams
from .encoders import EncoderParams, init_encoder

DEFENSES = ("none", "atac", "tte", "ttc")
ATTACKS = (
    "none",
    "pgd",
    "pgd-large",
    "pgd-early",
    "pgd-unsup",
    "pgd-targeted",
    "adaptive-atac-lure",
    "adaptive-atac-avoid",
    "adaptive-ttc-lure",
    "adaptive-ttc-avoid",
)
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "mlp1"
    dim: int = 64
    hidden: int = 256
    gain: float = 2.0
    seed: int = 0
    band: tuple[float, float] | None = (1.75, 0.0)  # Gaussian smoothing of first-layer rows
    bias_scale: float = 0.1

    def build(self, geometry) -> EncoderParams:
        return init_encoder(
            self.architecture, geometry, self.dim, self.hidden, self.seed, self.gain,
            bias_scale=self.bias_scale, band=self.band,
        )


@dataclass(frozen=True)
class AtacConfig:
    tau_star: float = 0.85
    alpha: float = 7.0
    suite: str = "default"
    direction: str = "toward_views"

    def params(self) -> AtacParams:
        return AtacParams(self.tau_star, self.alpha, augment.suite(self.suite), self.direction)


@dataclass(frozen=True)
class AdaptiveSettings:
    gate_temp: float = 40.0
    lam: float = 1.0
    eot_samples: int = 1

    def config(self, base: PgdConfig, strategy: str) -> AdaptiveConfig:
        return AdaptiveConfig(base, self.gate_temp, self.lam, strategy, self.eot_samples)


ADAPTIVE_TTC = TtcParams(epsilon_ttc=2 / 255, eta=1 / 255, epsilon_tau=2 / 255, tau_thresh=0.2)


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    temperature: float = 0.01
    atac: AtacConfig = field(default_factory=AtacConfig)
    ttc: TtcParams = field(default_factory=TtcParams)
    tte_suite: str = "tte9"
    pgd: PgdConfig = field(default_factory=PgdConfig)
    adaptive: AdaptiveSettings = field(default_factory=AdaptiveSettings)
    adaptive_ttc: TtcParams = ADAPTIVE_TTC
    defense: str = "atac"
    attack: str = "pgd"
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known) - {"format_version"}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "format_version":
            continue
        default = getattr(cls(), name)
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def override(cfg, dotted: str, value):
    """Return a copy of ``cfg`` with ``a.b.c`` set to ``value``."""
    head, _, rest = dotted.partition(".")
    if not hasattr(cfg, head):
        raise ValueError(f"unknown config key {dotted!r}")
    if rest:
        return replace(cfg, **{head: override(getattr(cfg, head), rest, value)})
    return replace(cfg, **{head: value})
