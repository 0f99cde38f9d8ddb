"""Flat ``section.key = value`` run configuration.

Example::

    # comments start with '#'
    seed = 7
    profile = desk
    gan.rho = 0.1
    sweep.mu_grid = 0.2, 0.6, 1.0

Every key must name a field of one of the section dataclasses; unknown keys
are rejected. Component seeds derive from the root seed through named
sub-streams unless a section sets its own ``seed``.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .embedding import EmbeddingConfig
from .gan import GanConfig
from .predictor import Mode, SslConfig, TrainConfig
from .rng import child_seed
from .synth import CohortSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    top_k_freq: int = 100
    top_k_cooc: int = 20
    n_per_source: int = 1


@dataclass(frozen=True)
class SweepConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    rho_grid: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1, 0.2, 1.0)
    mu_grid: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4)
    mu: float = 0.6
    rho: float = 0.1
    kind: str = "rho"  # rho | mu | modes

    def __post_init__(self):
        if self.kind not in ("rho", "mu", "modes"):
            raise ConfigError(f"sweep.kind must be rho, mu or modes, got {self.kind!r}")


SECTIONS = {
    "cohort": CohortSpec,
    "embedding": EmbeddingConfig,
    "gan": GanConfig,
    "ssl": SslConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}
SEEDED = ("cohort", "embedding", "gan", "ssl")

# Reduced sizes for single-core runs. The model structure is unchanged;
# only widths, batch size and iteration counts shrink.
PROFILES = {
    "full": {},
    "desk": {
        "embedding.dim": "64",
        "gan.maps": "32",
        "gan.enc_maps": "64",
        "gan.dec_maps": "64",
        "gan.batch_size": "16",
        "gan.max_iterations": "300",
        "train.maps": "32",
        "train.max_epochs": "30",
        "ssl.snap": "false",
    },
}


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, enum.Enum):
            return type(like)(text.upper())
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


def _parse_value(text: str, default, key: str):
    if default is None and key.endswith(".clusters"):
        if text.strip().lower() == "none":
            return None
        groups = [g for g in text.split(";") if g.strip()]
        return tuple(tuple(int(c) for c in g.split(",") if c.strip()) for g in groups)
    if isinstance(default, tuple):
        like = default[0] if default else 0.0
        return tuple(_parse_scalar(part, like, key) for part in text.split(",") if part.strip())
    return _parse_scalar(text, default, key)


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _jsonable(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "full"
    sections: dict = field(default_factory=dict)
    explicit_seeds: frozenset = frozenset()

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @classmethod
    def from_mapping(cls, values: dict[str, str], seed: int | None = None) -> "RunConfig":
        values = dict(values)
        profile = values.pop("profile", "full")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        root = _parse_scalar(values.pop("seed", "0"), 0, "seed")
        if seed is not None:
            root = seed
        merged = {**PROFILES[profile], **values}
        per_section: dict[str, dict] = {name: {} for name in SECTIONS}
        for key, text in merged.items():
            if "." not in key:
                raise ConfigError(f"unknown key {key!r} (expected 'section.field')")
            sec, fname = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section {sec!r} in key {key!r}; sections: {sorted(SECTIONS)}")
            fields = {f.name: f for f in dataclasses.fields(SECTIONS[sec])}
            if fname not in fields:
                raise ConfigError(f"unknown key {key!r}; {sec} accepts {sorted(fields)}")
            default = SECTIONS[sec]().__getattribute__(fname)
            per_section[sec][fname] = _parse_value(text, default, key)
        explicit = frozenset(s for s in SEEDED if "seed" in per_section[s])
        for s in SEEDED:
            per_section[s].setdefault("seed", child_seed(root, s))
        try:
            built = {name: SECTIONS[name](**kw) for name, kw in per_section.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(root, profile, built, explicit)

    @classmethod
    def load(cls, path=None, seed: int | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values: dict[str, str] = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            values = parse_lines(p.read_text().splitlines(), str(p))
        values.update(overrides or {})
        return cls.from_mapping(values, seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same settings with component seeds re-derived from a new root."""
        values = {k: v for k, v in self.flat().items() if k.split(".")[-1] != "seed" or
                  k.split(".")[0] in self.explicit_seeds}
        values.pop("seed", None)
        values.pop("profile", None)
        out = RunConfig.from_mapping({"profile": "full", **values}, seed)
        out.profile = self.profile
        return out

    def flat(self) -> dict[str, str]:
        out = {"seed": str(self.seed), "profile": self.profile}
        for name, obj in self.sections.items():
            for f in dataclasses.fields(obj):
                v = _jsonable(getattr(obj, f.name))
                if isinstance(v, list):
                    if v and isinstance(v[0], list):
                        v = ";".join(",".join(str(c) for c in g) for g in v)
                    else:
                        v = ", ".join(str(x) for x in v)
                out[f"{name}.{f.name}"] = "none" if v is None else str(v)
        return out

    def echo(self) -> str:
        """Resolved configuration (defaults included) in the input format."""
        return "\n".join(f"{k} = {v}" for k, v in self.flat().items()) + "\n"

    def section_hash(self, *names: str) -> str:
        blob = {n: {f.name: _jsonable(getattr(self.sections[n], f.name))
                    for f in dataclasses.fields(self.sections[n])} for n in names}
        blob["seed"] = self.seed
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
