"""TOML run configuration covering both tracks and the model backends."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python 3.10
    import tomli

from .models import BackendSpec, load_scorer
from .pipeline import Track1Config, Track2Config, track1_roster, track2_roster
from .tta import AugmentConfig


@dataclass
class RunConfig:
    track1: Track1Config = field(default_factory=Track1Config)
    track2: Track2Config = field(default_factory=Track2Config)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backends: dict[str, BackendSpec] = field(default_factory=dict)
    segmenter: Optional[str] = None
    track1_classifiers: list[str] = field(default_factory=list)
    track2_classifiers: list[str] = field(default_factory=list)
    forest: Optional[str] = None
    workers: Optional[int] = None

    def scorer(self, name: str, kind: str):
        try:
            spec = self.backends[name]
        except KeyError:
            raise ValueError(f"no backend named {name!r} in the config") from None
        if spec.kind != kind:
            raise ValueError(f"backend {name!r} is a {spec.kind}, not a {kind}")
        return load_scorer(spec)

    def load_segmenter(self):
        if self.segmenter is None:
            raise ValueError("config has no track1.segmenter")
        return self.scorer(self.segmenter, "segmenter")

    def track1_roster(self):
        return track1_roster([self.scorer(n, "classifier") for n in self.track1_classifiers], self.track1)

    def track2_roster(self):
        return track2_roster([self.scorer(n, "classifier") for n in self.track2_classifiers], self.track2)


_T1_EXTRA = ("segmenter", "classifiers", "forest")
_T2_EXTRA = ("classifiers",)


def _build(cls, table: dict, where: str, extra=()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names - set(extra))
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {unknown}")
    kwargs = {}
    for k, v in table.items():
        if k in names:
            kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with ``value`` parsed as a TOML value (bare words as strings)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip(), value


def config_from_dict(d: dict, base_dir: Optional[Path] = None) -> RunConfig:
    base_dir = Path(base_dir) if base_dir else Path.cwd()
    unknown = sorted(set(d) - {"track1", "track2", "augment", "backends", "workers"})
    if unknown:
        raise ValueError(f"unknown top-level config keys: {unknown}")
    t1 = dict(d.get("track1", {}))
    t2 = dict(d.get("track2", {}))
    backends = {}
    for b in d.get("backends", []):
        b = dict(b)
        if b.get("path") is not None:
            b["path"] = str((base_dir / b["path"]).resolve())
        spec = BackendSpec(b.pop("name"), b.pop("kind"), b.pop("backend"), b.pop("path", None),
                           int(b.pop("input_size", 140)), dict(b.pop("options", {})))
        if b:
            raise ValueError(f"unknown keys in backend {spec.name!r}: {sorted(b)}")
        if spec.name in backends:
            raise ValueError(f"duplicate backend name {spec.name!r}")
        backends[spec.name] = spec
    forest = t1.get("forest")
    if forest is not None:
        forest = str((base_dir / forest).resolve())
    return RunConfig(
        track1=_build(Track1Config, t1, "track1", _T1_EXTRA),
        track2=_build(Track2Config, t2, "track2", _T2_EXTRA),
        augment=_build(AugmentConfig, dict(d.get("augment", {})), "augment"),
        backends=backends,
        segmenter=t1.get("segmenter"),
        track1_classifiers=list(t1.get("classifiers", [])),
        track2_classifiers=list(t2.get("classifiers", [])),
        forest=forest,
        workers=d.get("workers"),
    )


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            d = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise ValueError(f"{path}: invalid TOML ({e})") from None
    for text in overrides:
        _set_dotted(d, *parse_override(text))
    return config_from_dict(d, path.parent)
