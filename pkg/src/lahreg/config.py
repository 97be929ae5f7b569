"""Versioned JSON run configuration.

A run configuration bundles the hashing, network, training, scene,
RANSAC and metric settings together with file paths and the root seed.
Parsing is strict: unknown fields are rejected and every problem found in
a file is reported in one :class:`ConfigError`.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from lahreg.hashwin import HashConfig
from lahreg.net import NetworkConfig, TrainConfig, derive_seed
from lahreg.reg import MetricThresholds
from lahreg.scenes import SceneConfig
from lahreg.validation import check_positive_int, check_seed

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 50000
    inlier_threshold: float = 0.05
    min_inliers: int = 5
    sample_count: int = 5000
    mutual: bool = False

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations")
        check_positive_int(self.min_inliers, "min_inliers", minimum=3)
        check_positive_int(self.sample_count, "sample_count")
        if isinstance(self.inlier_threshold, bool) or not isinstance(self.inlier_threshold, (int, float)):
            raise ValueError(f"inlier_threshold must be a number, got {self.inlier_threshold!r}")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not isinstance(self.mutual, bool):
            raise ValueError(f"mutual must be true or false, got {self.mutual!r}")


@dataclass(frozen=True)
class PathsConfig:
    """Files a run reads or writes. ``None`` means not used."""

    manifest: str | None = None
    checkpoint: str | None = None
    log_csv: str | None = None
    output: str | None = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and not isinstance(value, str):
                raise ValueError(f"{f.name} must be a path string or null, got {value!r}")


SECTIONS = {
    "hash": HashConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "scene": SceneConfig,
    "ransac": RansacConfig,
    "thresholds": MetricThresholds,
    "paths": PathsConfig,
}
SEEDED_SECTIONS = ("hash", "network", "train", "scene")


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a run.

    Sections that carry their own seed get one derived from ``seed`` when
    the file leaves it out, so a parsed config always has explicit seeds.
    """

    seed: int = 0
    hash: HashConfig = field(default_factory=HashConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)
    paths: PathsConfig = field(default_factory=PathsConfig)
    version: int = CONFIG_VERSION

    def to_dict(self):
        out = {"version": self.version, "seed": self.seed}
        for name in SECTIONS:
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(getattr(self, name)).items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _type_problem(default, value):
    """Describe a JSON type mismatch against a field's default, or None."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "true or false"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = _is_number(value)
        want = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(_is_number(v) for v in value)
        want = "a list of numbers"
    else:
        return None
    return None if ok else f"must be {want}, got {value!r}"


def _section(name, cls, raw, root_seed, errors):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{name}: must be an object, got {type(raw).__name__}")
        return None
    known = {f.name for f in fields(cls)}
    bad = False
    for key in sorted(set(raw) - known):
        errors.append(f"{name}.{key}: unknown field")
        bad = True
    kwargs = {k: v for k, v in raw.items() if k in known}
    if name in SEEDED_SECTIONS and "seed" not in kwargs and isinstance(root_seed, int):
        kwargs["seed"] = derive_seed(root_seed, 100 + SEEDED_SECTIONS.index(name))
    defaults = cls() if name != "paths" else None
    for key, value in kwargs.items():
        problem = _type_problem(getattr(defaults, key, None), value)
        if problem is None:
            # Range checks of a single field; messages that do not name the
            # field come from cross-field rules and are left to the full build.
            try:
                cls(**{key: value})
            except (TypeError, ValueError) as exc:
                if key in str(exc):
                    problem = str(exc)
        if problem is not None:
            errors.append(f"{name}.{key}: {problem}")
            bad = True
    if bad:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return None


def _check_paths(paths, errors):
    for f in fields(paths):
        value = getattr(paths, f.name)
        if value is None:
            continue
        p = Path(value).resolve()
        anchor = p if p.exists() else next((a for a in p.parents if a.exists()), None)
        if anchor is None or (anchor != p and not (anchor.is_dir() and os.access(anchor, os.W_OK))):
            errors.append(f"paths.{f.name}: {value!r} does not exist and cannot be created")


def parse_config(raw, check_paths=True):
    """Build a :class:`RunConfig` from a decoded JSON document.

    Raises
    ------
    ConfigError
        Listing every unknown field, wrong type and out-of-range value.
    """
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError([f"top level must be an object, got {type(raw).__name__}"])
    known = {"version", "seed", *SECTIONS}
    for key in sorted(set(raw) - known):
        errors.append(f"{key}: unknown field")
    version = raw.get("version")
    if version is None:
        errors.append("version: missing (expected 1)")
    elif version != CONFIG_VERSION:
        errors.append(f"version: unsupported value {version!r} (expected {CONFIG_VERSION})")
    seed = raw.get("seed", 0)
    try:
        seed = check_seed(seed)
    except ValueError as exc:
        errors.append(f"seed: {exc}")
        seed = None
    built = {name: _section(name, cls, raw.get(name), seed, errors) for name, cls in SECTIONS.items()}
    if check_paths and built["paths"] is not None:
        _check_paths(built["paths"], errors)
    if errors:
        raise ConfigError(errors)
    return RunConfig(seed=seed, version=version, **built)


def load_config(path, overrides=None, check_paths=True):
    """Read a JSON config file, apply dotted ``overrides`` and parse it.

    ``overrides`` maps keys such as ``"train.steps"`` or ``"seed"`` to
    values; they replace file values before validation.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return parse_config(apply_overrides(raw, overrides or {}), check_paths=check_paths)


def apply_overrides(raw, overrides):
    """Return a copy of ``raw`` with dotted-key overrides applied."""
    out = json.loads(json.dumps(raw))
    for key, value in overrides.items():
        node = out
        *head, leaf = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{key}: cannot override inside a non-object"])
        node[leaf] = value
    return out


def default_config(**sections):
    """A default :class:`RunConfig` with explicit seeds and optional section overrides."""
    cfg = parse_config({"version": CONFIG_VERSION, "seed": 0}, check_paths=False)
    return replace(cfg, **sections)
