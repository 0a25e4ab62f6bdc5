"""Experiment configuration files.

A config is an INI-style file with one section per concern::

    [experiment]
    algorithm = fedbat
    rounds = 100

    [training]
    lr = 0.1

Every key has a declared type in the dataclasses below; unknown sections or
keys are rejected. :func:`dump_config` writes the fully resolved config
(defaults included), and loading that text reproduces the same config.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

from .codecs import CODEC_NAMES

# local-training and sampling defaults used in the FedBAT experiments
DEFAULT_RHO = 6.0
DEFAULT_PHI = 0.5
DEFAULT_LR = 0.1
DEFAULT_BATCH_SIZE = 64
DEFAULT_CLIENTS_PER_ROUND = 10

METRICS_SCHEMA_VERSION = 1

REQUIRED = object()


class ConfigValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentSection:
    algorithm: str = REQUIRED  # type: ignore[assignment]
    rounds: int = REQUIRED  # type: ignore[assignment]
    seed: int = 0
    eval_every: int = 1
    workers: int = 1
    output_dir: str = "runs/default"
    record_wall_time: bool = False
    dump_messages: bool = False


@dataclass
class DataSection:
    source: str = "blobs"
    n: int = 5000
    n_test: int = 1000
    dim: int = 32
    classes: int = 10
    spread: float = 1.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class PartitionSection:
    scheme: str = "iid"
    n_clients: int = 30
    beta: float = 0.3
    labels_per_client: int = 3


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [64])


@dataclass
class TrainingSection:
    clients_per_round: int = DEFAULT_CLIENTS_PER_ROUND
    tau: Optional[int] = None
    local_epochs: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    phi: float = DEFAULT_PHI
    rho: float = DEFAULT_RHO


@dataclass
class CodecSection:
    alpha: Optional[float] = None
    sigma: Optional[float] = None


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection
    data: DataSection = field(default_factory=DataSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    codec: CodecSection = field(default_factory=CodecSection)

    def codec_kind(self):
        from .codecs import CodecKind

        base = CodecKind.default(self.experiment.algorithm)
        return dataclasses.replace(
            base,
            alpha=self.codec.alpha if self.codec.alpha is not None else base.alpha,
            sigma=self.codec.sigma if self.codec.sigma is not None else base.sigma,
        )


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_SECTION_TYPES = get_type_hints(ExperimentConfig)


def _parse_value(text: str, typ, name: str):
    text = text.strip()
    if get_origin(typ) is Optional or (get_origin(typ) is not None and type(None) in get_args(typ)):
        if text == "" or text.lower() == "none":
            return None
        typ = next(a for a in get_args(typ) if a is not type(None))
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if get_origin(typ) is list:
            return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ConfigValidationError(name, f"cannot parse {text!r}: {exc}") from None
    raise TypeError(f"unsupported config type {typ}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigValidationError("<file>", str(exc).splitlines()[0]) from None
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for key, value in (overrides or {}).items():
        if "." not in key:
            raise ConfigValidationError(key, "override keys look like section.key")
        sec, opt = key.split(".", 1)
        raw.setdefault(sec, {})[opt] = value

    sections = {}
    for sec, values in raw.items():
        if sec not in SECTIONS:
            raise ConfigValidationError(sec, "unknown section")
    for sec_name in SECTIONS:
        cls = _SECTION_TYPES[sec_name]
        hints = get_type_hints(cls)
        values = raw.get(sec_name, {})
        kwargs = {}
        for key in values:
            if key not in hints:
                raise ConfigValidationError(f"{sec_name}.{key}", "unknown key")
        for f in dataclasses.fields(cls):
            name = f"{sec_name}.{f.name}"
            if f.name in values:
                kwargs[f.name] = _parse_value(values[f.name], hints[f.name], name)
            elif f.default is REQUIRED:
                raise ConfigValidationError(name, "missing required field")
        sections[sec_name] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    validate(cfg)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"# resolved config, metrics schema v{METRICS_SCHEMA_VERSION}"]
    for sec_name in SECTIONS:
        section = getattr(cfg, sec_name)
        lines.append(f"[{sec_name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}".rstrip())
        lines.append("")
    return "\n".join(lines)


def validate(cfg: ExperimentConfig) -> None:
    e, d, p, t = cfg.experiment, cfg.data, cfg.partition, cfg.training

    def check(ok: bool, name: str, msg: str):
        if not ok:
            raise ConfigValidationError(name, msg)

    check(e.algorithm in CODEC_NAMES, "experiment.algorithm", f"must be one of {', '.join(CODEC_NAMES)}")
    check(e.rounds >= 0, "experiment.rounds", "must be nonnegative")
    check(0 <= e.seed < 2**64, "experiment.seed", "must be an unsigned 64-bit integer")
    check(e.eval_every >= 1, "experiment.eval_every", "must be at least 1")
    check(e.workers >= 1, "experiment.workers", "must be at least 1")
    check(d.source in ("blobs", "idx"), "data.source", "must be blobs or idx")
    if d.source == "blobs":
        check(d.n >= 1, "data.n", "must be positive")
        check(d.n_test >= 1, "data.n_test", "must be positive")
        check(d.dim >= 1, "data.dim", "must be positive")
        check(d.classes >= 2, "data.classes", "need at least two classes")
        check(d.spread >= 0, "data.spread", "must be nonnegative")
    else:
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            check(bool(getattr(d, name)), f"data.{name}", "required when source = idx")
    check(p.scheme in ("iid", "dirichlet", "label-shard"), "partition.scheme", "must be iid, dirichlet or label-shard")
    check(p.n_clients >= 1, "partition.n_clients", "must be positive")
    check(p.beta > 0, "partition.beta", "must be positive")
    check(p.labels_per_client >= 1, "partition.labels_per_client", "must be positive")
    if p.scheme == "label-shard" and d.source == "blobs":
        check(p.labels_per_client <= d.classes, "partition.labels_per_client", "exceeds the number of classes")
    check(all(h >= 1 for h in cfg.model.hidden), "model.hidden", "layer widths must be positive")
    check(1 <= t.clients_per_round <= p.n_clients, "training.clients_per_round", "must lie in [1, n_clients]")
    check(t.tau is None or t.tau >= 1, "training.tau", "must be at least 1")
    check(t.local_epochs >= 1, "training.local_epochs", "must be at least 1")
    check(t.batch_size >= 1, "training.batch_size", "must be positive")
    check(t.lr > 0, "training.lr", "must be positive")
    check(0 <= t.phi <= 1, "training.phi", "must lie in [0, 1]")
    check(t.rho >= 0, "training.rho", "must be nonnegative")
    if e.algorithm == "fedbat":
        check(t.phi < 1, "training.phi", "fedbat needs phi < 1 so at least one binarization-aware step runs")
    try:
        cfg.codec_kind()
    except ValueError as exc:
        raise ConfigValidationError("codec", str(exc)) from None
