"""Experiment configuration: typed sections read from and written to INI text.

Every section maps onto a frozen dataclass. Unknown sections or keys are
rejected, and every value error names the file line and key it came from.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import baselines
from .abl import AblConfig
from .attacks import PoisonSpec, Sinusoid, blend_from_seed, bottom_right_grid
from .data import SyntheticSpec
from .errors import ConfigError, PathError

# Poisoning above this rate needs ``allow_high_rate``; above the hard cap it is refused.
DEFAULT_RATE_CAP = 0.5
HARD_RATE_CAP = 0.7


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"  # "synthetic" | "idx"
    class_count: int = 10
    height: int = 16
    width: int = 16
    channels: int = 1
    contrast: float = 0.25
    noise: float = 0.15
    train_size: int = 5000
    test_size: int = 1000
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.class_count, self.height, self.width, self.channels, self.contrast,
                             self.noise, self.train_size, self.test_size, seed)

    def idx_paths(self) -> tuple[str, str, str, str]:
        return self.train_images, self.train_labels, self.test_images, self.test_labels

    def validate(self) -> None:
        if self.source == "synthetic":
            if any(self.idx_paths()):
                raise ConfigError("dataset: IDX paths given but source is synthetic")
            self.synthetic_spec(0).validate()
        elif self.source == "idx":
            if not all(self.idx_paths()):
                raise ConfigError("dataset: source idx needs train_images, train_labels, test_images, test_labels")
            if self.class_count < 2:
                raise ConfigError("class_count must be at least 2")
        else:
            raise ConfigError(f"dataset: unknown source {self.source!r}")


@dataclass(frozen=True)
class PoisonSection:
    trigger: str = "grid"  # "grid" | "blend" | "sinusoid"
    trigger_size: int = 5
    trigger_margin: int = 0
    blend_alpha: float = 0.15
    blend_seed: int = 0
    sinusoid_amplitude: float = 20.0 / 255.0
    sinusoid_frequency: int = 6
    target_label: int = 0
    poisoning_rate: float = 0.1
    label_mode: str = "dirty"
    allow_high_rate: bool = False

    def validate(self) -> None:
        if self.trigger not in ("grid", "blend", "sinusoid"):
            raise ConfigError(f"poison: unknown trigger {self.trigger!r}")
        check_rate_cap(self.poisoning_rate, self.allow_high_rate)

    def spec(self, image_shape, seed: int) -> PoisonSpec:
        if self.trigger == "grid":
            trigger = bottom_right_grid(image_shape, self.trigger_size, self.trigger_margin)
        elif self.trigger == "blend":
            trigger = blend_from_seed(image_shape, self.blend_alpha, self.blend_seed)
        else:
            trigger = Sinusoid(self.sinusoid_amplitude, self.sinusoid_frequency)
        return PoisonSpec(trigger, self.target_label, self.poisoning_rate, self.label_mode, seed)


def check_rate_cap(rate: float, allow_high_rate: bool) -> None:
    if rate > HARD_RATE_CAP:
        raise ConfigError(f"poisoning rate {rate} exceeds the hard cap {HARD_RATE_CAP}")
    if rate > DEFAULT_RATE_CAP and not allow_high_rate:
        raise ConfigError(f"poisoning rate {rate} exceeds {DEFAULT_RATE_CAP}; set allow_high_rate = true")


@dataclass(frozen=True)
class MethodsSection:
    isolation: str = "lga"
    flooding_level: float = 0.5
    smoothing: float = 0.2
    unlearn: str = "abl_gga"
    noise_sigma: float = 0.1
    grad_fraction: float = 0.25
    relabel_epsilon: float = 0.2
    scratch_epochs: int = 20
    scratch_lr: float = 0.01

    def isolation_method(self, gamma: float):
        params = {"lga": {"gamma": gamma}, "flooding": {"level": self.flooding_level},
                  "label_smoothing": {"smoothing": self.smoothing}}.get(self.isolation, {})
        return baselines.make_method(self.isolation, baselines.ISOLATION_METHODS, **params)

    def unlearn_method(self):
        params = {"pixel_noise": {"sigma": self.noise_sigma},
                  "grad_noise": {"sigma": self.noise_sigma, "fraction": self.grad_fraction},
                  "label_smoothing": {"epsilon": self.relabel_epsilon}}.get(self.unlearn, {})
        return baselines.make_method(self.unlearn, baselines.UNLEARN_METHODS, **params)

    def validate(self) -> None:
        self.isolation_method(0.5)
        self.unlearn_method()
        if self.scratch_epochs < 0 or not self.scratch_lr > 0:
            raise ConfigError("methods: scratch_epochs must be >= 0 and scratch_lr > 0")


@dataclass(frozen=True)
class SweepSection:
    """Axes for ``sweep``. ``None`` means the axis is not swept; a key that
    is present but empty is an error when the sweep runs."""

    gamma: tuple[float, ...] | None = None
    isolation_rate: tuple[float, ...] | None = None
    turning_epoch: tuple[int, ...] | None = None
    poisoning_rate: tuple[float, ...] | None = None

    def axes(self) -> dict[str, tuple]:
        out = {}
        for f in fields(self):
            values = getattr(self, f.name)
            if values is None:
                continue
            if len(values) == 0:
                raise ConfigError(f"sweep: axis {f.name!r} is empty")
            out[f.name] = values
        if not out:
            raise ConfigError("sweep: no axes configured")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    training: AblConfig = field(default_factory=AblConfig)
    methods: MethodsSection = field(default_factory=MethodsSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0 or self.seed >= 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.dataset.validate()
        self.poison.validate()
        self.training.validate()
        self.methods.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of the semantic content; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out")
        d["training"].pop("seed")
        payload = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# INI section name -> ExperimentConfig attribute (None for top-level keys)
SECTIONS = {"experiment": None, "dataset": "dataset", "poison": "poison", "training": "training",
            "methods": "methods", "sweep": "sweep"}
_TOP_LEVEL = ("seed", "out")
_HIDDEN_KEYS = {"training": {"seed"}}  # derived per run, never written


def _section_fields(section: str):
    if section == "experiment":
        cls = ExperimentConfig
        names = _TOP_LEVEL
    else:
        cls = type(getattr(ExperimentConfig(), SECTIONS[section]))
        names = [f.name for f in fields(cls) if f.name not in _HIDDEN_KEYS.get(section, ())]
    hints = typing.get_type_hints(cls)
    return cls, {n: hints[n] for n in names}


def _convert(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        inner = next(a for a in args if a is not type(None))
        if raw.lower() == "none" or (raw == "" and typing.get_origin(inner) is not tuple):
            return None
        return _convert(raw, inner)
    if origin is tuple:
        if raw == "":
            return ()
        return tuple(_convert(part, args[0]) for part in raw.split(","))
    if tp is bool:
        key = raw.lower()
        if key not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[key]
    if tp is int:
        return int(raw, 0) if raw.lower().startswith(("0x", "0o", "0b")) else int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    raise TypeError(f"unsupported config type {tp!r}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of each ``key = value`` per section, for error messages."""
    lines, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, ""), n)
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), n)
    return lines


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))


def parse_config(text: str, source: str = "<config>", overrides=()) -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`.

    ``overrides`` are ``section.key=value`` strings (or ``key=value`` when the
    key is unique across sections) applied on top of the file.
    """
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None) or _first_error_line(exc)
        where = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{where}: {exc.message.splitlines()[0] if hasattr(exc, 'message') else exc}") from None
    lines = _key_lines(text)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}:{lines.get((sec, ''), '?')}: unknown section [{sec}]")
    for ov in overrides:
        sec, key, value = _split_override(ov)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, key, value)
        lines[(sec, key)] = f"override {ov!r}"

    values: dict[str, dict] = {}
    for sec in SECTIONS:
        _, schema = _section_fields(sec)
        got = {}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                where = lines.get((sec, key), "?")
                loc = f"{source}:{where}" if isinstance(where, int) else f"{source} ({where})"
                if key not in schema:
                    raise ConfigError(f"{loc}: unknown key [{sec}] {key}")
                try:
                    got[key] = _convert(raw, schema[key])
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"{loc}: [{sec}] {key}: {exc}") from None
        values[sec] = got

    try:
        cfg = ExperimentConfig(
            **values["experiment"],
            dataset=DatasetSection(**values["dataset"]),
            poison=PoisonSection(**values["poison"]),
            training=AblConfig(**values["training"]),
            methods=MethodsSection(**values["methods"]),
            sweep=SweepSection(**values["sweep"]),
        )
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _first_error_line(exc) -> int | None:
    errors = getattr(exc, "errors", None)
    return errors[0][0] if errors else None


def _split_override(ov: str) -> tuple[str, str, str]:
    if "=" not in ov:
        raise ConfigError(f"override {ov!r} must look like section.key=value")
    lhs, value = ov.split("=", 1)
    lhs = lhs.strip().lower()
    if "." in lhs:
        sec, key = lhs.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"override {ov!r}: unknown section {sec!r}")
        return sec, key, value.strip()
    owners = [sec for sec in SECTIONS if lhs in _section_fields(sec)[1]]
    if len(owners) != 1:
        what = "unknown" if not owners else f"ambiguous (in {', '.join(owners)})"
        raise ConfigError(f"override {ov!r}: key {lhs!r} is {what}; use section.key=value")
    return owners[0], lhs, value.strip()


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PathError(f"config file not found: {path}") from None
    return parse_config(text, str(path), overrides)


def to_ini(cfg: ExperimentConfig) -> str:
    """Serialise every key explicitly; :func:`parse_config` inverts this."""
    out = []
    for sec, attr in SECTIONS.items():
        obj = cfg if attr is None else getattr(cfg, attr)
        _, schema = _section_fields(sec)
        out.append(f"[{sec}]")
        for key in schema:
            out.append(f"{key} = {_format(getattr(obj, key))}")
        out.append("")
    return "\n".join(out)
