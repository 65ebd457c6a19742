"""Run configuration: one JSON document with a section per settings dataclass.

Every section is optional and every field falls back to the default of its
dataclass. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .encoders import CnnEncoderConfig, VitEncoderConfig
from .sampling import BatchSpec
from .synth import SynthSpec
from .training import LossConfig, TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    seed: int = 0
    prefer_mirror_pairs: bool = True


@dataclass(frozen=True)
class EvalSpec:
    ks: tuple[int, ...] = (1, 2)
    top: int = 5


SECTIONS = {
    "synth": SynthSpec,
    "split": SplitSpec,
    "batch": BatchSpec,
    "loss": LossConfig,
    "schedule": TrainSchedule,
    "eval": EvalSpec,
}
ENCODER_SECTIONS = ("photo_encoder", "sketch_encoder")
ENCODER_KINDS = {"cnn": CnnEncoderConfig, "vit": VitEncoderConfig}
# sections whose "seed" field follows the global --seed
SEEDED = ("synth", "split", "batch", "schedule")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    if hasattr(value, "value"):  # enums
        return value.value
    return value


def defaults() -> dict[str, dict]:
    """The full default document, in the order used by ``--help`` and ``config``."""
    doc = {name: {k: _plain(v) for k, v in dataclasses.asdict(cls()).items()}
           for name, cls in SECTIONS.items()}
    for name in ENCODER_SECTIONS:
        doc[name] = {"kind": "cnn"}
    return doc


@dataclass
class RunConfig:
    raw: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_document(cls, doc: Optional[dict]) -> "RunConfig":
        doc = copy.deepcopy(doc or {})
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        for section, body in doc.items():
            if not isinstance(body, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            if section in SECTIONS:
                unknown = set(body) - _field_names(SECTIONS[section])
            elif section in ENCODER_SECTIONS:
                kind = body.get("kind", "cnn")
                if kind not in ENCODER_KINDS:
                    raise ConfigError(f"{section}.kind must be one of {sorted(ENCODER_KINDS)}")
                unknown = set(body) - _field_names(ENCODER_KINDS[kind]) - {"kind"}
            else:
                raise ConfigError(f"unknown config section {section!r}")
            if unknown:
                raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
        cfg = cls(doc)
        cfg.build()  # surface value errors early
        return cfg

    @classmethod
    def load(cls, path: Optional[str], overrides: tuple[str, ...] = (),
             seed: Optional[int] = None) -> "RunConfig":
        doc: dict = {}
        if path:
            try:
                with open(path) as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        for item in overrides:
            apply_override(doc, item)
        if seed is not None:
            for section in SEEDED:
                doc.setdefault(section, {})["seed"] = int(seed)
        return cls.from_document(doc)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def build(self) -> dict[str, Any]:
        out = {}
        for name, cls in SECTIONS.items():
            try:
                out[name] = cls(**self.section(name))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from exc
        return out

    def encoder(self, name: str, input_size, num_classes: int, in_channels: int):
        """Encoder config with data-dependent fields filled from the dataset unless set."""
        body = self.section(name)
        kind = body.pop("kind", "cnn")
        body.setdefault("input_size", tuple(input_size))
        body.setdefault("num_classes", int(num_classes))
        body.setdefault("in_channels", int(in_channels))
        try:
            return ENCODER_KINDS[kind](**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc

    def to_document(self) -> dict:
        """Defaults merged with explicit settings."""
        doc = defaults()
        for section, body in self.raw.items():
            doc.setdefault(section, {}).update(body)
        return doc


def apply_override(doc: dict, item: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON, else kept as a string."""
    key, sep, text = item.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    doc.setdefault(section, {})[name] = value
