"""Run configuration: INI-style ``key = value`` files with section headers."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .training import TrainConfig

DATA_ROOT_ENV = "STROKESEG_DATA_ROOT"


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _opt_str(text):
    text = str(text).strip()
    return None if text.lower() in ("", "none") else text


def _widths(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    return tuple(int(w) for w in str(text).replace(",", " ").split())


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


# key -> (section, parser)
_TRAIN_KEYS = {
    "ablation": ("train", str),
    "epochs": ("train", int),
    "batch_size": ("train", int),
    "lr_segmenter": ("train", float),
    "lr_discriminators": ("train", float),
    "seed": ("train", int),
    "device": ("train", str),
    "max_iterations": ("train", _opt_int),
    "stop_at_dice": ("train", _opt_float),
    "val_every": ("train", int),
    "drop_empty": ("train", _bool),
    "boundary_factor": ("loss", float),
    "boundary_iterations": ("loss", int),
    "encoder_widths": ("model", _widths),
    "batch_norm": ("model", _bool),
    "disc_base_width": ("model", int),
    "disc_downsamples": ("model", int),
    "pad_to_multiple": ("data", int),
    "inclusive_penumbra": ("eval", _bool),
}
_WEIGHT_KEYS = {"lambda_ce": "ce", "lambda_ls": "ls", "lambda_bd": "bd", "lambda_adv": "adv"}
_RUN_KEYS = {
    "data_root": ("data", _opt_str),
    "manifest": ("data", _opt_str),
    "k_folds": ("data", int),
    "fold_seed": ("data", int),
    "out_dir": ("output", str),
}
SECTIONS = ("data", "train", "loss", "model", "eval", "output")


def _schema():
    out = {k: v for k, v in _TRAIN_KEYS.items()}
    out.update({k: ("loss", float) for k in _WEIGHT_KEYS})
    out.update(_RUN_KEYS)
    return out


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str | None = None
    manifest: str | None = None
    k_folds: int = 3
    fold_seed: int = 0
    out_dir: str = "runs"

    def resolved_data_root(self):
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None

    def resolved_manifest(self):
        if self.manifest is None:
            root = self.resolved_data_root()
            return root / "manifest.txt" if root else None
        m = Path(self.manifest)
        if not m.is_absolute() and self.resolved_data_root() and not m.exists():
            m = self.resolved_data_root() / m
        return m

    def validate(self, need_data=True):
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if need_data:
            root = self.resolved_data_root()
            if root is None or not root.is_dir():
                raise ConfigError(f"data root not found: {root} (set data_root or ${DATA_ROOT_ENV})")
            manifest = self.resolved_manifest()
            if not manifest.is_file():
                raise ConfigError(f"manifest not found: {manifest}")
        return self

    def items(self):
        """Flat ``key -> value`` view matching the file schema."""
        t = self.train
        out = {k: getattr(t, k) for k in _TRAIN_KEYS}
        out.update({k: getattr(t.loss_weights, a) for k, a in _WEIGHT_KEYS.items()})
        out.update({k: getattr(self, k) for k in _RUN_KEYS})
        return out

    def with_overrides(self, overrides):
        """Apply a flat ``key -> value`` mapping (values may be strings)."""
        schema = _schema()
        unknown = sorted(set(overrides) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        flat = self.items()
        for key, value in overrides.items():
            if value is None:
                continue
            parser = schema[key][1]
            try:
                flat[key] = parser(value) if isinstance(value, str) else value
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
        return RunConfig.from_flat(flat)

    @classmethod
    def from_flat(cls, flat):
        try:
            weights = LossWeights(**{a: float(flat[k]) for k, a in _WEIGHT_KEYS.items()})
            train = TrainConfig(loss_weights=weights, **{k: flat[k] for k in _TRAIN_KEYS})
            return cls(train=train, **{k: flat[k] for k in _RUN_KEYS})
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_text(text, source="<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    schema = _schema()
    overrides = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            if schema[key][0] != section:
                raise ConfigError(f"{source}: key {key!r} belongs in [{schema[key][0]}], not [{section}]")
            overrides[key] = value
    return RunConfig().with_overrides(overrides)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def format_config(cfg: RunConfig) -> str:
    schema = _schema()
    flat = cfg.items()
    lines = []
    for section in SECTIONS:
        keys = [k for k, (s, _) in schema.items() if s == section]
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(flat[k])}" for k in keys)
        lines.append("")
    return "\n".join(lines)
