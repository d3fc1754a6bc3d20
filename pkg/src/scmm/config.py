"""TOML configuration for training and synthesis.

Split-point hyperparameters may be given as fractions of the LF or label
count ("1/K", "1/(20L)"), resolved once the dataset is known.  Unknown
keys are rejected so typos fail loudly.  Named presets bundle the
published per-dataset hyperparameter sets.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .emission import EmissionHyper
from .synth import SynthConfig
from .trainer import StageConfig, TrainConfig


class ConfigError(ValueError):
    pass


_FRACTION = re.compile(r"^1\s*/\s*\(?\s*(\d*)\s*([KL])\s*\)?$")


def parse_fraction(value, n_lfs: int, n_labels: int) -> float:
    """Accept a float or a '1/(cK)' / '1/(cL)' style string."""
    if isinstance(value, (int, float)):
        return float(value)
    m = _FRACTION.match(str(value).strip())
    if not m:
        raise ConfigError(f"cannot parse fraction {value!r}")
    coef = int(m.group(1)) if m.group(1) else 1
    base = n_lfs if m.group(2) == "K" else n_labels
    return 1.0 / (coef * base)


PRESETS: dict[str, dict] = {
    # desk-scale configuration for the bundled synthetic corpus
    "synth": {
        "model": {"nu_base": 2, "nu_expan": 1000, "h_n": 1.2, "h_s": 1.5,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(10L)", "g_r_s23": "1/(10L)",
                  "reliability_level": "entity"},
        "train": {"batch_size": 256, "lr_pretrain": 5e-4, "pretrain_epochs": 20,
                  "use_mv": False,
                  "stage1": {"lr": 2e-4, "max_epochs": 30, "patience": 4},
                  "stage2": {"lr": 1e-4, "max_epochs": 15, "patience": 3},
                  "stage3": {"lr": 2e-4, "max_epochs": 30, "patience": 6}},
    },
    "conll": {
        "model": {"nu_base": 10, "nu_expan": 1000, "h_n": 1.2, "h_s": 1.5,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(2L)", "g_r_s23": "1/(20L)",
                  "reliability_level": "entity"},
        "train": {"batch_size": 256, "lr_pretrain": 5e-4, "use_mv": False,
                  "stage1": {"lr": 2e-4}, "stage2": {"lr": 4e-5},
                  "stage3": {"lr": 2e-4}},
    },
    "ncbi": {
        "model": {"nu_base": 2, "nu_expan": 1500, "h_n": 1.2, "h_s": 3,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(20L)", "g_r_s23": "1/(20L)",
                  "reliability_level": "label"},
        "train": {"batch_size": 128, "lr_pretrain": 5e-4, "use_mv": True,
                  "stage1": {"lr": 1e-3}, "stage2": {"lr": 2e-4},
                  "stage3": {"lr": 1e-3}},
    },
    "bc5cdr": {
        "model": {"nu_base": 2, "nu_expan": 1500, "h_n": 0.9, "h_s": 1.1,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(10L)", "g_r_s23": "1/(10L)",
                  "reliability_level": "entity"},
        "train": {"batch_size": 128, "lr_pretrain": 5e-4, "use_mv": False,
                  "stage1": {"lr": 1e-3}, "stage2": {"lr": 2e-4},
                  "stage3": {"lr": 1e-3}},
    },
    "laptop": {
        "model": {"nu_base": 2, "nu_expan": 1000, "h_n": 0.8, "h_s": 1.5,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(20L)", "g_r_s23": "1/(20L)",
                  "reliability_level": "label"},
        "train": {"batch_size": 256, "lr_pretrain": 5e-4, "use_mv": True,
                  "stage1": {"lr": 1e-4}, "stage2": {"lr": 2e-5},
                  "stage3": {"lr": 1e-4}},
    },
    "ontonotes": {
        "model": {"nu_base": 2, "nu_expan": 1000, "h_n": 1.1, "h_s": 1.0,
                  "h_r": "1/K", "g_n": 4, "g_r_s1": "1/(5L)", "g_r_s23": "1/(5L)",
                  "reliability_level": "entity"},
        "train": {"batch_size": 32, "lr_pretrain": 1e-4, "use_mv": False,
                  "wxor_scope": "valid",
                  "stage1": {"lr": 1e-4}, "stage2": {"lr": 2e-5},
                  "stage3": {"lr": 1e-4}},
    },
}

_DATA_KEYS = {"dir", "entities"}
_MODEL_KEYS = {"preset", "nu_base", "nu_expan", "h_n", "h_s", "h_r", "g_n",
               "g_r_s1", "g_r_s23", "reliability_level", "dirichlet_mode", "p0"}
_TRAIN_KEYS = {"seed", "batch_size", "lr_pretrain", "pretrain_epochs",
               "lambda_mix", "use_mv", "count_o_votes", "wxor_scope",
               "eval_split", "optimizer", "evidence_floor",
               "stage1", "stage2", "stage3"}
_STAGE_KEYS = {"lr", "max_epochs", "patience", "sample"}
_SYNTH_KEYS = {"entities", "n_train", "n_valid", "n_test", "min_len", "max_len",
               "entity_density", "transition", "lf_diagonals", "lf_emissions",
               "confusion_lf", "confusion_mass", "confusion_entity",
               "false_positive_scale", "stray_mass", "embed_dim", "embed_noise",
               "seed"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class LoadedTrainConfig:
    """Parsed file; resolve() turns it into a TrainConfig once K is known."""

    data_dir: Path
    entities: tuple[str, ...]
    model_section: dict
    train_section: dict

    @property
    def n_labels(self) -> int:
        return 2 * len(self.entities) + 1

    def resolve(self, n_lfs: int) -> TrainConfig:
        n_labels = self.n_labels
        m = self.model_section
        hyper = EmissionHyper(
            h_n=float(m.get("h_n", 1.2)),
            h_s=float(m.get("h_s", 1.5)),
            h_r=parse_fraction(m["h_r"], n_lfs, n_labels) if "h_r" in m else None,
            g_n=float(m.get("g_n", 4.0)),
            g_r_s1=(parse_fraction(m["g_r_s1"], n_lfs, n_labels)
                    if "g_r_s1" in m else None),
            g_r_s23=(parse_fraction(m["g_r_s23"], n_lfs, n_labels)
                     if "g_r_s23" in m else None),
            nu_base=float(m.get("nu_base", 2.0)),
            nu_expan=float(m.get("nu_expan", 1000.0)),
            reliability_level=m.get("reliability_level", "entity"),
        )
        t = self.train_section

        def stage(name: str, default_lr: float, sample: bool) -> StageConfig:
            sec = t.get(name, {})
            return StageConfig(
                lr=float(sec.get("lr", default_lr)),
                max_epochs=int(sec.get("max_epochs", 50)),
                patience=int(sec.get("patience", 5)),
                sample=bool(sec.get("sample", sample)),
            )

        try:
            return TrainConfig(
                seed=int(t.get("seed", 0)),
                batch_size=int(t.get("batch_size", 64)),
                lr_pretrain=float(t.get("lr_pretrain", 5e-4)),
                pretrain_epochs=int(t.get("pretrain_epochs", 25)),
                stage1=stage("stage1", 2e-4, True),
                stage2=stage("stage2", 4e-5, True),
                stage3=stage("stage3", 2e-4, False),
                lambda_mix=float(t.get("lambda_mix", 0.2)),
                use_mv=bool(t.get("use_mv", False)),
                count_o_votes=bool(t.get("count_o_votes", False)),
                wxor_scope=t.get("wxor_scope", "train+valid"),
                dirichlet_mode=m.get("dirichlet_mode", "mean-path"),
                eval_split=t.get("eval_split", "valid"),
                p0=m.get("p0", "delta"),
                optimizer=t.get("optimizer", "adam"),
                evidence_floor=float(t.get("evidence_floor", 1e-30)),
                hyper=hyper,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value overrides; values parse as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, _, raw = item.partition("=")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = doc
        *parents, leaf = dotted.strip().split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a scalar")
        node[leaf] = value
    return doc


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_train_config(path, overrides: list[str] | None = None) -> LoadedTrainConfig:
    doc = apply_overrides(_read_toml(path), overrides or [])
    _check_keys(doc, {"data", "model", "train"}, "top level")
    data = doc.get("data", {})
    _check_keys(data, _DATA_KEYS, "data")
    if "dir" not in data or "entities" not in data:
        raise ConfigError("[data] must define dir and entities")
    model = doc.get("model", {})
    _check_keys(model, _MODEL_KEYS, "model")
    train = doc.get("train", {})
    _check_keys(train, _TRAIN_KEYS, "train")
    for s in ("stage1", "stage2", "stage3"):
        _check_keys(train.get(s, {}), _STAGE_KEYS, f"train.{s}")
    if "preset" in model:
        name = model.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        model = _merge(PRESETS[name]["model"], model)
        train = _merge(PRESETS[name]["train"], train)
    base = Path(path).parent
    data_dir = Path(data["dir"])
    if not data_dir.is_absolute():
        data_dir = base / data_dir
    return LoadedTrainConfig(
        data_dir=data_dir,
        entities=tuple(data["entities"]),
        model_section=model,
        train_section=train,
    )


def load_synth_config(path, overrides: list[str] | None = None) -> SynthConfig:
    doc = apply_overrides(_read_toml(path), overrides or [])
    _check_keys(doc, {"synth"}, "top level")
    sec = doc.get("synth", {})
    _check_keys(sec, _SYNTH_KEYS, "synth")
    kwargs = dict(sec)
    for key in ("entities", "lf_diagonals"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    for key in ("transition", "lf_emissions"):
        if key in kwargs:
            kwargs[key] = np.asarray(kwargs[key], dtype=np.float64)
    try:
        return SynthConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
