"""Pipeline configuration: typed INI sections with strict key checking."""
from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple


class ConfigError(ValueError):
    """Bad configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: List[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip() in ("", "none", "auto") else float(text)


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default text)
SCHEMA: Dict[str, Dict[str, Tuple[Any, str]]] = {
    "paths": {
        "data_dir": (_str, ""),
    },
    "synth": {
        "width": (int, "256"),
        "height": (int, "256"),
        "smoothing_radius": (float, "6.0"),
        "cell_size": (float, "15.0"),
        "image_noise_sd": (float, "0.05"),
        "psf_sigma": (float, "2.0"),
        "motif_density": (float, "0.004"),
        "motif_amplitude": (float, "3.0"),
        "n_roads": (int, "5"),
        "n_stations": (int, "8"),
        "rule_intercept": (float, "-4.0"),
        "beta_enrichment": (float, "3.0"),
        "beta_dist_road": (float, "-3.0"),
        "beta_trigger": (float, "8.0"),
        "seed": (int, "0"),
    },
    "features": {
        "enrichment_window": (int, "7"),
        "validation_fraction": (float, "0.2"),
    },
    "model": {
        "kind": (_str, "conv"),
        "transition": (_str, "agriculture_to_built_up"),
        "width_scale": (float, "0.03125"),
        "cdae_width_scale": (float, "0.125"),
        "cdae_patch_size": (int, "81"),
        "filter_size": (int, "3"),
        "spatial_weight": (_bool, "true"),
        "pooling": (_str, "max_pool"),
        "export_activations": (_bool, "false"),
    },
    "train": {
        "learning_rate": (float, "0.01"),
        "lr_decay_every": (int, "400"),
        "lr_decay_factor": (float, "0.5"),
        "momentum": (float, "0.9"),
        "gradient_noise_eta": (float, "0.0"),
        "gradient_noise_gamma": (float, "0.55"),
        "batch_size": (int, "64"),
        "max_steps": (int, "1000"),
        "eval_every": (int, "250"),
        "jitter_strength": (float, "0.05"),
        "max_validation": (int, "2000"),
        "max_train_samples": (int, "6000"),
        "cdae_steps": (int, "300"),
        "cdae_learning_rate": (float, "0.02"),
        "cdae_batch_size": (int, "16"),
        "corruption_sigma": (float, "0.3"),
        "seed": (int, "0"),
    },
    "ca": {
        "threshold": (float, "0.5"),
        "r": (float, "0.5"),
        "t": (float, "0.5"),
        "patch_size_mu": (float, repr(math.log(20.0))),
        "patch_size_sigma": (float, "0.5"),
        "isometry": (float, "1.5"),
        "prune_factor": (float, "10"),
        "seed": (int, "0"),
    },
    "metrics": {
        "neighborhoods": (_ints, "3, 7, 11"),
        "sigma": (_opt_float, "auto"),
        "shuffles": (int, "20"),
        "seed": (int, "0"),
    },
}

SEEDED_SECTIONS = ("synth", "train", "ca", "metrics")


@dataclass
class PipelineConfig:
    raw: Dict[str, Dict[str, str]]
    values: Dict[str, Dict[str, Any]]

    def __getitem__(self, section) -> Dict[str, Any]:
        return self.values[section]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            cp[section] = {k: self.raw[section][k] for k in SCHEMA[section]}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def derive_seed(base: int, module: str) -> int:
    """Stable per-module seed derived from one run seed."""
    digest = hashlib.sha256(f"{int(base)}:{module}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def parse_override(text: str) -> Tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not key=value"])
    key, value = text.split("=", 1)
    if "." not in key:
        raise ConfigError([f"override key {key!r} must be section.key"])
    section, name = key.strip().split(".", 1)
    return section, name, value.strip()


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None) -> PipelineConfig:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    problems: List[str] = []
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        for section in cp.sections():
            if section not in SCHEMA:
                problems.append(f"unknown section [{section}]")
                continue
            for key, value in cp[section].items():
                if key not in SCHEMA[section]:
                    problems.append(f"unknown key {section}.{key}")
                else:
                    raw[section][key] = value
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in SCHEMA or key not in SCHEMA[section]:
            problems.append(f"unknown key {section}.{key}")
        else:
            raw[section][key] = value
    if seed is not None:
        for section in SEEDED_SECTIONS:
            raw[section]["seed"] = str(derive_seed(seed, section))
    values: Dict[str, Dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                problems.append(f"bad value for {section}.{key}: {exc}")
    if not problems:
        problems += _validate(values)
    if problems:
        raise ConfigError(problems)
    return PipelineConfig(raw, values)


def _validate(v) -> List[str]:
    out = []
    if v["model"]["kind"] not in ("geo", "conv", "cdae"):
        out.append("model.kind must be geo, conv or cdae")
    if v["model"]["pooling"] not in ("max_pool", "avg_pool"):
        out.append("model.pooling must be max_pool or avg_pool")
    if v["model"]["width_scale"] <= 0 or v["model"]["cdae_width_scale"] <= 0:
        out.append("model width scales must be > 0")
    if v["model"]["cdae_patch_size"] < 9 or v["model"]["cdae_patch_size"] % 9:
        out.append("model.cdae_patch_size must be a positive multiple of 9")
    if not 0 < v["features"]["validation_fraction"] < 1:
        out.append("features.validation_fraction must lie in (0, 1)")
    if v["features"]["enrichment_window"] < 1 or v["features"]["enrichment_window"] % 2 == 0:
        out.append("features.enrichment_window must be a positive odd size")
    for key in ("max_steps", "batch_size", "eval_every", "cdae_steps", "cdae_batch_size"):
        if v["train"][key] < 1:
            out.append(f"train.{key} must be >= 1")
    for n in v["metrics"]["neighborhoods"]:
        if n < 1 or n % 2 == 0:
            out.append(f"metrics.neighborhoods holds {n}; sizes must be positive and odd")
    if v["synth"]["width"] < 8 or v["synth"]["height"] < 8:
        out.append("synth.width and synth.height must be >= 8")
    return out
