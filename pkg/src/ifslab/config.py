"""Strict sectioned key-value run configuration.

Unknown sections or keys are rejected before any computation so experiment
provenance stays honest; every value carries an explicit type.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError
from .geometry import DatasetSpec

_REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _opt_float(s: str):
    return None if s.strip().lower() in ("none", "") else float(s)


_SCHEMAS: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": (str, "two_moons"),
        "n": (int, 2048),
        "noise": (float, 0.1),
        "radius": (float, 2.0),
        "seed": (int, _REQUIRED),
    },
    "architecture": {
        "family": (str, "moe"),
        # moe
        "experts": (int, 8),
        "width": (int, 32),
        "depth": (int, 1),
        "stages": (int, 1),
        "activation": (str, "tanh"),
        "gate": (str, "constant"),
        "temperature": (float, 1.0),
        # resnet
        "bias_free": (_bool, False),
        # transformer
        "embed": (int, 10),
        "context": (int, 2),
        "hidden": (int, 10),
        "scaled_attention": (_bool, False),
    },
    "train": {
        "epochs": (int, 2000),
        "batch_size": (int, 256),
        "lr": (float, 1e-3),
        "blur": (float, 0.05),
        "sigma": (float, 0.04),
        "cap": (_opt_float, 0.9),
        "seed": (int, _REQUIRED),
        "routing": (str, "sampled"),
        "grad_estimator": (str, "pathwise_selected"),
        "sinkhorn_max_iters": (int, 500),
        "sinkhorn_tol": (float, 1e-6),
        "mc_draws": (int, 1),
        "warmup_epochs": (int, 0),
    },
    "bound": {
        "mc_batches": (int, 8),
        "mc_batch_size": (int, 512),
        "burn_in": (int, 100),
        "blur": (float, 0.05),
        "sinkhorn_max_iters": (int, 5000),
        "caps": (_float_list, [0.3, 0.5, 0.7, 0.9]),
        "seeds": (_int_list, None),  # defaults to the training seed
        "reference_n": (int, 50000),
        "reference_seed": (int, None),  # defaults to dataset seed + 1
    },
    "output": {
        "dir": (str, "out"),
        "plot": (_bool, False),
        "attractor_n": (int, 4096),
    },
}

_FAMILY_KEYS = {
    "moe": {"family", "experts", "width", "depth", "stages", "activation", "gate",
            "temperature"},
    "resnet": {"family", "width", "depth", "bias_free"},
    "transformer": {"family", "embed", "context", "hidden", "activation",
                    "scaled_attention"},
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def dataset_spec(self) -> DatasetSpec:
        d = self.sections["dataset"]
        return DatasetSpec(kind=d["kind"], n=d["n"], noise=d["noise"],
                           radius=d["radius"], seed=d["seed"])

    def arch_dict(self, data_dim: int) -> dict:
        a = self.sections["architecture"]
        family = a["family"]
        if family == "moe":
            t = self.sections["train"]
            return {"family": "moe", "data_dim": data_dim, "n_experts": a["experts"],
                    "width": a["width"], "depth": a["depth"], "stages": a["stages"],
                    "activation": a["activation"], "cap": t["cap"], "gate": a["gate"],
                    "temperature": a["temperature"], "noise_sigma": t["sigma"]}
        if family == "resnet":
            t = self.sections["train"]
            return {"family": "resnet", "data_dim": data_dim, "width": a["width"],
                    "depth": a["depth"], "bias_free": a["bias_free"], "cap": t["cap"],
                    "noise_sigma": t["sigma"]}
        if family == "transformer":
            t = self.sections["train"]
            return {"family": "transformer", "data_dim": data_dim, "embed": a["embed"],
                    "context": a["context"], "hidden": a["hidden"],
                    "activation": a["activation"],
                    "scaled_attention": a["scaled_attention"], "noise_sigma": t["sigma"]}
        raise ConfigError(f"unknown architecture family {family!r}")


def _parse_section(name: str, items: dict, overrides: dict) -> dict:
    schema = _SCHEMAS[name]
    out = {}
    for key, raw in items.items():
        if key not in schema:
            raise ConfigError(f"unknown key [{name}] {key!r}")
        parser = schema[key][0]
        try:
            out[key] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for [{name}] {key}: {raw!r} ({exc})") from exc
    for key, (_, default) in schema.items():
        if key in out:
            continue
        if default is _REQUIRED:
            if key in overrides and overrides[key] is not None:
                out[key] = overrides[key]
            else:
                raise ConfigError(
                    f"[{name}] {key} must be explicit (set it in the config or pass --seed)"
                )
        else:
            out[key] = default
    return out


def load_config(path=None, seed_override=None) -> RunConfig:
    """Parse (or default) a run config; --seed fills the required seed keys."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMAS:
            raise ConfigError(f"unknown config section [{section}]")
    overrides = {"seed": seed_override}
    sections = {}
    for name in _SCHEMAS:
        items = dict(parser[name]) if parser.has_section(name) else {}
        sections[name] = _parse_section(name, items, overrides)
    # architecture keys must belong to the declared family
    arch = dict(parser["architecture"]) if parser.has_section("architecture") else {}
    family = sections["architecture"]["family"]
    if family not in _FAMILY_KEYS:
        raise ConfigError(f"unknown architecture family {family!r}")
    stray = set(arch) - _FAMILY_KEYS[family]
    if stray:
        raise ConfigError(f"keys {sorted(stray)} do not apply to family {family!r}")
    if sections["bound"]["seeds"] is None:
        sections["bound"]["seeds"] = [sections["train"]["seed"]]
    if sections["bound"]["reference_seed"] is None:
        sections["bound"]["reference_seed"] = sections["dataset"]["seed"] + 1
    return RunConfig(sections)
