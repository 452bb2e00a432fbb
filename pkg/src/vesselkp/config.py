"""TOML run configuration with dotted-path overrides, resolved into the module config dataclasses."""
from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .geometry import HomographySamplerConfig
from .losses import LossWeights
from .matching import RegisterConfig
from .network import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "network": NetworkConfig,
    "trainer": TrainConfig,
    "homography": HomographySamplerConfig,
    "losses": LossWeights,
    "register": RegisterConfig,
}
# free-form sections (paths and run options)
DATA_KEYS = {"manifest", "val_manifest", "phantom_subjects", "phantom_labeled", "phantom_seed", "phantom_frame"}
RUN_KEYS = {"run_dir", "seed", "deterministic"}
EVAL_KEYS = {"auc_threshold", "statistic"}


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as TOML literals when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected dotted.path=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = _parse_value(text.strip())
    return doc


def load_config(path=None, overrides=()) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")
    return apply_overrides(doc, overrides)


def _build(cls, section: str, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in values.items():
        if k not in names:
            raise ConfigError(f"{section}.{k}: unknown field")
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        obj = cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}")
    bad = obj.validate() if hasattr(obj, "validate") else None
    if bad:
        raise ConfigError(f"{section}: {bad}")
    return obj


@dataclasses.dataclass
class RunConfig:
    network: NetworkConfig
    trainer: TrainConfig
    losses: LossWeights
    register: RegisterConfig
    data: dict
    run: dict
    eval: dict

    def to_dict(self):
        out = {name: _plain(dataclasses.asdict(getattr(self, name)))
               for name in ("network", "trainer", "losses", "register")}
        out["homography"] = out["trainer"].pop("homography")
        out.update(data=dict(self.data), run=dict(self.run), eval=dict(self.eval))
        return out


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    return x


def resolve(doc: dict) -> RunConfig:
    """Turn a parsed document into validated config objects; field-level errors raise ConfigError."""
    known = set(SECTIONS) | {"data", "run", "eval"}
    for k in doc:
        if k not in known:
            raise ConfigError(f"{k}: unknown section")
    for sec, keys in (("data", DATA_KEYS), ("run", RUN_KEYS), ("eval", EVAL_KEYS)):
        for k in doc.get(sec, {}):
            if k not in keys:
                raise ConfigError(f"{sec}.{k}: unknown field")
    run = {"seed": 0, "deterministic": False, "run_dir": "runs/latest", **doc.get("run", {})}
    hom = _build(HomographySamplerConfig, "homography", doc.get("homography", {}))
    tr_vals = dict(doc.get("trainer", {}))
    tr_vals.setdefault("seed", run["seed"])
    tr_vals.setdefault("deterministic", run["deterministic"])
    tr_vals["homography"] = hom
    trainer = _build(TrainConfig, "trainer", tr_vals)
    network = _build(NetworkConfig, "network", doc.get("network", {}))
    weights = _build(LossWeights, "losses", doc.get("losses", {}))
    reg_vals = {"working_size": network.working_size, "seed": run["seed"], **doc.get("register", {})}
    register = _build(RegisterConfig, "register", reg_vals)
    ev = {"auc_threshold": 25, "statistic": "max", **doc.get("eval", {})}
    if ev["statistic"] not in ("max", "mean"):
        raise ConfigError("eval.statistic: must be 'max' or 'mean'")
    if not (isinstance(ev["auc_threshold"], int) and ev["auc_threshold"] >= 1):
        raise ConfigError("eval.auc_threshold: must be a positive integer")
    return RunConfig(network, trainer, weights, register, dict(doc.get("data", {})), run, ev)
