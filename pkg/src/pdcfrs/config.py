"""Experiment configuration: defaults, validation, JSON load/echo."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"  # synthetic | movielens | csv
    ratings_path: Optional[str] = None
    ratings_sep: str = "::"
    titles_path: Optional[str] = None
    titles_sep: str = "::"
    word_vectors_path: Optional[str] = None
    similarity_path: Optional[str] = None
    max_users: Optional[int] = None
    train_frac: float = 0.8
    neg_ratio: int = 4
    resample_negatives: bool = False
    synth_users: int = 1000
    synth_items: int = 400
    synth_clusters: int = 20
    synth_mean_interactions: float = 24.0

    # model
    seed: int = 0
    data_seed: Optional[int] = None  # dataset generation/split; defaults to seed
    dim: int = 32
    layers: Tuple[int, ...] = (32, 16, 8)
    activation: str = "relu"

    # protocol
    rounds: int = 20
    batch_size: int = 256
    local_epochs: int = 5
    local_batch_size: Optional[int] = None
    lr: float = 0.001
    aux_epochs: int = 5
    aux_batch_size: int = 256
    weighting: str = "uniform"  # uniform | size
    item_cl_steps: int = 1
    cl_sample: Optional[int] = None

    # privacy and enhancement
    epsilon: float = 5.0
    delta: Optional[float] = None
    alpha: int = 30
    aug_labels: str = "soft"  # soft: aux-model probability | hard: 1
    beta: float = 0.5
    lam: float = 0.5
    tau: float = 0.2
    augmentation: bool = True
    item_cl: bool = True
    user_cl: bool = True

    # evaluation / output
    k: int = 20
    out: str = "runs/default"
    record_timing: bool = False

    def __post_init__(self):
        if isinstance(self.layers, list):
            object.__setattr__(self, "layers", tuple(self.layers))
        _validate(self)

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @property
    def uses_aux(self) -> bool:
        return self.effective_alpha > 0 or self.effective_beta > 0 or self.effective_lam > 0

    @property
    def effective_alpha(self) -> int:
        return self.alpha if self.augmentation else 0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.item_cl else 0.0

    @property
    def effective_lam(self) -> float:
        return self.lam if self.user_cl else 0.0

    @property
    def variant(self) -> str:
        """Name of the ablation row this configuration corresponds to."""
        aug = self.effective_alpha > 0
        icl, ucl = self.effective_beta > 0, self.effective_lam > 0
        if aug and icl and ucl:
            return "PDC-FRS"
        parts = ["FedNCF"]
        if aug:
            parts.append("Aug")
        if icl and ucl:
            parts.append("CL")
        elif icl:
            parts.append("ItemCL")
        elif ucl:
            parts.append("UserCL")
        return "+".join(parts)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["layers"] = list(self.layers)
        d["lambda"] = d.pop("lam")
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        if "lambda" in changes:
            changes["lam"] = changes.pop("lambda")
        return dataclasses.replace(self, **changes)


_POSITIVE_INT = ("synth_users", "synth_items", "synth_clusters", "dim", "batch_size", "local_epochs",
                 "aux_batch_size", "k")
_NON_NEG_INT = ("neg_ratio", "rounds", "aux_epochs", "alpha", "item_cl_steps")
_NON_NEG_FLOAT = ("epsilon", "beta", "lam")
_POSITIVE_FLOAT = ("lr", "tau", "synth_mean_interactions")
_OPTIONAL_POSITIVE = ("max_users", "local_batch_size", "cl_sample", "delta")
_BOOLS = ("resample_negatives", "augmentation", "item_cl", "user_cl", "record_timing")
_CHOICES = {"dataset": ("synthetic", "movielens", "csv"), "weighting": ("uniform", "size"),
            "aug_labels": ("soft", "hard"),
            "activation": ("relu", "tanh", "identity")}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(c: ExperimentConfig) -> None:
    def bad(key, why):
        name = "lambda" if key == "lam" else key
        raise ConfigError(f"invalid value for {name!r}: {getattr(c, key)!r} ({why})")

    for k in _POSITIVE_INT:
        if not _is_int(getattr(c, k)) or getattr(c, k) <= 0:
            bad(k, "expected a positive integer")
    for k in _NON_NEG_INT:
        if not _is_int(getattr(c, k)) or getattr(c, k) < 0:
            bad(k, "expected a non-negative integer")
    for k in _NON_NEG_FLOAT:
        if not _is_num(getattr(c, k)) or not getattr(c, k) >= 0:
            bad(k, "expected a number >= 0")
    for k in _POSITIVE_FLOAT:
        if not _is_num(getattr(c, k)) or not getattr(c, k) > 0:
            bad(k, "expected a number > 0")
    for k in _OPTIONAL_POSITIVE:
        v = getattr(c, k)
        if v is not None and (not _is_num(v) or not v > 0):
            bad(k, "expected a positive number or null")
    for k in _BOOLS:
        if not isinstance(getattr(c, k), bool):
            bad(k, "expected true/false")
    for k, choices in _CHOICES.items():
        if getattr(c, k) not in choices:
            bad(k, f"expected one of {choices}")
    if not _is_num(c.train_frac) or not 0 < c.train_frac < 1:
        bad("train_frac", "expected 0 < train_frac < 1")
    if not _is_int(c.seed):
        bad("seed", "expected an integer")
    if c.data_seed is not None and not _is_int(c.data_seed):
        bad("data_seed", "expected an integer or null")
    if not c.layers or not all(_is_int(x) and x > 0 for x in c.layers):
        bad("layers", "expected a non-empty list of positive integers")
    if c.dataset != "synthetic" and not c.ratings_path:
        bad("ratings_path", f"required for dataset {c.dataset!r}")


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def from_mapping(data: Mapping[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Overlay ``data`` on ``base`` (defaults when omitted). Unknown keys raise."""
    data = dict(data)
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "layers" in data and isinstance(data["layers"], list):
        data["layers"] = tuple(data["layers"])
    return dataclasses.replace(base or ExperimentConfig(), **data)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``overrides``."""
    cfg = ExperimentConfig()
    if path is not None:
        text = Path(path).read_text()
        data = json.loads(text) if text.strip() else {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = from_mapping(data, cfg)
    if overrides:
        cfg = from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
