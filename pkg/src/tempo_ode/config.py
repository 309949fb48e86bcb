"""Run configuration: JSON schema, validation, and component assembly.

Configs are strict: unknown keys are rejected and every default is
materialized on load, so a saved config (or a checkpoint's config echo)
fully describes its run. One root seed in the training section drives
data splitting, parameter init, shuffling, and sampling noise through
purpose-derived sub-seeds.
"""

from __future__ import annotations

import copy
import json
from typing import Any, Optional

import numpy as np

from .data import (
    DatasetSplit,
    SyntheticSpec,
    generate_synthetic,
    load_csv_with_heldout,
    normalize,
    split_dataset,
)
from .errors import ConfigError, InvalidSpecError
from .models import LatentOdeModel, LayerOptions, OdeFuncNet, OdeRnnEncoder
from .seeding import derive_seed
from .solver import SolverConfig
from .training import LossSpec, TrainSettings

CONFIG_VERSION = 1

_SYNTHETIC_DEFAULTS: dict[str, Any] = {
    "n_samples": 100,
    "t_grid": 100,
    "t_span": [0.0, 5.0],
    "freq_range": [1.0, 3.0],
    "amp_range": [0.5, 1.5],
    "noise_sigma": 0.05,
    "discontinuity_prob": 0.3,
    "jump_range": [0.5, 1.5],
    "sparsity": 0.1,
    "seed": None,  # null: derived from the root training seed
}

_CSV_DEFAULTS: dict[str, Any] = {
    "train": None,
    "val": None,
    "test": None,
}

_MODEL_DEFAULTS: dict[str, Any] = {
    "temporal": True,
    "coupling": "rank1",
    "range_mode": "signed",
    "residual": False,
    "per_weight_freq": False,
    "temporal_gru": False,
    "latent_dim": 6,
    "enc_hidden": 10,
    "enc_ode_width": 10,
    "enc_ode_layers": 2,
    "dec_ode_width": 10,
    "dec_ode_layers": 2,
    "feature_dim": None,  # inferred from data when null
    "n_classes": None,
    "coupling_cap": 4096,
    "stream_threshold": 4096,
}

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "task": {
        "kind": "reconstruction",
        "extrapolation_cut": 0.5,  # fraction of the time span
        "classifier_input": "z0",
    },
    "model": _MODEL_DEFAULTS,
    "compare_model": None,  # optional second model section for comparisons
    "solver": {
        "method": "rk4",
        "fixed_step": None,  # null: span / 20 once the data span is known
        "rtol": 1e-5,
        "atol": 1e-5,
        "max_steps": 1_000_000,
        "initial_step": 0.01,
        "eval_method": "dopri5",
        "eval_fixed_step": None,
        "eval_rtol": 1e-5,
        "eval_atol": 1e-5,
    },
    "training": {
        "lr": 0.01,
        "decay": 0.999,
        "epochs": 50,
        "batch_size": 20,
        "seed": 0,
        "patience": 20,
        "loss": "elbo",
        "kl_weight": 1.0,
        "kl_warmup_epochs": 10,
        "obs_noise_std": 0.01,
        "clip_norm": 10.0,
    },
    "data": {
        "synthetic": None,
        "csv": None,
        "val_fraction": 0.2,
        "test_fraction": 0.2,
        "normalize": True,
    },
}

_CHOICES = {
    "task.kind": ("reconstruction", "extrapolation", "classification",
                  "per_time_classification"),
    "task.classifier_input": ("z0", "final", "pooled"),
    "model.coupling": ("scalar", "rank1", "full"),
    "model.range_mode": ("signed", "unit"),
    "compare_model.coupling": ("scalar", "rank1", "full"),
    "compare_model.range_mode": ("signed", "unit"),
    "solver.method": ("rk4", "dopri5"),
    "solver.eval_method": ("rk4", "dopri5"),
    "training.loss": ("masked_mse", "gaussian_nll", "elbo", "bce", "cross_entropy"),
}

_NULLABLE_SECTIONS = {
    "data.synthetic": _SYNTHETIC_DEFAULTS,
    "data.csv": _CSV_DEFAULTS,
    "compare_model": _MODEL_DEFAULTS,
}


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{here}'")
        base = defaults[key]
        if here in _NULLABLE_SECTIONS:
            if value is None:
                out[key] = None
            elif isinstance(value, dict):
                out[key] = _merge(_NULLABLE_SECTIONS[here], value, here)
            else:
                raise ConfigError(f"'{here}' must be an object or null")
        elif isinstance(base, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{here}' must be an object")
            out[key] = _merge(base, value, here)
        else:
            out[key] = value
    return out


def _check_scalar(path: str, value, want: str) -> None:
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "pair": lambda v: (isinstance(v, (list, tuple)) and len(v) == 2
                           and all(isinstance(x, (int, float)) for x in v)),
    }[want]
    if not ok(value):
        raise ConfigError(f"'{path}' must be a {want}, got {value!r}")


_TYPES = {
    "version": "int",
    "task.kind": "str",
    "task.extrapolation_cut": "number",
    "task.classifier_input": "str",
    "solver.method": "str",
    "solver.rtol": "number",
    "solver.atol": "number",
    "solver.max_steps": "int",
    "solver.initial_step": "number",
    "solver.eval_method": "str",
    "solver.eval_rtol": "number",
    "solver.eval_atol": "number",
    "training.lr": "number",
    "training.decay": "number",
    "training.epochs": "int",
    "training.batch_size": "int",
    "training.seed": "int",
    "training.patience": "int",
    "training.loss": "str",
    "training.kl_weight": "number",
    "training.kl_warmup_epochs": "int",
    "training.obs_noise_std": "number",
    "training.clip_norm": "number",
    "data.val_fraction": "number",
    "data.test_fraction": "number",
    "data.normalize": "bool",
}

_MODEL_TYPES = {
    "temporal": "bool",
    "coupling": "str",
    "range_mode": "str",
    "residual": "bool",
    "per_weight_freq": "bool",
    "temporal_gru": "bool",
    "latent_dim": "int",
    "enc_hidden": "int",
    "enc_ode_width": "int",
    "enc_ode_layers": "int",
    "dec_ode_width": "int",
    "dec_ode_layers": "int",
    "coupling_cap": "int",
    "stream_threshold": "int",
}


def _validate(cfg: dict) -> None:
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']}")

    def get(path):
        node = cfg
        for part in path.split("."):
            node = node[part]
        return node

    for path, want in _TYPES.items():
        _check_scalar(path, get(path), want)
    for section in ("model", "compare_model"):
        block = cfg.get(section)
        if block is None:
            continue
        for key, want in _MODEL_TYPES.items():
            _check_scalar(f"{section}.{key}", block[key], want)
        for key in ("feature_dim", "n_classes"):
            v = block[key]
            if v is not None:
                _check_scalar(f"{section}.{key}", v, "int")
    for path, choices in _CHOICES.items():
        parts = path.split(".")
        node = cfg
        for part in parts[:-1]:
            node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                break
        if node is None:
            continue
        value = node[parts[-1]]
        if value not in choices:
            raise ConfigError(f"'{path}' must be one of {choices}, got {value!r}")
    if cfg["solver"]["fixed_step"] is not None:
        _check_scalar("solver.fixed_step", cfg["solver"]["fixed_step"], "number")
    if cfg["solver"]["eval_fixed_step"] is not None:
        _check_scalar("solver.eval_fixed_step", cfg["solver"]["eval_fixed_step"], "number")
    syn = cfg["data"]["synthetic"]
    if syn is not None:
        for key in ("t_span", "freq_range", "amp_range", "jump_range"):
            _check_scalar(f"data.synthetic.{key}", syn[key], "pair")
        for key in ("n_samples", "t_grid"):
            _check_scalar(f"data.synthetic.{key}", syn[key], "int")
        for key in ("noise_sigma", "discontinuity_prob", "sparsity"):
            _check_scalar(f"data.synthetic.{key}", syn[key], "number")
        if syn["seed"] is not None:
            _check_scalar("data.synthetic.seed", syn["seed"], "int")
    if syn is None and cfg["data"]["csv"] is None:
        raise ConfigError("data section needs either 'synthetic' or 'csv'")
    if cfg["data"]["csv"] is not None and cfg["data"]["csv"]["train"] is None:
        raise ConfigError("data.csv.train path is required")


def canonicalize(user_cfg: dict) -> dict:
    """Reject unknown keys, fill every default, validate field values."""
    if not isinstance(user_cfg, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULTS, user_cfg, "")
    _validate(cfg)
    return cfg


def load_config(path: str) -> dict:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    return canonicalize(raw)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# assembly


def synthetic_spec_from_cfg(data_cfg: dict, root_seed: int) -> SyntheticSpec:
    raw = data_cfg["synthetic"]
    seed = raw["seed"]
    if seed is None:
        seed = derive_seed(root_seed, "data")
    return SyntheticSpec(
        n_samples=raw["n_samples"],
        t_grid=raw["t_grid"],
        t_span=tuple(raw["t_span"]),
        freq_range=tuple(raw["freq_range"]),
        amp_range=tuple(raw["amp_range"]),
        noise_sigma=raw["noise_sigma"],
        discontinuity_prob=raw["discontinuity_prob"],
        jump_range=tuple(raw["jump_range"]),
        sparsity=raw["sparsity"],
        seed=seed,
    )


def load_split(cfg: dict) -> DatasetSplit:
    data_cfg = cfg["data"]
    root_seed = cfg["training"]["seed"]
    if data_cfg["synthetic"] is not None:
        series = generate_synthetic(synthetic_spec_from_cfg(data_cfg, root_seed))
        split = split_dataset(series, data_cfg["val_fraction"],
                              data_cfg["test_fraction"],
                              derive_seed(root_seed, "split"))
    else:
        paths = data_cfg["csv"]
        train = load_csv_with_heldout(paths["train"])
        if paths["val"] or paths["test"]:
            val = load_csv_with_heldout(paths["val"]) if paths["val"] else []
            test = load_csv_with_heldout(paths["test"]) if paths["test"] else []
            split = DatasetSplit(train=train, validation=val, test=test)
        else:
            split = split_dataset(train, data_cfg["val_fraction"],
                                  data_cfg["test_fraction"],
                                  derive_seed(root_seed, "split"))
    if data_cfg["normalize"]:
        normalize(split)
    else:
        d = split.train[0].n_features if split.train else 1
        split.norm_mean = np.zeros(d)
        split.norm_std = np.ones(d)
    return split


def build_model(model_cfg: dict, feature_dim: int, root_seed: int,
                n_classes: Optional[int] = None) -> LatentOdeModel:
    """Deterministically construct the model described by a config block."""
    rng = np.random.default_rng(derive_seed(root_seed, "init"))
    options = LayerOptions(
        coupling_mode=model_cfg["coupling"],
        range_mode=model_cfg["range_mode"],
        residual=model_cfg["residual"],
        per_weight_freq=model_cfg["per_weight_freq"],
        coupling_cap=model_cfg["coupling_cap"],
        stream_threshold=model_cfg["stream_threshold"],
    )
    temporal = model_cfg["temporal"]
    enc_dyn = OdeFuncNet("encoder.dynamics", model_cfg["enc_hidden"],
                         model_cfg["enc_ode_width"], model_cfg["enc_ode_layers"],
                         temporal, rng, options)
    encoder = OdeRnnEncoder("encoder", feature_dim, model_cfg["enc_hidden"],
                            model_cfg["latent_dim"], enc_dyn, rng,
                            gru_temporal=temporal and model_cfg["temporal_gru"],
                            options=options)
    dec_dyn = OdeFuncNet("decoder.dynamics", model_cfg["latent_dim"],
                         model_cfg["dec_ode_width"], model_cfg["dec_ode_layers"],
                         temporal, rng, options)
    classes = n_classes if n_classes is not None else model_cfg["n_classes"]
    return LatentOdeModel(feature_dim, model_cfg["latent_dim"], encoder,
                          dec_dyn, rng, n_classes=classes)


def data_span(split: DatasetSplit) -> float:
    lo = min(float(s.times[0]) for s in split.all_series())
    hi = max(float(s.times[-1]) for s in split.all_series())
    if hi <= lo:
        raise InvalidSpecError("dataset has no positive time span")
    return hi - lo


def solver_configs(cfg: dict, span: float) -> tuple[SolverConfig, SolverConfig]:
    """(training solver, evaluation solver); null rk4 steps become span/20."""
    sv = cfg["solver"]
    train_step = sv["fixed_step"]
    if sv["method"] == "rk4" and train_step is None:
        train_step = span / 20.0
    train = SolverConfig(method=sv["method"], fixed_step=train_step,
                         rtol=sv["rtol"], atol=sv["atol"],
                         max_steps=sv["max_steps"], initial_step=sv["initial_step"])
    eval_step = sv["eval_fixed_step"]
    if sv["eval_method"] == "rk4" and eval_step is None:
        eval_step = span / 20.0
    eval_ = SolverConfig(method=sv["eval_method"], fixed_step=eval_step,
                         rtol=sv["eval_rtol"], atol=sv["eval_atol"],
                         max_steps=sv["max_steps"], initial_step=sv["initial_step"])
    return train, eval_


def loss_spec_from_cfg(cfg: dict) -> LossSpec:
    tr = cfg["training"]
    return LossSpec(kind=tr["loss"], obs_noise_std=tr["obs_noise_std"],
                    kl_weight=tr["kl_weight"], kl_warmup_epochs=tr["kl_warmup_epochs"])


def train_settings_from_cfg(cfg: dict, span: float, t_start: float) -> TrainSettings:
    tr = cfg["training"]
    task = cfg["task"]
    cut = None
    if task["kind"] == "extrapolation":
        cut = t_start + task["extrapolation_cut"] * span
    return TrainSettings(
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        seed=tr["seed"],
        patience=tr["patience"],
        clip_norm=tr["clip_norm"],
        task=task["kind"],
        classifier_input=task["classifier_input"],
        extrapolation_cut=cut,
    )


class RunContext:
    """Everything one training or evaluation run needs, built from a config."""

    def __init__(self, cfg: dict, model_section: str = "model"):
        self.cfg = cfg
        self.split = load_split(cfg)
        feature_dim = self.split.all_series()[0].n_features
        model_cfg = cfg[model_section]
        if model_cfg is None:
            raise ConfigError(f"config has no '{model_section}' section")
        declared = model_cfg["feature_dim"]
        if declared is not None and declared != feature_dim:
            raise ConfigError(
                f"config declares feature_dim={declared} but data has {feature_dim}")
        n_classes = model_cfg["n_classes"]
        if cfg["task"]["kind"] in ("classification", "per_time_classification") \
                and n_classes is None:
            n_classes = 2
        self.model = build_model(model_cfg, feature_dim,
                                 cfg["training"]["seed"], n_classes=n_classes)
        times_lo = min(float(s.times[0]) for s in self.split.all_series())
        span = data_span(self.split)
        self.solver_train, self.solver_eval = solver_configs(cfg, span)
        self.loss_spec = loss_spec_from_cfg(cfg)
        self.settings = train_settings_from_cfg(cfg, span, times_lo)
        # echo the inferred feature width so checkpoints are self-contained
        self.cfg_echo = copy.deepcopy(cfg)
        self.cfg_echo[model_section]["feature_dim"] = feature_dim
        if n_classes is not None:
            self.cfg_echo[model_section]["n_classes"] = n_classes
