"""Experiment configuration: one YAML document describing environment, model, filter, loss and training.

Every seed used by a run is derived from the master ``seed`` so a resolved
config fully determines the run.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import ContractError, TrajectoryDataset
from .envs import (
    BeaconWorldSpec,
    LinearGaussianSpec,
    beacon_stationary_distribution,
    generate_beacon_world,
    generate_linear_gaussian,
    mask_labels,
)
from .filter import FilterConfig, InitProtocol
from .models import (
    DynamicModelConfig,
    InitialDistribution,
    LearnedModel,
    MeasurementModelConfig,
    MlpSpec,
    state_feature_width,
    state_features,
)
from .objectives import LossConfig
from .train import OptimizerState, TrainConfig, derive_seed

__all__ = [
    "DEFAULT_CONFIG",
    "ExperimentConfig",
    "load_config",
    "SEED_KEYS",
]

# Purposes mixed with the master seed to derive every sub-seed.
SEED_KEYS = {
    "train_data": 1,
    "val_data": 2,
    "test_data": 3,
    "labels": 4,
    "f_init": 5,
    "h_init": 6,
    "hhat_init": 7,
    "eval": 8,
}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "environment": {
        "kind": "beacon_world",
        "spec": {},
        "T": 100,
        "n_train": 100,
        "n_val": 20,
        "n_test": 50,
        "label_ratio": 0.1,
    },
    "model": {
        "noise_scales": [0.1, 0.1, 0.05],
        "hidden": [32, 32],
        "feature_dim": 16,
        "activation": "tanh",
        "epsilon_c": 1e-6,
        "state_feature_mode": "sincos",
    },
    "filter": {
        "n_particles": 30,
        "n_particles_eval": 100,
        "block_length": 20,
        "resample_threshold": None,
        "init": {"mode": "truth", "std": [0.3, 0.3, 0.5]},
    },
    "loss": {"lambda1": 1.0, "lambda2": 0.1, "auto_balance": False},
    "optimizer": {"kind": "adam", "lr": 1e-3},
    "train": {"epochs": 30, "batch_size": 10, "val_every": 1, "patience": 10},
    "evaluation": {"heading_mode": "wrapped"},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """A resolved experiment document (defaults merged with the user's file)."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def from_dict(cls, d: dict | None) -> ExperimentConfig:
        unknown = set(d or {}) - set(DEFAULT_CONFIG)
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULT_CONFIG, d or {}))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        env = self.data["environment"]
        if env["kind"] not in ("beacon_world", "linear_gaussian"):
            raise ContractError(f"unknown environment kind {env['kind']!r}")
        if env["T"] < 2:
            raise ContractError("T must be at least 2")
        for key in ("n_train", "n_val", "n_test"):
            if env[key] < 1:
                raise ContractError(f"{key} must be positive")
        # constructing the typed configs runs their own checks
        self.filter_config()
        self.loss_config()
        self.optimizer_state()
        self.train_config()

    def with_overrides(self, seed=None, label_ratio=None, lambda2=None) -> ExperimentConfig:
        d = copy.deepcopy(self.data)
        if seed is not None:
            d["seed"] = int(seed)
        if label_ratio is not None:
            d["environment"]["label_ratio"] = float(label_ratio)
        if lambda2 is not None:
            d["loss"]["lambda2"] = float(lambda2)
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.data, sort_keys=True))

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def sub_seed(self, purpose: str) -> int:
        return derive_seed(self.seed, SEED_KEYS[purpose])

    # environment

    def env_spec(self):
        env = self.data["environment"]
        spec = dict(env.get("spec") or {})
        if env["kind"] == "beacon_world":
            return BeaconWorldSpec.from_dict(spec)
        return LinearGaussianSpec.from_dict(spec) if spec else LinearGaussianSpec.scalar()

    def datasets(self) -> tuple[TrajectoryDataset, TrajectoryDataset, TrajectoryDataset]:
        """``(train, val, test)``; only the training set has its labels masked."""
        env = self.data["environment"]
        spec = self.env_spec()
        gen = generate_beacon_world if env["kind"] == "beacon_world" else generate_linear_gaussian
        train = gen(spec, env["T"], env["n_train"], self.sub_seed("train_data"))
        val = gen(spec, env["T"], env["n_val"], self.sub_seed("val_data"))
        test = gen(spec, env["T"], env["n_test"], self.sub_seed("test_data"))
        train = mask_labels(train, env["label_ratio"], self.sub_seed("labels"))
        return train, val, test

    # model

    def initial_distribution(self, dataset: TrajectoryDataset) -> InitialDistribution:
        env = self.data["environment"]
        spec = self.env_spec()
        if env["kind"] == "beacon_world":
            return beacon_stationary_distribution(spec)
        return InitialDistribution.gaussian(spec.init_mean, tuple(math.sqrt(v) for v in spec.init_var))

    def build_model(self, dataset: TrajectoryDataset) -> LearnedModel:
        m = self.data["model"]
        mask = np.asarray(dataset.angular_mask, dtype=bool)
        d_s = mask.size
        d_a = dataset.actions.shape[-1]
        d_o = dataset.observations.shape[-1]
        width = d_s + int(mask.sum()) if m["state_feature_mode"] == "sincos" else d_s
        hidden = tuple(int(h) for h in m["hidden"])
        act = m["activation"]
        s_shift, s_scale = _state_feature_stats(dataset, m["state_feature_mode"])
        a_shift, a_scale = _stats(dataset.actions[:, 1:].reshape(-1, d_a))
        o_shift, o_scale = _stats(dataset.observations.reshape(-1, d_o))
        f_spec = MlpSpec((width + d_a, *hidden, d_s), act, self.sub_seed("f_init"), zero_output=True,
                         input_shift=s_shift + a_shift, input_scale=s_scale + a_scale)
        h_spec = MlpSpec((d_o, *hidden, m["feature_dim"]), act, self.sub_seed("h_init"),
                         input_shift=o_shift, input_scale=o_scale)
        hhat_spec = MlpSpec((width, *hidden, m["feature_dim"]), act, self.sub_seed("hhat_init"),
                            input_shift=s_shift, input_scale=s_scale)
        if len(m["noise_scales"]) != d_s:
            raise ContractError(f"noise_scales has {len(m['noise_scales'])} entries, state has {d_s}")
        dynamic = DynamicModelConfig(tuple(m["noise_scales"]), f_spec, m["state_feature_mode"])
        measurement = MeasurementModelConfig(h_spec, hhat_spec, float(m["epsilon_c"]), m["state_feature_mode"])
        return LearnedModel(dynamic, measurement, self.initial_distribution(dataset), mask)

    # filter, loss, optimisation

    def filter_config(self, evaluation: bool = False) -> FilterConfig:
        f = self.data["filter"]
        init = f.get("init") or {"mode": "prior"}
        std = init.get("std")
        n = f["n_particles_eval"] if evaluation and f.get("n_particles_eval") else f["n_particles"]
        return FilterConfig(
            n_particles=int(n),
            resample_threshold=f.get("resample_threshold"),
            block_length=int(f["block_length"]),
            seed=self.seed,
            init=InitProtocol(init["mode"], None if std is None else tuple(float(v) for v in std)),
        )

    def loss_config(self) -> LossConfig:
        lo = self.data["loss"]
        scales = lo.get("state_scales")
        return LossConfig(float(lo["lambda1"]), float(lo["lambda2"]), bool(lo.get("auto_balance", False)),
                          None if scales is None else tuple(scales))

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(**self.data["optimizer"])

    def train_config(self) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            val_every=int(t.get("val_every", 1)),
            patience=t.get("patience"),
            seed=self.seed,
            clip_norm=t.get("clip_norm", 10.0),
            log_wall_time=bool(t.get("log_wall_time", False)),
        )


def _stats(x: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-column mean and std (std below 1e-8 replaced by 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return (0.0,) * x.shape[1], (1.0,) * x.shape[1]
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    return tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in sd)


def _state_feature_stats(dataset: TrajectoryDataset, mode: str):
    """Input statistics of the state features, from labelled steps only."""
    if dataset.true_states is None:
        labelled = np.zeros((0, dataset.state_dim))
    else:
        labelled = dataset.true_states[dataset.label_mask]
    return _stats(state_features(labelled, dataset.angular_mask, mode).data if labelled.size
                  else np.zeros((0, state_feature_width(dataset.angular_mask, mode))))


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment document; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig.from_dict({})
    blob = yaml.safe_load(Path(path).read_text())
    if blob is not None and not isinstance(blob, dict):
        raise ContractError("config document must be a mapping")
    return ExperimentConfig.from_dict(blob)
