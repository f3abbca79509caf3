import csv
import json

import numpy as np
import pytest
import yaml

from sdpf.cli import main
from sdpf.config import DEFAULT_CONFIG, ExperimentConfig, load_config
from sdpf.core import ContractError, TrajectoryDataset
from sdpf.experiment import SWEEP_COLUMNS, label_ratio_sweep

TINY = {
    "seed": 5,
    "environment": {"kind": "linear_gaussian", "T": 6, "n_train": 3, "n_val": 2, "n_test": 2, "label_ratio": 0.5},
    "model": {"noise_scales": [0.5], "hidden": [4], "feature_dim": 3},
    "filter": {"n_particles": 4, "n_particles_eval": 4, "block_length": 3, "init": {"mode": "truth", "std": [0.5]}},
    "optimizer": {"kind": "adam", "lr": 1e-3},
    "train": {"epochs": 1, "batch_size": 3},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_defaults_load_and_validate():
    cfg = load_config(None)
    assert cfg.data["loss"]["lambda2"] == DEFAULT_CONFIG["loss"]["lambda2"]
    assert cfg.filter_config().n_particles == DEFAULT_CONFIG["filter"]["n_particles"]
    assert cfg.filter_config(evaluation=True).n_particles == DEFAULT_CONFIG["filter"]["n_particles_eval"]


def test_unknown_sections_and_bad_values_are_rejected():
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"bogus": {}})
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"environment": {"kind": "maze"}})
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"optimizer": {"lr": -1.0}})


def test_overrides_and_dump_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY).with_overrides(seed=9, label_ratio=1.0, lambda2=0.0)
    assert cfg.seed == 9 and cfg.loss_config().lambda2 == 0.0
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()


def test_datasets_are_a_function_of_the_seed():
    a = ExperimentConfig.from_dict(TINY).datasets()
    b = ExperimentConfig.from_dict(TINY).datasets()
    assert all(x.to_bytes() == y.to_bytes() for x, y in zip(a, b))
    assert a[0].label_mask.sum() == 3 * 3
    assert a[1].label_mask.all()
    c = ExperimentConfig.from_dict(TINY).with_overrides(seed=6).datasets()
    assert a[0].to_bytes() != c[0].to_bytes()


def test_model_widths_follow_the_dataset():
    cfg = ExperimentConfig.from_dict({})
    train, _, _ = ExperimentConfig.from_dict({**TINY, "environment": {"kind": "beacon_world", "T": 3,
                                                                      "n_train": 1, "n_val": 1,
                                                                      "n_test": 1}}).datasets()
    model = cfg.build_model(train)
    assert model.dynamic.f_spec.widths[0] == 4 + 3
    assert model.measurement.h_spec.widths[0] == 12


def test_sweep_cardinality_and_determinism(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    ratios, seeds = [0.1, 0.25, 0.5, 1.0], [0, 1]
    rows = label_ratio_sweep(cfg, ratios, seeds, tmp_path / "a.csv")
    assert len(rows) == 4 * len(seeds) * 2
    with open(tmp_path / "a.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == SWEEP_COLUMNS and len(table) == len(rows)
    assert {r["method"] for r in table} == {"sdpf", "baseline"}
    label_ratio_sweep(cfg, ratios, seeds, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with pytest.raises(ValueError):
        label_ratio_sweep(cfg, [], seeds, tmp_path / "c.csv")


def test_cli_generate_train_evaluate(tmp_path, tiny_config, capsys):
    assert main(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "data")]) == 0
    ds = TrajectoryDataset.load(tmp_path / "data" / "train.sdpf")
    assert len(ds) == 3
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "run"), "--lambda2", "0.1"]) == 0
    for name in ("metrics.csv", "checkpoint_best.bin", "config.yaml"):
        assert (tmp_path / "run" / name).exists()
    capsys.readouterr()
    assert main(["evaluate", "--config", str(tiny_config), "--checkpoint",
                 str(tmp_path / "run" / "checkpoint_best.bin")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n"] == 2 and np.isfinite(summary["rmse_last_step"])


def test_cli_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is True
    # an impossible tolerance must fail the check
    assert main(["gradcheck", "--tolerance", "0"]) == 1


def test_cli_oracle_exit_codes(capsys):
    args = ["oracle", "--dim", "1d", "--particles", "200", "--trajectories", "3", "--steps", "10"]
    assert main(args + ["--tolerance", "1.0"]) == 0
    assert main(args + ["--tolerance", "1e-9"]) == 1


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_input_statistics_use_labelled_states_only():
    cfg = ExperimentConfig.from_dict({**TINY, "environment": {**TINY["environment"], "kind": "beacon_world",
                                                              "T": 20, "n_train": 4},
                                      "model": {"hidden": [4], "feature_dim": 3}})
    train, _, _ = cfg.datasets()
    model = cfg.build_model(train)
    labelled = train.true_states[train.label_mask]
    spec = model.measurement.hhat_spec
    assert spec.input_shift[:2] == pytest.approx(tuple(labelled[:, :2].mean(axis=0)))
    assert spec.input_scale[:2] == pytest.approx(tuple(labelled[:, :2].std(axis=0)))
    # unlabelled truths do not leak into the model
    hidden = train.true_states.copy()
    hidden[~train.label_mask] += 100.0
    leaked = TrajectoryDataset(train.observations, train.actions, hidden, train.label_mask, train.angular_mask)
    assert cfg.build_model(leaked).measurement.hhat_spec == spec
    assert model.measurement.h_spec.input_shift == pytest.approx(
        tuple(train.observations.reshape(-1, train.observations.shape[-1]).mean(axis=0)))
