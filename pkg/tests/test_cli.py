"""End-to-end runs of the sams-vae command on tiny configurations."""

import json

import numpy as np
import pandas as pd
import pytest

from pipeline.checkpoint import load_model
from pipeline.run import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main

SIM = """
sim_latent_dim = 3
sim_genes = 6
sim_perturbations = 3
sim_samples_per_treatment = 8
sim_val_samples_per_treatment = 2
sim_hidden = 5, 5
sim_pilot_cells = 200
"""

TRAIN = """
latent_dim = 3          # small enough to run in a test
encoder_hidden = 8
decoder_hidden = 8
embedding_hidden = 4
batch_size = 8
learning_rate = 0.01
checkpoint_every = 2
eval_ate_particles = 4
"""

DATASET_FILES = ("X.csv", "D.csv", "obs.csv", "true_masks.csv", "true_embeddings.csv",
                 "sim_manifest.json", "decoder.ckpt")


def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture
def sim_cfg(tmp_path):
    return write_config(tmp_path / "sim.cfg", SIM)


@pytest.fixture
def dataset(tmp_path, sim_cfg):
    out = tmp_path / "data"
    assert main(["simulate", "--config", sim_cfg, "--out", str(out)]) == EXIT_OK
    return out


def train_cfg(tmp_path, steps=4, extra=""):
    return write_config(tmp_path / f"train{steps}.cfg", TRAIN + f"steps = {steps}\n" + extra)


@pytest.fixture
def trained(tmp_path, dataset):
    run = tmp_path / "run"
    code = main(["train", "--config", train_cfg(tmp_path), "--dataset", str(dataset),
                 "--out", str(run)])
    assert code == EXIT_OK
    return run


class TestSimulate:
    def test_same_seed_gives_identical_files(self, tmp_path, sim_cfg, dataset):
        again = tmp_path / "again"
        assert main(["simulate", "--config", sim_cfg, "--out", str(again)]) == EXIT_OK
        for name in DATASET_FILES:
            assert (dataset / name).read_bytes() == (again / name).read_bytes(), name

    def test_seed_flag_changes_the_data(self, tmp_path, sim_cfg, dataset):
        other = tmp_path / "other"
        assert main(["simulate", "--config", sim_cfg, "--seed", "11", "--out", str(other)]) == EXIT_OK
        assert (dataset / "X.csv").read_bytes() != (other / "X.csv").read_bytes()

    def test_invalid_noise_fraction(self, tmp_path):
        cfg = write_config(tmp_path / "bad.cfg", SIM + "sim_noise_fraction = 1.5\n")
        out = tmp_path / "never"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()

    def test_unwritable_output_is_a_runtime_failure(self, tmp_path, sim_cfg):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        code = main(["simulate", "--config", sim_cfg, "--out", str(blocker / "out")])
        assert code == EXIT_RUNTIME


class TestArguments:
    def test_unknown_flag(self):
        assert main(["train", "--bogus"]) == EXIT_INVALID

    def test_missing_command(self):
        assert main([]) == EXIT_INVALID

    def test_unknown_config_key(self, tmp_path):
        cfg = write_config(tmp_path / "typo.cfg", "sim_noise_fracton = 0.2\n")
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_INVALID

    def test_train_needs_a_dataset(self, tmp_path):
        assert main(["train", "--config", train_cfg(tmp_path), "--out", str(tmp_path / "r")]) \
            == EXIT_INVALID

    def test_missing_dataset_directory(self, tmp_path):
        code = main(["train", "--config", train_cfg(tmp_path), "--dataset",
                     str(tmp_path / "absent"), "--out", str(tmp_path / "r")])
        assert code == EXIT_INVALID


class TestTrain:
    def test_writes_metrics_and_checkpoints(self, trained):
        metrics = pd.read_csv(trained / "metrics.csv")
        assert list(metrics.columns) == ["step", "train_neg_elbo", "val_elbo", "wall_ms"]
        assert list(metrics["step"]) == [2, 4]
        assert np.all(np.isfinite(metrics["val_elbo"]))
        assert (trained / "best.ckpt").is_file()
        assert load_model(trained / "last.ckpt").step == 4

    def test_resume_matches_an_uninterrupted_run(self, tmp_path, dataset, trained):
        longer = train_cfg(tmp_path, steps=6)
        assert main(["train", "--config", longer, "--dataset", str(dataset), "--out", str(trained),
                     "--resume"]) == EXIT_OK
        assert list(pd.read_csv(trained / "metrics.csv")["step"]) == [2, 4, 6]

        straight = tmp_path / "straight"
        assert main(["train", "--config", longer, "--dataset", str(dataset),
                     "--out", str(straight)]) == EXIT_OK
        resumed, direct = load_model(trained / "last.ckpt"), load_model(straight / "last.ckpt")
        for name, p in direct.vp.named_parameters().items():
            np.testing.assert_array_equal(resumed.vp.named_parameters()[name].data, p.data)
        for name, p in direct.gp.named_parameters().items():
            np.testing.assert_array_equal(resumed.gp.named_parameters()[name].data, p.data)

    def test_counts_likelihood_on_gaussian_data(self, tmp_path, dataset):
        cfg = train_cfg(tmp_path, extra="likelihood = counts\n")
        assert main(["train", "--config", cfg, "--dataset", str(dataset),
                     "--out", str(tmp_path / "r")]) == EXIT_INVALID


class TestEvalAndExport:
    def test_report(self, tmp_path, dataset, trained):
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--dataset", str(dataset),
                     "--K", "3", "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads((out / "eval_report.json").read_text())
        assert report["iwelbo"]["K"] == 3
        assert report["iwelbo"]["split"] == "test"
        assert 0.0 <= report["mask_f1"] <= 1.0
        assert report["ate_pearson"]["pooled"] is None

    def test_ate_with_control(self, tmp_path, dataset, trained):
        out = tmp_path / "eval"
        code = main(["eval", "--config", train_cfg(tmp_path), "--checkpoint",
                     str(trained / "best.ckpt"), "--dataset", str(dataset), "--K", "2",
                     "--ate", "--control", "p0", "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads((out / "eval_report.json").read_text())
        assert set(report["ate_pearson"]["per_perturbation"]) == {"p1", "p2"}
        ate = pd.read_csv(out / "ate.csv", index_col=0)
        assert list(ate.index) == ["p1", "p2"] or list(ate.index) == ["p2", "p1"]
        assert ate.shape[1] == 6

    def test_ate_without_control(self, tmp_path, dataset, trained):
        code = main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--dataset", str(dataset),
                     "--ate", "--out", str(tmp_path / "eval")])
        assert code == EXIT_INVALID

    def test_export_latents(self, tmp_path, trained):
        out = tmp_path / "latents"
        assert main(["export-latents", "--checkpoint", str(trained / "best.ckpt"),
                     "--out", str(out)]) == EXIT_OK
        masks = pd.read_csv(out / "masks.csv", index_col=0)
        assert list(masks.index) == ["p0", "p1", "p2"]
        assert masks.to_numpy().min() >= 0.0 and masks.to_numpy().max() <= 1.0
        assert pd.read_csv(out / "embeddings.csv", index_col=0).shape == (3, 3)

    def test_cpa_exports_unit_masks(self, tmp_path, dataset):
        run = tmp_path / "cpa"
        cfg = train_cfg(tmp_path, extra="model = cpa\n")
        assert main(["train", "--config", cfg, "--dataset", str(dataset), "--out", str(run)]) == EXIT_OK
        out = tmp_path / "latents"
        assert main(["export-latents", "--checkpoint", str(run / "best.ckpt"),
                     "--out", str(out)]) == EXIT_OK
        np.testing.assert_array_equal(pd.read_csv(out / "masks.csv", index_col=0).to_numpy(),
                                      np.ones((3, 3)))


def test_recovery_study_appends(tmp_path):
    cfg = write_config(tmp_path / "study.cfg", SIM + TRAIN + """
study_steps = 2
study_samples = 4
study_regimes = fixed-prior
study_hidden = 5
""")
    out = tmp_path / "study"
    for _ in range(2):
        assert main(["recovery-study", "--config", cfg, "--out", str(out)]) == EXIT_OK
    table = pd.read_csv(out / "recovery.csv")
    assert len(table) == 2
    assert set(table["regime"]) == {"fixed-prior"}
    assert (out / "recovery_summary.csv").is_file()


def pipeline_outputs(root, sim_cfg, steps):
    data, run, report = root / "data", root / "run", root / "eval"
    cfg = train_cfg(root, steps=steps)
    assert main(["simulate", "--config", sim_cfg, "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", cfg, "--dataset", str(data), "--out", str(run)]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--checkpoint", str(run / "best.ckpt"),
                 "--dataset", str(data), "--K", "5", "--ate", "--control", "p0",
                 "--out", str(report)]) == EXIT_OK
    metrics = pd.read_csv(run / "metrics.csv").drop(columns="wall_ms")
    return metrics, {name: (report / name).read_bytes()
                     for name in ("eval_report.json", "ate.csv", "de.csv")}


@pytest.mark.parametrize("steps", [4, pytest.param(500, marks=pytest.mark.slow)])
def test_simulate_train_eval_is_deterministic(tmp_path, sim_cfg, steps):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    metrics_a, files_a = pipeline_outputs(tmp_path / "a", sim_cfg, steps)
    metrics_b, files_b = pipeline_outputs(tmp_path / "b", sim_cfg, steps)
    pd.testing.assert_frame_equal(metrics_a, metrics_b, check_exact=True)
    assert files_a == files_b
