"""Shared fixtures: small count and simulated datasets and run configurations."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from core.config import ModelConfig, RunConfig, SimConfig, TrainConfig
from pipeline.data import COUNTS, PerturbDataset, make_splits
from pipeline.simulate import simulate_dataset


def write_dataset_dir(directory: Path, X, D, genes=None, perturbations=None, control=None,
                      split=None) -> Path:
    """CSV dataset layout written by hand, independent of save_dataset."""
    directory.mkdir(parents=True, exist_ok=True)
    X, D = np.asarray(X), np.asarray(D)
    genes = genes or [f"g{j}" for j in range(X.shape[1])]
    perturbations = perturbations or [f"p{t}" for t in range(D.shape[1])]

    x_lines = [",".join(genes)] + [",".join(str(v) for v in row) for row in X.tolist()]
    (directory / "X.csv").write_text("\n".join(x_lines) + "\n")

    d_lines = [f"# control={control}"] if control else []
    d_lines += [",".join(perturbations)] + [",".join(str(int(v)) for v in row) for row in D]
    (directory / "D.csv").write_text("\n".join(d_lines) + "\n")

    if split is not None:
        (directory / "obs.csv").write_text("split\n" + "\n".join(split) + "\n")
    return directory


def counts_dataset(n_per_condition: int = 8, genes: int = 6, seed: int = 0) -> PerturbDataset:
    """ctrl / p1 / p2 single perturbations plus a p1+p2 combination."""
    rng = np.random.default_rng(seed)
    patterns = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1]], dtype=np.float64)
    D = np.repeat(patterns, n_per_condition, axis=0)
    X = rng.poisson(5.0, size=(D.shape[0], genes)).astype(np.float64) + 1.0
    ds = PerturbDataset(X=X, D=D, gene_names=tuple(f"g{j}" for j in range(genes)),
                        perturbation_names=("ctrl", "p1", "p2"),
                        split=np.full(D.shape[0], "train"), mode=COUNTS, control="ctrl",
                        obs=pd.DataFrame(index=range(D.shape[0])))
    return make_splits(ds, (0.5, 0.25, 0.25), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def count_ds():
    return counts_dataset()


@pytest.fixture
def tiny_sim_config():
    return SimConfig(latent_dim=4, genes=8, perturbations=3, samples_per_treatment=10,
                     val_samples_per_treatment=3, hidden=(6, 6), pilot_cells=500, seed=3)


@pytest.fixture
def sim_ds(tiny_sim_config):
    return simulate_dataset(tiny_sim_config)


@pytest.fixture
def small_run_config():
    """Few-step run with narrow networks."""
    config = RunConfig()
    config.model = ModelConfig(kind="sams", latent_dim=3, encoder_hidden=(8,),
                               decoder_hidden=(8,), embedding_hidden=(4,))
    config.train = TrainConfig(batch_size=8, learning_rate=1e-2, steps=6, checkpoint_every=3,
                               seed=0)
    return config
