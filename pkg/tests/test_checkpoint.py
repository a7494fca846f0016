import zipfile

import numpy as np
import pytest

from core.exceptions import CheckpointError
from pipeline.checkpoint import (MANIFEST_ENTRY, file_hash, load_checkpoint, load_model,
                                 save_checkpoint, save_model)
from pipeline.data import EncoderNormalizer
from pipeline.inference import AdamW, VariationalParams
from pipeline.models import GenerativeParams


def small_model(count_ds, seed=0):
    gp = GenerativeParams("sams", count_ds.n_genes, count_ds.n_perturbations, 2,
                          decoder_hidden=(4,), seed=seed, median_library=12.0)
    vp = VariationalParams("sams", "corr-both", count_ds.n_genes, count_ds.n_perturbations, 2,
                           encoder_hidden=(4,), embedding_hidden=(3,), seed=seed + 1)
    return gp, vp, EncoderNormalizer.fit(count_ds)


def test_identical_state_gives_identical_bytes(tmp_path):
    tensors = {"b": np.arange(3.0), "a": np.eye(2)}
    first = save_checkpoint(tmp_path / "one.ckpt", tensors, {"step": 4})
    second = save_checkpoint(tmp_path / "two.ckpt", dict(reversed(list(tensors.items()))),
                             {"step": 4})
    assert file_hash(first) == file_hash(second)


def test_entries_are_sorted_and_little_endian(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", {"z": np.ones(2), "a": np.zeros(1)}, {})
    with zipfile.ZipFile(path) as archive:
        assert archive.namelist() == ["a.npy", "z.npy", MANIFEST_ENTRY]
    checkpoint = load_checkpoint(path)
    assert checkpoint.tensors["z"].dtype == np.dtype("<f8")
    assert checkpoint.manifest["format_version"] == 1


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_corrupt_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_model_roundtrip(tmp_path, count_ds):
    gp, vp, normalizer = small_model(count_ds)
    vp.mask_logits.data = np.full(vp.mask_logits.shape, 1.5)
    gp.log_scale.data = np.linspace(-1.0, 1.0, count_ds.n_genes)
    path = save_model(tmp_path / "m.ckpt", gp, vp, normalizer, extra={"step": 7})

    restored = load_model(path)
    assert restored.step == 7
    assert restored.vp.mode == "corr-both"
    for name, p in {**gp.named_parameters(), **vp.named_parameters()}.items():
        source = restored.gp.named_parameters().get(name) or restored.vp.named_parameters()[name]
        np.testing.assert_array_equal(source.data, p.data)
    np.testing.assert_array_equal(restored.normalizer(count_ds.X), normalizer(count_ds.X))


def test_optimizer_state_is_saved(tmp_path, count_ds):
    gp, vp, normalizer = small_model(count_ds)
    optimizer = AdamW([*gp.parameters(), *vp.parameters()], lr=0.01)
    optimizer.step({p: np.ones_like(p.data) for p in optimizer.params})
    restored = load_model(save_model(tmp_path / "m.ckpt", gp, vp, normalizer, optimizer=optimizer))
    assert restored.manifest["optimizer_step"] == 1
    assert set(restored.optimizer_arrays) == set(optimizer.state_arrays())


def test_shape_mismatch(tmp_path, count_ds):
    gp, vp, normalizer = small_model(count_ds)
    path = save_model(tmp_path / "m.ckpt", gp, vp, normalizer)
    checkpoint = load_checkpoint(path)
    checkpoint.tensors["theta_d"] = np.zeros(1)
    save_checkpoint(path, checkpoint.tensors, checkpoint.manifest)
    with pytest.raises(CheckpointError):
        load_model(path)
