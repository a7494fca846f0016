"""
Checkpoint container.

A checkpoint is a zip archive (stored, uncompressed) with one `<name>.npy`
entry per tensor, little-endian float64, plus `__manifest__.json`. Entries are
written in sorted order with a fixed timestamp so identical state gives
identical bytes.
"""

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from core.exceptions import CheckpointError
from pipeline.data import EncoderNormalizer
from pipeline.inference import AdamW, VariationalParams
from pipeline.models import GenerativeParams
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

MANIFEST_ENTRY = "__manifest__.json"
FORMAT_VERSION = 1
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    manifest: Dict[str, Any] = field(default_factory=dict)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray],
                    manifest: Mapping[str, Any]) -> Path:
    """Write tensors and manifest atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")

    payload = {"format_version": FORMAT_VERSION, **manifest}
    try:
        with zipfile.ZipFile(tmp, "w") as archive:
            for name in sorted(tensors):
                buffer = io.BytesIO()
                np.lib.format.write_array(buffer, np.ascontiguousarray(tensors[name], dtype="<f8"),
                                          allow_pickle=False)
                archive.writestr(_entry(f"{name}.npy"), buffer.getvalue())
            archive.writestr(_entry(MANIFEST_ENTRY),
                             json.dumps(payload, sort_keys=True, indent=2).encode("utf-8"))
        tmp.replace(path)
    except (OSError, TypeError, ValueError) as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"Cannot write checkpoint: {e}", field="checkpoint", value=str(path))

    logger.debug(f"checkpoint {path.name} written ({len(tensors)} tensors, "
                 f"sha256 {file_hash(path)[:12]})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("Checkpoint not found", field="checkpoint", value=str(path))
    try:
        with zipfile.ZipFile(path) as archive:
            manifest = json.loads(archive.read(MANIFEST_ENTRY).decode("utf-8"))
            tensors = {}
            for name in archive.namelist():
                if name == MANIFEST_ENTRY:
                    continue
                with archive.open(name) as handle:
                    tensors[name[:-len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(handle.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"Corrupt checkpoint: {e}", field="checkpoint", value=str(path))

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("Unsupported checkpoint format", field="format_version",
                              value=str(manifest.get("format_version")))
    return Checkpoint(tensors=tensors, manifest=manifest)


def file_hash(path: Union[str, Path]) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# =============================================================================
# MODEL STATE
# =============================================================================

@dataclass
class RestoredModel:
    gp: GenerativeParams
    vp: VariationalParams
    normalizer: EncoderNormalizer
    manifest: Dict[str, Any]
    optimizer_arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))


def save_model(path: Union[str, Path], gp: GenerativeParams, vp: VariationalParams,
               normalizer: EncoderNormalizer, extra: Optional[Mapping[str, Any]] = None,
               optimizer: Optional[AdamW] = None) -> Path:
    """Parameters keyed by canonical name, e.g. decoder.layer0.weight, theta_d, q.mask_logits."""
    tensors = {name: p.data for name, p in gp.named_parameters().items()}
    tensors.update({name: p.data for name, p in vp.named_parameters().items()})

    manifest: Dict[str, Any] = {
        "generative": gp.manifest(),
        "variational": vp.manifest(),
        "normalizer": normalizer.to_dict(),
        **(extra or {}),
    }
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        manifest["optimizer_step"] = optimizer.state.step
    return save_checkpoint(path, tensors, manifest)


def load_model(path: Union[str, Path]) -> RestoredModel:
    checkpoint = load_checkpoint(path)
    manifest = checkpoint.manifest
    try:
        gp = GenerativeParams.from_manifest(manifest["generative"])
        vp = VariationalParams.from_manifest(manifest["variational"])
        normalizer = EncoderNormalizer.from_dict(manifest["normalizer"])
    except KeyError as e:
        raise CheckpointError(f"Manifest is missing {e}", field="manifest", value=str(path))

    for name, param in {**gp.named_parameters(), **vp.named_parameters()}.items():
        if name not in checkpoint.tensors:
            raise CheckpointError(f"Missing tensor '{name}'", field=name, value=str(path))
        value = checkpoint.tensors[name]
        if value.shape != param.shape:
            raise CheckpointError(f"Tensor '{name}' has shape {value.shape}, expected {param.shape}",
                                  field=name, value=str(path))
        param.data = value.astype(np.float64)

    optimizer_arrays = {k: v for k, v in checkpoint.tensors.items() if k.startswith("adam.")}
    return RestoredModel(gp=gp, vp=vp, normalizer=normalizer, manifest=manifest,
                         optimizer_arrays=optimizer_arrays)
