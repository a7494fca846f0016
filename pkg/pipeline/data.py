"""
Perturbation-screen datasets: CSV ingestion, validation, encoder
normalization, library-size scaling and train/val/test splitting.

Directory layout:

    X.csv    header of gene names, one row per cell (integers for counts,
             decimals for simulated data)
    D.csv    header of perturbation names, one row per cell, fields in {0, 1};
             an optional first line `# control=NAME` names the control column
    obs.csv  optional per-cell metadata; a `split` column holds precomputed
             train / val / test tags
"""

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.config import SPLITS
from core.exceptions import (DatasetError, DosageValueError, EmptyLibraryError, MissingFileError,
                             NegativeCountError, RaggedRowError, SplitError)
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

COUNTS = "counts"
GAUSSIAN = "gaussian"
NORMALIZATION_EPS = 1e-8

CONTROL_LINE = re.compile(r"^#\s*control\s*=\s*(?P<name>\S+)\s*$")


# =============================================================================
# DATASET
# =============================================================================

@dataclass(frozen=True, eq=False)
class PerturbDataset:
    """Observation matrix, binary dosages and per-cell split tags."""

    X: np.ndarray
    D: np.ndarray
    gene_names: Tuple[str, ...]
    perturbation_names: Tuple[str, ...]
    split: np.ndarray
    mode: str = COUNTS
    control: Optional[str] = None
    obs: pd.DataFrame = field(default_factory=pd.DataFrame, compare=False)
    library_sizes: Optional[np.ndarray] = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "library_sizes",
                           self.X.sum(axis=1) if self.mode == COUNTS else None)

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_genes(self) -> int:
        return self.X.shape[1]

    @property
    def n_perturbations(self) -> int:
        return self.D.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> "PerturbDataset":
        idx = self.indices(split)
        return replace(self, X=self.X[idx], D=self.D[idx], split=self.split[idx],
                       obs=self.obs.iloc[idx].reset_index(drop=True))

    def perturbation_counts(self, split: str = "train") -> np.ndarray:
        """n_t: number of cells in `split` receiving each perturbation."""
        return self.D[self.indices(split)].sum(axis=0)

    def median_library(self, split: str = "train") -> Optional[float]:
        if self.library_sizes is None:
            return None
        idx = self.indices(split)
        return float(np.median(self.library_sizes[idx if idx.size else slice(None)]))

    def dosage_for(self, names: Sequence[str]) -> np.ndarray:
        """Dosage vector switching on the named perturbations."""
        d = np.zeros(self.n_perturbations)
        for name in names:
            if name not in self.perturbation_names:
                raise DatasetError(f"Unknown perturbation '{name}'", field="perturbation",
                                   value=name,
                                   suggestion=f"Known: {', '.join(self.perturbation_names[:10])}")
            d[self.perturbation_names.index(name)] = 1.0
        return d

    def control_dosage(self) -> Optional[np.ndarray]:
        return None if self.control is None else self.dosage_for([self.control])

    def has_precomputed_split(self) -> bool:
        return "split" in self.obs.columns

    def summary(self) -> Dict[str, object]:
        return {
            "cells": self.n_cells,
            "genes": self.n_genes,
            "perturbations": self.n_perturbations,
            "mode": self.mode,
            "control": self.control,
            **{f"{s}_cells": int((self.split == s).sum()) for s in SPLITS},
        }


# =============================================================================
# LOADING
# =============================================================================

def _field_counts(path: Path, skiprows: int = 0) -> List[int]:
    """Fields per non-blank record, header first."""
    with path.open(encoding="utf-8", newline="") as handle:
        records = csv.reader(handle)
        for _ in range(skiprows):
            next(records, None)
        return [len(record) for record in records if record]


def _read_table(path: Path, skiprows: int = 0) -> pd.DataFrame:
    counts = _field_counts(path, skiprows)
    if not counts:
        raise DatasetError(f"{path.name} is empty", field=path.name)
    width = counts[0]
    for row, n_fields in enumerate(counts[1:], start=1):
        if n_fields != width:
            raise RaggedRowError(f"{path.name} row {row} has {n_fields} fields, header has "
                                 f"{width}", field=path.name, value=str(row))

    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skiprows)
    except pd.errors.ParserError as e:
        raise RaggedRowError(f"{path.name} could not be parsed: {e}", field=path.name)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"{path.name} is empty", field=path.name)


def _to_numeric(frame: pd.DataFrame, path: Path, error_cls=DatasetError) -> np.ndarray:
    # str -> float64 is correctly rounded, so %.17g output reads back bit-exact
    try:
        values = frame.to_numpy(dtype=str).astype(np.float64)
    except ValueError:
        values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        row, col = (int(i) for i in bad[0])
        raise error_cls(f"{path.name} has a non-numeric value at row {row + 1}, column "
                        f"'{frame.columns[col]}'", field=path.name, value=frame.iat[row, col])
    return values


def _read_control(path: Path) -> Tuple[Optional[str], int]:
    with path.open(encoding="utf-8") as handle:
        first = handle.readline().rstrip("\n")
    match = CONTROL_LINE.match(first)
    if match:
        return match.group("name"), 1
    return None, 0


def detect_mode(X: np.ndarray) -> str:
    return COUNTS if np.all(np.equal(np.mod(X, 1.0), 0.0)) else GAUSSIAN


def load_dataset(directory: Union[str, Path], control: Optional[str] = None,
                 mode: str = "auto") -> PerturbDataset:
    """
    Read and validate a dataset directory. Row order is kept as on disk.

    `mode` is 'counts', 'gaussian' or 'auto' (integer-valued X means counts).
    A `control` argument overrides the `# control=` line of D.csv.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFileError("Dataset directory not found", field="dataset", value=str(directory))

    for name in ("X.csv", "D.csv"):
        if not (directory / name).is_file():
            raise MissingFileError(f"Missing {name}", field="dataset",
                                   value=str(directory / name),
                                   suggestion="A dataset directory needs X.csv and D.csv")

    x_path, d_path = directory / "X.csv", directory / "D.csv"
    x_frame = _read_table(x_path)
    header_control, skip = _read_control(d_path)
    d_frame = _read_table(d_path, skiprows=skip)

    if len(x_frame) != len(d_frame):
        raise RaggedRowError(f"X.csv has {len(x_frame)} rows but D.csv has {len(d_frame)}",
                             field="D.csv")

    X = _to_numeric(x_frame, x_path)
    D = _to_numeric(d_frame, d_path, error_cls=DosageValueError)

    bad = np.argwhere((D != 0.0) & (D != 1.0))
    if bad.size:
        row, col = (int(i) for i in bad[0])
        raise DosageValueError(f"Dosage must be 0 or 1, got '{d_frame.iat[row, col]}' at row "
                               f"{row + 1}, column '{d_frame.columns[col]}'",
                               field="D.csv", value=f"row={row + 1}, column={col + 1}")

    if mode == "auto":
        mode = detect_mode(X)
    if mode not in (COUNTS, GAUSSIAN):
        raise DatasetError(f"Unknown dataset mode '{mode}'", field="likelihood",
                           suggestion="Use counts, gaussian or auto")

    if mode == COUNTS:
        fractional = np.argwhere(np.mod(X, 1.0) != 0.0)
        if fractional.size:
            row, col = (int(i) for i in fractional[0])
            raise DatasetError(f"Counts must be integers, got {X[row, col]!r} at row {row + 1}, "
                               f"gene '{x_frame.columns[col]}'", field="X.csv",
                               suggestion="Use likelihood = gaussian for continuous data")
        negative = np.argwhere(X < 0)
        if negative.size:
            row, col = (int(i) for i in negative[0])
            raise NegativeCountError(f"Negative count at row {row + 1}, gene "
                                     f"'{x_frame.columns[col]}'", field="X.csv",
                                     value=str(X[row, col]))
        empty = np.flatnonzero(X.sum(axis=1) <= 0)
        if empty.size:
            raise EmptyLibraryError(f"Row {empty[0] + 1} has zero total count", field="X.csv",
                                    value=str(empty[0] + 1),
                                    suggestion="Remove cells with an empty library")

    obs = pd.DataFrame(index=range(len(X)))
    obs_path = directory / "obs.csv"
    if obs_path.is_file():
        obs = _read_table(obs_path)
        if len(obs) != len(X):
            raise RaggedRowError(f"obs.csv has {len(obs)} rows but X.csv has {len(X)}",
                                 field="obs.csv")

    if "split" in obs.columns:
        split = obs["split"].to_numpy(dtype=object)
        unknown = sorted(set(split) - set(SPLITS))
        if unknown:
            raise SplitError(f"Unknown split tags {unknown}", field="obs.csv",
                             suggestion=f"Use: {', '.join(SPLITS)}")
        split = split.astype(str)
    else:
        split = np.full(len(X), "train")

    perturbation_names = tuple(d_frame.columns)
    control = control or header_control
    if control is not None and control not in perturbation_names:
        raise DatasetError(f"Control '{control}' is not a perturbation column", field="control",
                           value=control)

    ds = PerturbDataset(X=X, D=D, gene_names=tuple(x_frame.columns),
                        perturbation_names=perturbation_names, split=split, mode=mode,
                        control=control, obs=obs)
    logger.info(f"Loaded {directory}: {ds.n_cells} cells, {ds.n_genes} genes, "
                f"{ds.n_perturbations} perturbations ({mode})")
    return ds


def save_dataset(ds: PerturbDataset, directory: Union[str, Path]) -> Path:
    """Write X.csv, D.csv and obs.csv (with the split column)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    x_frame = pd.DataFrame(ds.X, columns=list(ds.gene_names))
    if ds.mode == COUNTS:
        x_frame.astype(np.int64).to_csv(directory / "X.csv", index=False, lineterminator="\n")
    else:
        x_frame.to_csv(directory / "X.csv", index=False, float_format="%.17g", lineterminator="\n")

    with (directory / "D.csv").open("w", encoding="utf-8", newline="") as handle:
        if ds.control is not None:
            handle.write(f"# control={ds.control}\n")
        pd.DataFrame(ds.D.astype(np.int64), columns=list(ds.perturbation_names)).to_csv(
            handle, index=False, lineterminator="\n")

    obs = ds.obs.copy()
    obs["split"] = ds.split
    obs.to_csv(directory / "obs.csv", index=False, lineterminator="\n")
    return directory


# =============================================================================
# NORMALIZATION
# =============================================================================

@dataclass(frozen=True, eq=False)
class EncoderNormalizer:
    """Feature standardization fitted on training rows only."""

    mean: np.ndarray
    std: np.ndarray
    log_transform: bool
    eps: float = NORMALIZATION_EPS

    @classmethod
    def fit(cls, ds: PerturbDataset) -> "EncoderNormalizer":
        log_transform = ds.mode == COUNTS
        idx = ds.indices("train")
        values = ds.X[idx] if idx.size else ds.X
        if log_transform:
            values = np.log1p(values)
        return cls(mean=values.mean(axis=0), std=values.std(axis=0), log_transform=log_transform)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        values = np.log1p(X) if self.log_transform else X
        return (values - self.mean) / np.maximum(self.std, self.eps)

    def to_dict(self) -> Dict[str, object]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "log_transform": self.log_transform, "eps": self.eps}

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "EncoderNormalizer":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64),
                   std=np.asarray(payload["std"], dtype=np.float64),
                   log_transform=bool(payload["log_transform"]),
                   eps=float(payload.get("eps", NORMALIZATION_EPS)))


@dataclass(frozen=True, eq=False)
class EncoderInput:
    values: np.ndarray
    normalizer: EncoderNormalizer


def normalize_for_encoder(ds: PerturbDataset,
                          normalizer: Optional[EncoderNormalizer] = None) -> EncoderInput:
    """log1p (counts mode) then standardize with train statistics."""
    normalizer = normalizer or EncoderNormalizer.fit(ds)
    return EncoderInput(values=normalizer(ds.X), normalizer=normalizer)


def library_normalize(ds: PerturbDataset, target: Optional[float] = None) -> np.ndarray:
    """
    Scale each row to the median train library size. Gaussian-mode data has
    no library size and is returned unchanged.
    """
    if ds.mode != COUNTS:
        return ds.X.copy()
    target = ds.median_library("train") if target is None else target
    return ds.X * (target / ds.library_sizes)[:, None]


# =============================================================================
# SPLITTING
# =============================================================================

def _split_sizes(n: int, fractions: Sequence[float]) -> np.ndarray:
    """Largest-remainder rounding so sizes sum to n."""
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    remainder = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    return sizes


def make_splits(ds: PerturbDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                seed: int = 0, stratify: bool = True) -> PerturbDataset:
    """
    Seeded train/val/test assignment with exact global sizes.

    Stratified mode spreads every dosage pattern evenly over the splits by
    ordering cells on their within-pattern rank.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError("Split fractions must be three non-negative numbers summing to 1",
                         field="split_fractions", value=str(fractions))

    rng = np.random.default_rng(seed)
    n = ds.n_cells
    sizes = _split_sizes(n, fractions)

    if stratify:
        _, groups = np.unique(ds.D, axis=0, return_inverse=True)
        groups = np.asarray(groups).reshape(-1)
        key = np.empty(n)
        for g in np.unique(groups):
            members = np.flatnonzero(groups == g)
            ranks = rng.permutation(members.size)
            key[members] = (ranks + 0.5) / members.size
        order = np.lexsort((rng.random(n), key))
    else:
        order = rng.permutation(n)

    split = np.empty(n, dtype="<U5")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        split[order[lo:hi]] = name

    result = replace(ds, split=split)
    if stratify:
        present = ds.D.sum(axis=0) > 0
        missing = present & (result.perturbation_counts("train") == 0)
        if missing.any():
            name = ds.perturbation_names[int(np.argmax(missing))]
            raise SplitError(f"Perturbation '{name}' has no training cells", field="split_fractions",
                             value=str(fractions), suggestion="Increase the train fraction")

    logger.info(f"Split {n} cells into train/val/test = {sizes.tolist()} (seed={seed}, "
                f"stratify={stratify})")
    return result


def holdout_combinations(ds: PerturbDataset, fraction: float, seed: int = 0) -> PerturbDataset:
    """
    Move every cell of a random subset of multi-perturbation dosage patterns
    to the test split; single-perturbation cells keep their split.
    """
    combo_rows = ds.D.sum(axis=1) >= 2
    if fraction <= 0 or not combo_rows.any():
        return ds

    patterns = np.unique(ds.D[combo_rows], axis=0)
    n_held = max(1, int(round(fraction * len(patterns))))
    rng = np.random.default_rng(seed)
    held = patterns[np.sort(rng.choice(len(patterns), size=n_held, replace=False))]

    is_held = (ds.D[:, None, :] == held[None, :, :]).all(axis=2).any(axis=1)
    split = np.where(is_held, "test", ds.split)
    logger.info(f"Held out {n_held}/{len(patterns)} combinations ({int(is_held.sum())} cells)")
    return replace(ds, split=split.astype("<U5"))
