"""Datasets: CSV ingestion, standardization, PSV balancing and a biased generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    features: np.ndarray  # [n, d]
    psv: np.ndarray  # [n], values in {0, 1}
    labels: np.ndarray | None = None  # [n], 0 normal / 1 abnormal
    name: str = ""
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be a 2-d matrix, got shape {self.features.shape}")
        self.psv = np.asarray(self.psv, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.psv.shape[0] != n:
            raise DataError(f"psv has {self.psv.shape[0]} entries for {n} instances")
        if not np.isin(self.psv, (0, 1)).all():
            raise DataError("psv must contain only 0 and 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise DataError(f"labels has {self.labels.shape[0]} entries for {n} instances")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must contain only 0 and 1")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.n_dims)]
        elif len(self.feature_names) != self.n_dims:
            raise DataError("feature_names length does not match feature dimension")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_dims(self) -> int:
        return self.features.shape[1]

    def group_counts(self) -> tuple[int, int]:
        return int(np.sum(self.psv == 0)), int(np.sum(self.psv == 1))

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(
            self.features[idx],
            self.psv[idx],
            None if self.labels is None else self.labels[idx],
            name=self.name,
            feature_names=list(self.feature_names),
        )

    def require_both_groups(self) -> None:
        n0, n1 = self.group_counts()
        if n0 == 0 or n1 == 0:
            raise DataError(f"dataset {self.name!r} needs both psv values (counts {n0}/{n1})")


def load_csv(path: str | Path, psv_column: str, label_column: str | None = None) -> Dataset:
    """Read a header-row CSV; every column other than psv/label is a numeric feature."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        rows = [r for r in reader if r]

    for col in (psv_column, label_column):
        if col is not None and col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    psv_idx = header.index(psv_column)
    label_idx = header.index(label_column) if label_column is not None else None
    feat_idx = [j for j in range(len(header)) if j not in (psv_idx, label_idx)]

    n = len(rows)
    feats = np.empty((n, len(feat_idx)), dtype=np.float64)
    psv = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64) if label_idx is not None else None
    for i, row in enumerate(rows):
        row_no = i + 1  # 1-based data row, header excluded
        if len(row) != len(header):
            raise DataError(f"{path}: row {row_no} has {len(row)} cells, header has {len(header)}")
        psv[i] = _binary(row[psv_idx], path, row_no, psv_column)
        if label_idx is not None:
            labels[i] = _binary(row[label_idx], path, row_no, label_column)
        for k, j in enumerate(feat_idx):
            feats[i, k] = _real(row[j], path, row_no, header[j])
    return Dataset(feats, psv, labels, name=path.stem, feature_names=[header[j] for j in feat_idx])


def _binary(cell: str, path, row_no: int, col: str) -> int:
    try:
        v = float(cell)
    except ValueError:
        v = math.nan
    if v not in (0.0, 1.0):
        raise DataError(f"{path}: row {row_no}, column {col!r}: value {cell!r} is not 0 or 1")
    return int(v)


def _real(cell: str, path, row_no: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row_no}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row_no}, column {col!r}: non-finite value {cell!r}")
    return v


def write_csv(ds: Dataset, path: str | Path, psv_column: str = "psv", label_column: str = "label") -> None:
    """Inverse of :func:`load_csv`; floats are written with ``repr`` so reloading is exact."""
    header = list(ds.feature_names) + [psv_column]
    if ds.labels is not None:
        header.append(label_column)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]] + [str(int(ds.psv[i]))]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


# -- preprocessing -----------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray  # population std; 0 for constant columns

    def transform(self, ds: Dataset) -> Dataset:
        safe = np.where(self.scale > 0, self.scale, 1.0)
        x = (ds.features - self.mean) / safe
        x[:, self.scale == 0] = 0.0
        return Dataset(x, ds.psv.copy(), None if ds.labels is None else ds.labels.copy(),
                       name=ds.name, feature_names=list(ds.feature_names))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Scaler:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def standardize(train: Dataset, others: list[Dataset] = ()) -> tuple[list[Dataset], Scaler]:
    """Z-score every column with train statistics (population variance).

    Returns ``([train_scaled, *others_scaled], scaler)``.
    """
    if len(train) == 0:
        raise DataError("cannot standardize on an empty training set")
    with np.errstate(over="ignore", invalid="ignore"):
        scaler = Scaler(train.features.mean(axis=0), train.features.std(axis=0))
    if not (np.isfinite(scaler.mean).all() and np.isfinite(scaler.scale).all()):
        raise DataError("feature magnitudes overflow when computing column statistics")
    return [scaler.transform(d) for d in (train, *others)], scaler


def balance_by_psv(ds: Dataset, seed: int) -> Dataset:
    """Subsample the larger PSV group down to the size of the smaller one.

    Row order of the retained instances is preserved.
    """
    ds.require_both_groups()
    n0, n1 = ds.group_counts()
    if n0 == n1:
        return ds.subset(np.arange(len(ds)))
    big = 0 if n0 > n1 else 1
    big_idx = np.flatnonzero(ds.psv == big)
    rng = np.random.default_rng(seed)
    keep_big = rng.choice(big_idx, size=min(n0, n1), replace=False)
    keep = np.sort(np.concatenate([np.flatnonzero(ds.psv != big), keep_big]))
    return ds.subset(keep)


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs for :func:`synth_biased`.

    Axis 0 carries the protected attribute, axis 1 carries the anomaly
    displacement; the remaining axes are shared unit-variance noise.
    ``bias_strength`` moves the two group means apart along axis 0 by
    ``bias_strength * group_separation``.  ``minority_ratio`` shrinks group 1
    in the training set only, so an unconstrained model fits group 0 better.
    """

    n_per_group: int = 1000
    n_dims: int = 4
    bias_strength: float = 0.8
    anomaly_fraction: float = 0.1
    anomaly_shift: float = 3.0
    seed: int = 0
    group_separation: float = 5.0
    minority_ratio: float = 0.3

    def validate(self) -> None:
        if self.n_per_group < 1:
            raise DataError("n_per_group must be >= 1")
        if self.n_dims < 2:
            raise DataError("n_dims must be >= 2 (one bias axis, one anomaly axis)")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise DataError("bias_strength must lie in [0, 1]")
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise DataError("anomaly_fraction must lie in [0, 1)")
        if not self.anomaly_shift > 0:
            raise DataError("anomaly_shift must be > 0")
        if self.seed < 0:
            raise DataError("seed must be non-negative")
        if self.group_separation < 0:
            raise DataError("group_separation must be >= 0")
        if not 0.0 < self.minority_ratio <= 1.0:
            raise DataError("minority_ratio must lie in (0, 1]")


BIAS_AXIS = 0
ANOMALY_AXIS = 1


def _normal_rows(spec: SynthSpec, z: int, n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, spec.n_dims))
    offset = spec.bias_strength * spec.group_separation / 2.0
    x[:, BIAS_AXIS] += offset if z == 1 else -offset
    return x


def synth_biased(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Generate ``(train, test)``.

    Train holds only normal instances: ``n_per_group`` from group 0 and
    ``round(minority_ratio * n_per_group)`` (at least 1) from group 1.  Test
    holds ``n_per_group`` per group, of which ``round(anomaly_fraction *
    n_per_group)`` per group are abnormal: normal draws displaced by
    ``anomaly_shift`` along the anomaly axis.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_minority = max(1, int(round(spec.minority_ratio * spec.n_per_group)))

    train_x = np.vstack([_normal_rows(spec, 0, spec.n_per_group, rng),
                         _normal_rows(spec, 1, n_minority, rng)])
    train_z = np.concatenate([np.zeros(spec.n_per_group, np.int64), np.ones(n_minority, np.int64)])

    n_abn = int(round(spec.anomaly_fraction * spec.n_per_group))
    parts, zs, ys = [], [], []
    for z in (0, 1):
        x = _normal_rows(spec, z, spec.n_per_group, rng)
        y = np.zeros(spec.n_per_group, np.int64)
        y[:n_abn] = 1
        x[:n_abn, ANOMALY_AXIS] += spec.anomaly_shift
        parts.append(x)
        zs.append(np.full(spec.n_per_group, z, np.int64))
        ys.append(y)
    test_x, test_z, test_y = np.vstack(parts), np.concatenate(zs), np.concatenate(ys)

    # interleave groups so that row order carries no group information
    perm_tr = rng.permutation(len(train_z))
    perm_te = rng.permutation(len(test_z))
    train = Dataset(train_x[perm_tr], train_z[perm_tr], np.zeros(len(train_z), np.int64), name="synth_train")
    test = Dataset(test_x[perm_te], test_z[perm_te], test_y[perm_te], name="synth_test")
    return train, test
