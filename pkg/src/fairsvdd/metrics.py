"""Group-fairness and detection metrics over anomaly scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class TieError(ValueError):
    """No threshold yields exactly k positives because of tied scores."""


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def threshold_from_count(scores, k: int) -> float:
    """Threshold ``t`` such that exactly the ``k`` largest scores satisfy ``s > t``.

    ``t`` is the midpoint between the k-th and (k+1)-th largest score; for
    ``k = 0`` it sits one unit above the maximum and for ``k = n`` one unit
    below the minimum.
    """
    s = np.sort(_vec(scores))[::-1]
    n = s.shape[0]
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if n == 0:
        return 0.0
    if k == 0:
        return float(s[0] + 1.0)
    if k == n:
        return float(s[-1] - 1.0)
    hi, lo = s[k - 1], s[k]
    if hi == lo:
        raise TieError(
            f"the {k}-th and {k + 1}-th largest scores are both {hi!r}; "
            "pass an explicit threshold instead"
        )
    t = lo + (hi - lo) / 2.0
    return float(t)


def positive_rates(scores, z, t: float) -> tuple[float, float]:
    s, z = _vec(scores), np.asarray(z).reshape(-1)
    if s.shape[0] != z.shape[0]:
        raise ValueError("scores and z differ in length")
    n0, n1 = int(np.sum(z == 0)), int(np.sum(z == 1))
    if n0 == 0 or n1 == 0:
        raise ValueError("p%-rule needs both psv groups to be non-empty")
    pos = s > t
    return float(np.sum(pos & (z == 0))) / n0, float(np.sum(pos & (z == 1))) / n1


def p_rule(scores, z, t: float) -> float:
    """``min(r1/r0, r0/r1)`` of the per-group rates of ``s > t``.

    Both rates zero gives 1.0; exactly one rate zero gives 0.0.
    """
    r0, r1 = positive_rates(scores, z, t)
    if r0 == 0 and r1 == 0:
        return 1.0
    if r0 == 0 or r1 == 0:
        return 0.0
    return min(r1 / r0, r0 / r1)


def wasserstein1(samples_p, samples_q) -> float:
    """Exact W1 between two empirical distributions on the real line.

    Integrates ``|F_P^-1(u) - F_Q^-1(u)|`` over the merged breakpoints of
    the two step quantile functions.  Breakpoints are tracked as integers in
    units of ``1/(n*m)`` so no interval is lost to rounding.
    """
    a, b = np.sort(_vec(samples_p)), np.sort(_vec(samples_q))
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("wasserstein1 needs two non-empty samples")
    if n == m:
        return float(np.mean(np.abs(a - b)))
    cuts = np.union1d(np.arange(n + 1, dtype=np.int64) * m, np.arange(m + 1, dtype=np.int64) * n)
    starts, widths = cuts[:-1], np.diff(cuts)
    diff = np.abs(a[starts // m] - b[starts // n])
    return float(np.sum(diff * widths) / (n * m))


def rankdata_average(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = _vec(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = xs.shape[0]
    # boundaries of runs of equal values
    new = np.concatenate([[True], xs[1:] != xs[:-1]])
    run_id = np.cumsum(new) - 1
    run_start = np.flatnonzero(new)
    run_end = np.concatenate([run_start[1:], [n]])
    mean_rank = (run_start + run_end + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = mean_rank[run_id]
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties between an abnormal and a normal score count one half."""
    s, y = _vec(scores), np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0]:
        raise ValueError("scores and labels differ in length")
    n1, n0 = int(np.sum(y == 1)), int(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both normal and abnormal labels")
    if n1 + n0 != y.shape[0]:
        raise ValueError("labels must be 0 or 1")
    r = rankdata_average(s)
    u = float(np.sum(r[y == 1])) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


@dataclass
class FairnessReport:
    p_rule: float
    wasserstein: float
    auc: float | None
    threshold: float
    counts: dict  # {"z0": {"normal": a, "abnormal": b}, "z1": {...}} by predicted group
    k: int | None = None

    @property
    def passes_80_rule(self) -> bool:
        return self.p_rule >= 0.8

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> FairnessReport:
        return cls(**d)

    def summary(self) -> str:
        c = self.counts
        lines = [
            f"p%-rule      {self.p_rule:.4f}  (80% rule {'satisfied' if self.passes_80_rule else 'violated'})",
            f"wasserstein  {self.wasserstein:.6g}",
            f"auc          {'n/a' if self.auc is None else f'{self.auc:.4f}'}",
            f"threshold    {self.threshold:.6g}",
            f"predicted abnormal (Z0:Z1)  {c['z0']['abnormal']}:{c['z1']['abnormal']}",
            f"predicted normal   (Z0:Z1)  {c['z0']['normal']}:{c['z1']['normal']}",
        ]
        return "\n".join(lines)


def evaluate(scores, z, labels=None, k: int | None = None, t: float | None = None) -> FairnessReport:
    """Assemble every metric for one scored evaluation set.

    The threshold comes from ``t`` if given, else from ``k``, else from the
    number of abnormal labels.  Wasserstein compares all group-0 scores to
    all group-1 scores (normal and abnormal together).
    """
    s, z = _vec(scores), np.asarray(z).reshape(-1).astype(np.int64)
    if labels is not None:
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if t is None:
        if k is None:
            if labels is None:
                raise ValueError("need a threshold, an anomaly count or labels")
            k = int(np.sum(labels == 1))
        t = threshold_from_count(s, k)
    pos = s > t
    counts = {
        f"z{g}": {"normal": int(np.sum(~pos & (z == g))), "abnormal": int(np.sum(pos & (z == g)))}
        for g in (0, 1)
    }
    return FairnessReport(
        p_rule=p_rule(s, z, t),
        wasserstein=wasserstein1(s[z == 0], s[z == 1]),
        auc=None if labels is None else auc(s, labels),
        threshold=float(t),
        counts=counts,
        k=k,
    )


def overlap_ratio(scores_a, scores_b, k: int) -> float:
    """Share of the top-k predictions of model A that model B also flags."""
    if k == 0:
        return 1.0
    pa = _vec(scores_a) > threshold_from_count(scores_a, k)
    pb = _vec(scores_b) > threshold_from_count(scores_b, k)
    return float(np.sum(pa & pb)) / k
