"""Verification scoring: cosine similarity, EER, minDCF and DET points.

Operating points are enumerated at thresholds strictly between adjacent
distinct scores plus the two infinite endpoints; a trial is accepted when
its score exceeds the threshold.  For ``k`` distinct scores this gives
``k + 1`` points running from (P_fa=1, P_miss=0) to (P_fa=0, P_miss=1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Trial

__all__ = [
    "DegenerateTrialsError",
    "MissingEmbeddingError",
    "ScoreSet",
    "ZeroNormError",
    "compute_eer",
    "compute_min_dcf",
    "cosine_score",
    "det_points",
    "evaluate",
    "format_summary",
    "operating_points",
    "write_report",
]


class ZeroNormError(ValueError):
    pass


class DegenerateTrialsError(ValueError):
    pass


class MissingEmbeddingError(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} utterance id(s) have no embedding: {', '.join(self.missing)}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def check(self) -> None:
        if not self.labels.any() or self.labels.all():
            raise DegenerateTrialsError("need at least one target and one non-target trial")


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("cosine score undefined for a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def operating_points(s: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, p_fa, p_miss)`` over all k + 1 operating points."""
    s.check()
    uniq, inv = np.unique(s.scores, return_inverse=True)
    k = uniq.size
    tar = np.bincount(inv[s.labels], minlength=k)
    non = np.bincount(inv[~s.labels], minlength=k)
    n_tar, n_non = int(tar.sum()), int(non.sum())
    # point i accepts the scores uniq[i:], i = 0..k
    tar_accept = np.concatenate([np.cumsum(tar[::-1])[::-1], [0]])
    non_accept = np.concatenate([np.cumsum(non[::-1])[::-1], [0]])
    p_miss = (n_tar - tar_accept) / n_tar
    p_fa = non_accept / n_non
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    return thresholds, p_fa, p_miss


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the score at which it occurs.

    Between the two operating points straddling P_fa == P_miss the rates are
    interpolated linearly and the returned threshold is the distinct score
    separating those two points; an exact crossing returns its own threshold.
    """
    thresholds, p_fa, p_miss = operating_points(s)
    uniq = np.unique(s.scores)
    diff = p_miss - p_fa  # non-decreasing from -1 to 1
    i = int(np.searchsorted(diff, 0.0, side="left"))
    if diff[i] == 0.0:
        return float(p_fa[i]), float(thresholds[i])
    # diff[i-1] < 0 < diff[i]
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = p_fa[i - 1] + alpha * (p_fa[i] - p_fa[i - 1])
    return float(eer), float(uniq[i - 1])


def compute_min_dcf(
    s: ScoreSet, p_target: float = 0.01, c_fa: float = 1.0, c_miss: float = 1.0, normalize: bool = True
) -> tuple[float, float]:
    """Minimum detection cost over all thresholds, with the minimizing threshold.

    Normalized by ``min(c_miss * p_target, c_fa * (1 - p_target))`` by default,
    so a system that ignores its input scores 1.0.
    """
    thresholds, p_fa, p_miss = operating_points(s)
    dcf = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    if normalize:
        dcf = dcf / min(c_miss * p_target, c_fa * (1 - p_target))
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(thresholds[i])


def det_points(s: ScoreSet) -> list[tuple[float, float]]:
    _, p_fa, p_miss = operating_points(s)
    return [(float(a), float(b)) for a, b in zip(p_fa, p_miss)]


def evaluate(
    trials: Sequence[Trial],
    embeddings_by_id: Mapping[str, np.ndarray],
    p_target: float = 0.01,
    c_fa: float = 1.0,
    c_miss: float = 1.0,
) -> dict:
    missing = sorted({u for t in trials for u in (t.enrol_id, t.test_id) if u not in embeddings_by_id})
    if missing:
        raise MissingEmbeddingError(missing)
    used = sorted({u for t in trials for u in (t.enrol_id, t.test_id)})
    zero = [u for u in used if not np.any(embeddings_by_id[u])]
    if zero:
        # a final ReLU that is inactive everywhere gives these; cosine scoring is undefined
        raise ZeroNormError(f"{len(zero)} utterance(s) have a zero-norm embedding: {', '.join(zero)}")
    scores = [cosine_score(embeddings_by_id[t.enrol_id], embeddings_by_id[t.test_id]) for t in trials]
    ss = ScoreSet(scores, [t.target for t in trials])
    eer, eer_thr = compute_eer(ss)
    min_dcf, dcf_thr = compute_min_dcf(ss, p_target, c_fa, c_miss)
    return {
        "eer": eer,
        "eer_threshold": eer_thr,
        "min_dcf": min_dcf,
        "min_dcf_threshold": dcf_thr,
        "p_target": p_target,
        "c_fa": c_fa,
        "c_miss": c_miss,
        "n_trials": len(trials),
        "n_target": int(ss.labels.sum()),
        "n_nontarget": int((~ss.labels).sum()),
        "det_points": det_points(ss),
    }


def format_summary(report: Mapping) -> str:
    return f"EER {100 * report['eer']:.2f}% minDCF {report['min_dcf']:.3f}"


def _finite_or_none(x):
    return x if isinstance(x, (int, bool)) or x is None or math.isfinite(x) else None


def write_report(path, report: Mapping) -> None:
    """JSON report; infinite thresholds are written as null."""
    clean = {k: _finite_or_none(v) if isinstance(v, float) else v for k, v in report.items()}
    Path(path).write_text(json.dumps(clean, indent=1, sort_keys=True) + "\n", encoding="utf-8")
