"""Validity, realism, oracle-validity and efficiency metrics over counterfactual records.

Validity metrics (FR, MAD, BKL) are computed on records whose input is
classified NSP. Realism metrics additionally require the counterfactual to be
classified SP. Scores come from the records (filled by ``score_records``)
unless a model is passed, in which case they are recomputed from the images.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import models as M
from .guidance import CounterfactualRecord, cosine_rows

EPS = 1e-12
QS_THRESHOLD = 0.5
STRUCTURES = ("FP", "CSP", "TH")


class MetricError(ValueError):
    pass


# -- score access -------------------------------------------------------------------
def _p_orig(records, f) -> np.ndarray:
    if f is not None:
        return M.classify(f, np.stack([r.original for r in records]))[0].astype(np.float64)
    return np.array([r.p_sp_original for r in records], dtype=np.float64)


def _p_cf(records, f, iteration: int) -> np.ndarray:
    if f is not None:
        return M.classify(f, np.stack([r.iterations[iteration] for r in records]))[0].astype(np.float64)
    return np.array([r.p_sp[iteration] for r in records], dtype=np.float64)


def is_sp(p: np.ndarray) -> np.ndarray:
    """argmax over (NSP, SP); a tie resolves to NSP like ``argmax`` does."""
    return np.asarray(p) > 0.5


def _eligible(records, f) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise MetricError("no records")
    p0 = _p_orig(records, f)
    mask = ~is_sp(p0)
    if not mask.any():
        raise MetricError("no eligible records: every input is already classified SP")
    return p0, mask


# -- validity -------------------------------------------------------------------------
def flip_ratio(records: Sequence[CounterfactualRecord], f=None, iteration: int = -1) -> float:
    _, mask = _eligible(records, f)
    pc = _p_cf(records, f, iteration)
    return float(is_sp(pc[mask]).sum() / mask.sum())


def mad(records: Sequence[CounterfactualRecord], f=None, iteration: int = -1) -> float:
    p0, mask = _eligible(records, f)
    pc = _p_cf(records, f, iteration)
    return float(np.mean(np.abs(p0[mask] - pc[mask])))


def bkl_value(p_target: np.ndarray) -> np.ndarray:
    """1 - exp(-KL(onehot || p)); the KL to a one-hot reduces to -log p_target."""
    p = np.maximum(np.asarray(p_target, dtype=np.float64), EPS)
    return 1.0 - np.exp(np.log(p))


def bkl(records: Sequence[CounterfactualRecord], f=None, iteration: int = -1) -> float:
    _, mask = _eligible(records, f)
    pc = _p_cf(records, f, iteration)
    return float(np.mean(bkl_value(pc[mask])))


# -- oracle validity ----------------------------------------------------------------------
def mqd_values(qs_orig: np.ndarray, qs_cf: np.ndarray) -> float:
    qs_orig = np.asarray(qs_orig, dtype=np.float64)
    qs_cf = np.asarray(qs_cf, dtype=np.float64)
    if qs_orig.shape != qs_cf.shape or qs_orig.ndim != 1:
        raise MetricError(f"mqd: score shapes {qs_orig.shape} vs {qs_cf.shape}")
    if len(qs_orig) == 0:
        raise MetricError("mqd: N must be >= 1")
    return float(np.sum((qs_orig < QS_THRESHOLD) * (qs_cf - qs_orig)) / len(qs_orig))


def _oracle_scores(records, oracle, iteration: int | None, head: str) -> np.ndarray:
    if oracle is not None:
        imgs = np.stack([r.original if iteration is None else r.iterations[iteration] for r in records])
        return M.oracle_scores(oracle, imgs)[head].astype(np.float64)
    if iteration is None:
        return np.array([r.oracle_original[head] for r in records], dtype=np.float64)
    return np.array([r.oracle[iteration][head] for r in records], dtype=np.float64)


def mqd(records: Sequence[CounterfactualRecord], oracle=None, iteration: int = -1) -> float:
    if not records:
        raise MetricError("mqd: N must be >= 1")
    return mqd_values(_oracle_scores(records, oracle, None, "QS_O"),
                      _oracle_scores(records, oracle, iteration, "QS_O"))


# -- realism -----------------------------------------------------------------------------
def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_feature_distance(feats_a: np.ndarray, feats_b: np.ndarray, shrinkage: float = 1e-6) -> float:
    """||mu_A - mu_B||^2 + Tr(S_A + S_B - 2 (S_A^1/2 S_B S_A^1/2)^1/2).

    Covariances are shrunk by ``shrinkage * I`` when a set has fewer than d+1
    samples and so cannot be full rank.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"frechet: feature shapes {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("frechet: need at least 2 samples per set")
    d = a.shape[1]
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    if min(len(a), len(b)) < d + 1:
        sa = sa + shrinkage * np.eye(d)
        sb = sb + shrinkage * np.eye(d)
    ra = _sqrt_psd(sa)
    cross = np.linalg.eigvalsh((ra @ sb @ ra + (ra @ sb @ ra).T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(cross, 0.0, None)).sum())
    diff = a.mean(axis=0) - b.mean(axis=0)
    fd = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def mean_feature_cosine(pairs, f_eval=None) -> float:
    """Mean cosine between feature vectors of (x, x^c) pairs.

    ``pairs`` is either a sequence of image pairs (with ``f_eval``) or a pair of
    precomputed feature matrices (without).
    """
    if f_eval is None:
        fa, fb = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise MetricError("mean_feature_cosine: no pairs")
        fa = M.extract_features(f_eval, np.stack([p[0] for p in pairs]))
        fb = M.extract_features(f_eval, np.stack([p[1] for p in pairs]))
    fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(fb, dtype=np.float64))
    if len(fa) == 0:
        raise MetricError("mean_feature_cosine: no pairs")
    return float(np.mean(cosine_rows(fa, fb, EPS)))


# -- efficiency -------------------------------------------------------------------------
def efficiency(timings: Sequence[dict]) -> dict:
    """Batch time (mean/std seconds over batches) and total hours from timing rows.

    Each row carries ``batch`` and ``seconds``; rows of one batch are summed.
    """
    per_batch: dict = {}
    for row in timings:
        per_batch[row.get("batch", 0)] = per_batch.get(row.get("batch", 0), 0.0) + float(row["seconds"])
    secs = np.array(list(per_batch.values()), dtype=np.float64)
    if len(secs) == 0:
        return {"batch_seconds_mean": math.nan, "batch_seconds_std": math.nan, "total_hours": 0.0, "batches": 0}
    return {"batch_seconds_mean": float(secs.mean()), "batch_seconds_std": float(secs.std()),
            "total_hours": float(secs.sum() / 3600.0), "batches": int(len(secs))}


# -- report -------------------------------------------------------------------------------
@dataclass
class IterationRow:
    method: str
    iteration: int
    FD: float
    cosine: float
    MQD: float
    BKL: float
    MAD: float
    FR: float
    n_valid: int


@dataclass
class MetricsReport:
    method: str
    realism: dict
    validity: dict
    oracle: dict
    counts: dict
    per_iteration: list[IterationRow]
    qd_vs_qs: list[dict] = field(default_factory=list)
    efficiency: dict = field(default_factory=dict)

    def to_dict(self, include_efficiency: bool = False) -> dict:
        d = {"method": self.method, "realism": self.realism, "validity": self.validity, "oracle": self.oracle,
             "counts": self.counts, "per_iteration": [asdict(r) for r in self.per_iteration]}
        if include_efficiency:
            d["efficiency"] = self.efficiency
        return d

    def to_json(self) -> str:
        """Deterministic serialization; wall-clock efficiency lives in a separate file."""
        return json.dumps(_rounded(self.to_dict()), indent=2, sort_keys=True) + "\n"


def _rounded(obj, digits: int = 10):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


def _iteration_metrics(records, feats_orig, feats_iter, iteration: int, method: str) -> IterationRow:
    p0, mask = _eligible(records, None)
    pc = _p_cf(records, None, iteration)
    valid = mask & is_sp(pc)
    fd = cos = math.nan
    if valid.sum() >= 2:
        fd = frechet_feature_distance(feats_orig[valid], feats_iter[valid])
    if valid.any():
        cos = mean_feature_cosine((feats_orig[valid], feats_iter[valid]))
    has_oracle = bool(records[0].oracle_original)
    return IterationRow(
        method=method, iteration=(iteration % records[0].L) + 1, FD=fd, cosine=cos,
        MQD=mqd(records, None, iteration) if has_oracle else math.nan,
        BKL=float(np.mean(bkl_value(pc[mask]))), MAD=float(np.mean(np.abs(p0[mask] - pc[mask]))),
        FR=float(is_sp(pc[mask]).mean()), n_valid=int(valid.sum()),
    )


def build_report(records: Sequence[CounterfactualRecord], f=None, oracle=None, f_eval=None,
                 timings: Sequence[dict] = ()) -> MetricsReport:
    """Summary for one configuration plus per-iteration rows and QD-vs-QS points.

    ``f`` and ``oracle`` re-score the images when given; ``f_eval`` is needed for
    the realism metrics.
    """
    records = list(records)
    if not records:
        raise MetricError("build_report: no records")
    if f is not None or oracle is not None:
        from .guidance import ModelBundle, score_records

        score_records(records, ModelBundle(None, f, None, None, f_eval=f_eval, oracle=oracle))
    method = records[0].method
    L = records[0].L
    if f_eval is not None:
        feats_orig = M.extract_features(f_eval, np.stack([r.original for r in records])).astype(np.float64)
        feats = [M.extract_features(f_eval, np.stack([r.iterations[i] for r in records])).astype(np.float64)
                 for i in range(L)]
    else:
        feats_orig = np.full((len(records), 1), np.nan)
        feats = [feats_orig] * L
    rows = [_iteration_metrics(records, feats_orig, feats[i], i, method) for i in range(L)]
    final = rows[-1]
    _, mask = _eligible(records, None)
    has_oracle = bool(records[0].oracle_original)
    qs_o = _oracle_scores(records, None, None, "QS_O") if has_oracle else np.full(len(records), np.nan)
    points = []
    if has_oracle:
        for r in records:
            for s in STRUCTURES:
                head = f"QS_{s}"
                points.append({"image_id": r.image_id, "structure": s, "QS": r.oracle_original[head],
                               "QD": r.oracle[-1][head] - r.oracle_original[head],
                               "valid": bool(r.p_sp[-1] > 0.5), "f_correct": bool(r.p_sp_original <= 0.5),
                               "QS_O": r.oracle_original["QS_O"]})
    return MetricsReport(
        method=method,
        realism={"frechet_eval_distance": final.FD, "mean_feature_cosine": final.cosine},
        validity={"FR": final.FR, "MAD": final.MAD, "BKL": final.BKL},
        oracle={"MQD": final.MQD, **_qd_summary(points)},
        counts={"N": len(records), "eligible": int(mask.sum()), "valid": final.n_valid,
                "confident_oracle": int(np.sum(qs_o < QS_THRESHOLD))},
        per_iteration=rows, qd_vs_qs=points, efficiency=efficiency(timings),
    )


def _qd_summary(points: list[dict]) -> dict:
    out = {}
    for s in STRUCTURES:
        qd = [p["QD"] for p in points if p["structure"] == s]
        out[f"mean_QD_{s}"] = float(np.mean(qd)) if qd else math.nan
    return out


# -- CSV export ----------------------------------------------------------------------------
ROW_COLUMNS = ("method", "iteration", "FD", "cosine", "MQD", "BKL", "MAD", "FR", "n_valid")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if not math.isfinite(v) else f"{v:.6f}"
    return str(v)


def rows_csv(reports: Sequence[MetricsReport], extra: dict | None = None) -> str:
    """One row per method and iteration; ``extra`` maps method -> leading key/values."""
    buf = io.StringIO()
    extra = extra or {}
    keys = list(next(iter(extra.values())).keys()) if extra else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + list(ROW_COLUMNS))
    for rep in reports:
        lead = [_fmt(extra[rep.method][k]) for k in keys] if extra else []
        for row in rep.per_iteration:
            w.writerow(lead + [_fmt(getattr(row, c)) for c in ROW_COLUMNS])
    return buf.getvalue()


def qd_csv(report: MetricsReport, structure: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "QS", "QD", "valid", "f_correct", "QS_O"])
    for p in report.qd_vs_qs:
        if p["structure"] == structure:
            w.writerow([p["image_id"], _fmt(p["QS"]), _fmt(p["QD"]), int(p["valid"]), int(p["f_correct"]),
                        _fmt(p["QS_O"])])
    return buf.getvalue()
