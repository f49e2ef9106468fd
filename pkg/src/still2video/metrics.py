"""Evaluation: frame/flow RMSE, perceptual dissimilarity, diversity and embeddings.

The perceptual distance is computed on the pluggable :class:`FeatureExtractor`
so it is hermetic; its absolute values depend on the extractor weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
import torch

from .core import check_frame
from .data.estimate import CoarseToFineEstimator, FlowEstimator
from .errors import EvaluationError, InvalidInputError, Still2VideoError
from .flow2rgb import FeatureExtractor, _image_tensor

# guards the channel normalization of all-zero feature vectors
_NORM_EPS = 1e-10

METRICS = ("rmse_frames", "rmse_flows", "perceptual")


def _frames(seq, name: str) -> list[np.ndarray]:
    return [check_frame(f, f"{name}[{i}]") for i, f in enumerate(seq)]


def rmse_frames(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> np.ndarray:
    """Per-step ``sqrt(mean((pred_t - gt_t)**2))`` over pixels and channels."""
    if len(pred) != len(gt):
        raise InvalidInputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    out = np.empty(len(pred))
    for t, (p, g) in enumerate(zip(_frames(pred, "pred"), _frames(gt, "gt"))):
        if p.shape != g.shape:
            raise InvalidInputError(f"step {t}: shapes {p.shape} and {g.shape} differ")
        out[t] = np.sqrt(np.mean((p - g) ** 2))
    return out


def rmse_flows(
    pred: Sequence[np.ndarray],
    gt: Sequence[np.ndarray],
    est: Optional[FlowEstimator] = None,
) -> np.ndarray:
    """Per-step RMSE between flows estimated on adjacent frames of each sequence.

    Returns ``len(pred) - 1`` values in pixel units.  The RMSE is taken over
    the flow vectors: ``sqrt(mean(|f_pred - f_gt|**2))``.
    """
    if len(pred) != len(gt):
        raise InvalidInputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise InvalidInputError("flow RMSE needs at least two frames")
    est = est or CoarseToFineEstimator()
    p, g = _frames(pred, "pred"), _frames(gt, "gt")
    out = np.empty(len(p) - 1)
    for t in range(len(p) - 1):
        try:
            fp = np.asarray(est(p[t], p[t + 1], step=t), dtype=np.float64)
            fg = np.asarray(est(g[t], g[t + 1], step=t), dtype=np.float64)
        except Still2VideoError as exc:
            raise EvaluationError(f"flow estimation failed at step {t}: {exc}") from exc
        if not (np.isfinite(fp).all() and np.isfinite(fg).all()):
            raise EvaluationError(f"flow estimation produced non-finite values at step {t}")
        out[t] = np.sqrt(np.mean(np.sum((fp - fg) ** 2, axis=-1)))
    return out


def _unit_channels(f: torch.Tensor) -> torch.Tensor:
    return f / (f.norm(dim=1, keepdim=True) + _NORM_EPS)


def perceptual_dissimilarity(pred: np.ndarray, gt: np.ndarray, extractor: FeatureExtractor) -> float:
    """Sum over extractor stages of the MSE between channel-normalized feature maps.

    At every spatial position the stage feature vector is scaled to unit
    length before differencing, so the value is bounded by ``4 * n_stages``.
    """
    p, g = check_frame(pred, "pred"), check_frame(gt, "gt")
    if p.shape != g.shape:
        raise InvalidInputError(f"shapes {p.shape} and {g.shape} differ")
    with torch.no_grad():
        fp = extractor(_image_tensor(p, extractor))
        fg = extractor(_image_tensor(g, extractor))
        total = sum(((_unit_channels(a) - _unit_channels(b)) ** 2).mean().item() for a, b in zip(fp, fg))
    return float(total)


def perceptual_curve(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    if len(pred) != len(gt):
        raise InvalidInputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    return np.array([perceptual_dissimilarity(p, g, extractor) for p, g in zip(pred, gt)])


@dataclass
class DiversityStats:
    mean: np.ndarray
    std: np.ndarray
    values: np.ndarray  # (N, M) per-sample curves


def diversity_stats(
    samples: Sequence[Sequence[np.ndarray]],
    gt: Sequence[np.ndarray],
    extractor: FeatureExtractor,
) -> DiversityStats:
    """Mean and (population) std across samples of the per-step perceptual dissimilarity to ``gt``."""
    if len(samples) < 2:
        raise InvalidInputError("diversity needs at least two samples")
    for i, s in enumerate(samples):
        if len(s) != len(gt):
            raise InvalidInputError(f"sample {i} has {len(s)} frames, ground truth has {len(gt)}")
    values = np.stack([perceptual_curve(s, gt, extractor) for s in samples])
    return DiversityStats(values.mean(axis=0), values.std(axis=0), values)


@dataclass(frozen=True)
class EmbeddingPoint:
    id: str
    x: float
    y: float


def _descriptor(frames: Iterable[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    parts = []
    with torch.no_grad():
        for f in frames:
            feats = extractor(_image_tensor(check_frame(f), extractor))
            parts.append(feats[-1].double().flatten().numpy())
    return np.concatenate(parts)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows of ``x`` on their two leading principal axes (sign-fixed)."""
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((len(x), 2))
    k = min(2, len(s))
    coords[:, :k] = u[:, :k] * s[:k]
    for j in range(k):
        # deterministic orientation: largest-magnitude loading is positive
        if vt[j, np.argmax(np.abs(vt[j]))] < 0:
            coords[:, j] *= -1
    return coords


def embed_sequences(
    seqs: Sequence[Sequence[np.ndarray]],
    extractor: FeatureExtractor,
    method: Literal["pca", "tsne"] = "pca",
    mode: Literal["sequence", "frame"] = "sequence",
    ids: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> list[EmbeddingPoint]:
    """Embed each sequence (or each frame) as a 2-D point from final-stage features."""
    if mode == "sequence":
        items = [list(s) for s in seqs]
        names = list(ids) if ids is not None else [str(i) for i in range(len(items))]
    elif mode == "frame":
        items, names = [], []
        for i, s in enumerate(seqs):
            base = ids[i] if ids is not None else str(i)
            for t, f in enumerate(s):
                items.append([f])
                names.append(f"{base}:{t}")
    else:
        raise InvalidInputError(f"unknown embedding mode {mode!r}")
    if len(items) < 2:
        raise InvalidInputError("embedding needs at least two items")
    if len(names) != len(items):
        raise InvalidInputError("one id per sequence is required")
    desc = np.stack([_descriptor(it, extractor) for it in items])
    if method == "pca":
        coords = pca_2d(desc)
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (len(items) - 1) / 3))
        coords = TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(desc)
    else:
        raise InvalidInputError(f"unknown embedding method {method!r}")
    return [EmbeddingPoint(n, float(a), float(b)) for n, (a, b) in zip(names, coords)]


def write_embedding_csv(points: Sequence[EmbeddingPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for p in points:
            w.writerow([p.id, repr(p.x), repr(p.y)])


def read_embedding_csv(path: str | Path) -> list[EmbeddingPoint]:
    with open(path, newline="") as fh:
        return [EmbeddingPoint(r["id"], float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)]


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    """Long-format metric table: one row per (method, metric, t, value).

    Several samples of the same method simply contribute several rows per
    ``t``; :meth:`aggregate` reduces them to per-step mean and std.
    """

    rows: list[tuple[str, str, int, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, method: str, metric: str, values: Sequence[float]) -> None:
        values = np.asarray(values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise EvaluationError(f"{method}/{metric}: non-finite metric values")
        if (values < 0).any():
            raise EvaluationError(f"{method}/{metric}: negative metric values")
        self.rows.extend((method, metric, t, float(v)) for t, v in enumerate(values))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def metrics(self) -> list[str]:
        return list(dict.fromkeys(r[1] for r in self.rows))

    def aggregate(self, method: str, metric: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-step ``(mean, std)`` over all rows of ``(method, metric)``."""
        by_t: dict[int, list[float]] = {}
        for m, k, t, v in self.rows:
            if m == method and k == metric:
                by_t.setdefault(t, []).append(v)
        if not by_t:
            raise KeyError((method, metric))
        ts = sorted(by_t)
        return np.array([np.mean(by_t[t]) for t in ts]), np.array([np.std(by_t[t]) for t in ts])

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean([v for m, k, _, v in self.rows if m == method and k == metric]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            for key, value in self.metadata.items():
                fh.write(f"# {key} = {value}\n")
            w = csv.writer(fh)
            w.writerow(["method", "metric", "t", "value"])
            for m, k, t, v in self.rows:
                w.writerow([m, k, t, repr(v)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsReport":
        meta, body = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].partition("=")
                    meta[key.strip()] = value.strip()
                else:
                    body.append(line)
        rows = [(r["method"], r["metric"], int(r["t"]), float(r["value"])) for r in csv.DictReader(body)]
        return cls(rows, meta)


def evaluate_sequences(
    method: str,
    pred: Sequence[np.ndarray],
    gt: Sequence[np.ndarray],
    report: MetricsReport,
    metrics: Sequence[str] = METRICS,
    extractor: Optional[FeatureExtractor] = None,
    est: Optional[FlowEstimator] = None,
    x0: Optional[np.ndarray] = None,
) -> MetricsReport:
    """Add the requested metric curves of one predicted sequence to ``report``.

    When ``x0`` is given it is prepended to both sequences for the flow
    metric, so the flow RMSE has one value per predicted step.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise InvalidInputError(f"unknown metrics {sorted(unknown)}")
    if "rmse_frames" in metrics:
        report.add(method, "rmse_frames", rmse_frames(pred, gt))
    if "rmse_flows" in metrics:
        p, g = (list(pred), list(gt)) if x0 is None else ([x0, *pred], [x0, *gt])
        report.add(method, "rmse_flows", rmse_flows(p, g, est))
    if "perceptual" in metrics:
        report.add(method, "perceptual", perceptual_curve(pred, gt, extractor or FeatureExtractor()))
    return report
