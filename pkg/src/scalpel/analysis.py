"""Adapter-weight analyses: site importance, cross-task similarity and a 2-D MDS map."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, InputError
from .lora import LoraAdapterSet, effective_update, flatten
from .model import SITES

JACOBI_TOL = 1e-10


# -- importance ---------------------------------------------------------------------

@dataclass
class ImportanceReport:
    scores: dict[tuple[int, str], float]
    n_layers: int

    @property
    def per_layer(self) -> list[float]:
        totals = [0.0] * self.n_layers
        for (layer, _), v in self.scores.items():
            totals[layer] += v
        return totals

    @property
    def peak_layer(self) -> int:
        per = self.per_layer
        return int(np.argmax(per)) if per else 0

    def top(self, k: int) -> list[tuple[int, str]]:
        """The ``k`` highest-scoring sites; ties fall back to layer then site order."""
        order = {s: i for i, s in enumerate(SITES)}
        ranked = sorted(self.scores, key=lambda key: (-self.scores[key], key[0], order[key[1]]))
        return ranked[:k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "site", "score"))
        for (layer, site), v in self.scores.items():
            w.writerow((layer, site, repr(v)))
        return buf.getvalue()


def layer_importance(adapters: LoraAdapterSet) -> ImportanceReport:
    """Frobenius norm of each site's effective update ``(alpha/r) B A``."""
    scores = {}
    for s in adapters.sites:
        scores[s.key] = float(np.linalg.norm(effective_update(s, adapters.alpha, adapters.rank)))
    return ImportanceReport(scores, adapters.config.n_layers)


# -- similarity -----------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    names: list[str]
    rho: np.ndarray

    @property
    def distances(self) -> np.ndarray:
        return 1.0 - self.rho

    def to_csv(self, distances: bool = False) -> str:
        m = self.distances if distances else self.rho
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("task", *self.names))
        for name, row in zip(self.names, m):
            w.writerow((name, *(repr(float(v)) for v in row)))
        return buf.getvalue()


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"cannot correlate vectors of length {x.size} and {y.size}")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("correlation undefined for a constant vector")
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def correlation_matrix(vectors: Sequence[np.ndarray], names: Sequence[str]) -> SimilarityMatrix:
    if len(vectors) < 2:
        raise InputError("similarity needs at least two vectors")
    lengths = {np.asarray(v).size for v in vectors}
    if len(lengths) > 1:
        raise ConfigError(f"flattened adapter lengths differ: {sorted(lengths)}")
    n = len(vectors)
    rho = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            rho[i, j] = rho[j, i] = pearson(vectors[i], vectors[j])
    return SimilarityMatrix(list(names), rho)


def task_similarity(adapter_sets: Sequence[LoraAdapterSet], names: Sequence[str] | None = None) -> SimilarityMatrix:
    """Pairwise Pearson correlation of the flattened adapter weights."""
    if names is None:
        names = [a.task_label or f"set{i}" for i, a in enumerate(adapter_sets)]
    return correlation_matrix([flatten(a) for a in adapter_sets], names)


# -- classical MDS ----------------------------------------------------------------------

def jacobi_eigh(matrix: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(values, vectors)`` sorted by descending eigenvalue, with
    eigenvectors in the columns. Sweeps until the off-diagonal Frobenius
    norm falls below ``tol`` times ``max(1, ||matrix||_F)``, then polishes
    with one final sweep.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0):
        raise InputError("matrix is not symmetric")
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), 1.0)
    converged = False
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if converged:
            break
        # one more sweep after reaching tol; convergence is quadratic so it is nearly free
        converged = off <= tol * scale
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # a <- J^T a J with the rotation acting on rows/columns p and q
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def double_center(distances: np.ndarray) -> np.ndarray:
    """``B = -1/2 J D^2 J`` with ``J = I - 11^T/n``."""
    d2 = np.asarray(distances, dtype=np.float64) ** 2
    n = d2.shape[0]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    return -0.5 * j @ d2 @ j


@dataclass
class Embedding2D:
    names: list[str]
    coords: np.ndarray  # (n, 2)
    eigenvalues: np.ndarray
    stress: float

    def pairwise(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("task", "x", "y"))
        for name, (x, y) in zip(self.names, self.coords):
            w.writerow((name, repr(float(x)), repr(float(y))))
        return buf.getvalue()


def mds_embed(distances, names: Sequence[str] | None = None) -> Embedding2D:
    """Classical (Torgerson) MDS into two dimensions.

    Accepts a :class:`SimilarityMatrix` (using ``1 - rho``) or a raw distance
    matrix. Coordinates are gauge-fixed so the first point has non-negative
    coordinates on both axes.
    """
    if isinstance(distances, SimilarityMatrix):
        names = distances.names
        d = distances.distances
    else:
        d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise InputError("MDS needs at least two points")
    names = list(names) if names is not None else [str(i) for i in range(n)]
    d = 0.5 * (d + d.T)
    values, vectors = jacobi_eigh(double_center(d))
    top = np.clip(values[:2], 0.0, None)
    if top.size < 2:
        top = np.concatenate([top, np.zeros(2 - top.size)])
        vectors = np.concatenate([vectors, np.zeros((n, 2 - vectors.shape[1]))], axis=1)
    coords = vectors[:, :2] * np.sqrt(top)
    for k in range(2):
        if coords[0, k] < 0 or (coords[0, k] == 0 and _first_nonzero(coords[:, k]) < 0):
            coords[:, k] = -coords[:, k]
    coords[np.abs(coords) < 1e-15] = 0.0
    emb = Embedding2D(names, coords, values, 0.0)
    denom = float(np.sum(d * d))
    emb.stress = math.sqrt(float(np.sum((d - emb.pairwise()) ** 2)) / denom) if denom > 0 else 0.0
    return emb


def _first_nonzero(col: np.ndarray) -> float:
    nz = col[np.abs(col) > 1e-12]
    return float(nz[0]) if nz.size else 0.0


# -- clustering ---------------------------------------------------------------------------

@dataclass
class ClusterSummary:
    intra: float | None
    inter: float | None

    @property
    def ratio(self) -> float | None:
        if self.intra is None or self.inter is None or self.inter == 0:
            return None
        return self.intra / self.inter


def cluster_summary(distances: np.ndarray, labels: Sequence[str]) -> ClusterSummary:
    """Mean distance over same-label pairs versus different-label pairs."""
    d = np.asarray(distances, dtype=np.float64)
    if len(labels) != d.shape[0]:
        raise InputError(f"{len(labels)} labels for {d.shape[0]} points")
    intra, inter = [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            (intra if labels[i] == labels[j] else inter).append(d[i, j])
    return ClusterSummary(math.fsum(intra) / len(intra) if intra else None,
                          math.fsum(inter) / len(inter) if inter else None)


def cluster_report(embedding: Embedding2D, labels: dict[str, str] | Sequence[str]) -> ClusterSummary:
    """Intra- versus inter-category distances in the embedded plane."""
    if isinstance(labels, dict):
        missing = [n for n in embedding.names if n not in labels]
        if missing:
            raise InputError(f"no category label for {missing}")
        labels = [labels[n] for n in embedding.names]
    return cluster_summary(embedding.pairwise(), labels)
