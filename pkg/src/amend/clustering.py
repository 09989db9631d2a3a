"""K-means partitioning of training samples in latent or endpoint space."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CanonicalSample
from .net import Params, encode_batch, make_batch

BASES = ("latent", "endpoint")


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    basis: str
    centroids: np.ndarray  # (C, d)
    assignment: dict[int, int]
    inertia: float
    seed: int = 0
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def C(self) -> int:
        return len(self.centroids)

    def to_dict(self) -> dict:
        return {"basis": self.basis, "C": self.C, "centroids": self.centroids.tolist(), "seed": self.seed}

    def save(self, path: str | Path, assignment_path: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")
        if assignment_path is not None:
            with Path(assignment_path).open("w", encoding="utf-8") as fh:
                for sid in sorted(self.assignment):
                    fh.write(f"{sid}\t{self.assignment[sid]}\n")

    @classmethod
    def load(cls, path: str | Path, assignment_path: str | Path | None = None) -> "ClusterModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        assignment = {}
        if assignment_path is not None:
            for line in Path(assignment_path).read_text(encoding="utf-8").splitlines():
                if line.strip():
                    sid, c = line.split("\t")
                    assignment[int(sid)] = int(c)
        cents = np.asarray(d["centroids"], dtype=float).reshape(int(d["C"]), -1)
        return cls(d["basis"], cents, assignment, float("nan"), int(d.get("seed", 0)))


def _sq_dists(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)


def _kmeans_pp(X: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, C):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def _assign_and_repair(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels; each empty cluster takes the point farthest from its centroid."""
    centroids = centroids.copy()
    d2 = _sq_dists(X, centroids)
    labels = np.argmin(d2, axis=1)
    counts = np.bincount(labels, minlength=len(centroids))
    for c in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(X)), labels]
        movable = counts[labels] > 1
        if not movable.any():
            break
        far = int(np.argmax(np.where(movable, own, -1.0)))
        counts[labels[far]] -= 1
        labels[far] = c
        counts[c] = 1
        centroids[c] = X[far]
        d2[:, c] = np.sum((X - X[far]) ** 2, axis=1)
    return labels, centroids


def _inertia(X, labels, centroids) -> float:
    return float(np.sum((X - centroids[labels]) ** 2))


def _lloyd(X, centroids, max_iter, tol):
    trace = []
    for _ in range(max_iter):
        labels, centroids = _assign_and_repair(X, centroids)
        trace.append(_inertia(X, labels, centroids))
        new = np.array([X[labels == c].mean(axis=0) for c in range(len(centroids))])
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    labels, centroids = _assign_and_repair(X, centroids)
    trace.append(_inertia(X, labels, centroids))
    return labels, centroids, trace


def _means(X, labels, fallback):
    out = fallback.copy()
    for c in range(len(fallback)):
        members = labels == c
        if members.any():
            out[c] = X[members].mean(axis=0)
    return out


def _hartigan(X, labels, centroids, trace, max_moves):
    """Single-point transfers that strictly lower inertia; escapes some Lloyd fixed points.

    Moving x from cluster a (size n_a) to b changes inertia by
    n_b/(n_b+1) |x - mu_b|^2 - n_a/(n_a-1) |x - mu_a|^2.
    """
    labels = labels.copy()
    C = len(centroids)
    centroids = _means(X, labels, centroids)
    trace.append(_inertia(X, labels, centroids))
    rows = np.arange(len(X))
    for _ in range(max_moves):
        counts = np.bincount(labels, minlength=C).astype(float)
        d2 = _sq_dists(X, centroids)
        n_own = counts[labels]
        movable = n_own > 1  # never empty a cluster
        removal = np.zeros(len(X))
        removal[movable] = n_own[movable] / (n_own[movable] - 1) * d2[rows, labels][movable]
        delta = counts / (counts + 1) * d2 - removal[:, None]
        delta[~movable] = np.inf
        delta[rows, labels] = np.inf
        i, c = np.unravel_index(np.argmin(delta), delta.shape)
        # relative margin keeps rounding noise from triggering endless swaps
        if not delta[i, c] < -1e-12 * max(1.0, trace[-1]):
            break
        labels[i] = c
        centroids = _means(X, labels, centroids)
        trace.append(_inertia(X, labels, centroids))
    return labels, centroids, trace


def fit_kmeans(
    points,
    C: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
    sample_ids: Sequence[int] | None = None,
    basis: str = "latent",
) -> ClusterModel:
    """k-means++ seeded Lloyd iterations polished by Hartigan transfers, best of ``n_init`` restarts."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= C <= n:
        raise ClusteringError(f"need 1 <= C <= n, got C={C}, n={n}")
    if not np.all(np.isfinite(X)):
        raise ClusteringError("points must be finite")
    ids = list(range(n)) if sample_ids is None else [int(i) for i in sample_ids]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        labels, centroids, trace = _lloyd(X, _kmeans_pp(X, C, rng), max_iter, tol)
        labels, centroids, trace = _hartigan(X, labels, centroids, trace, max_moves=10 * n)
        if best is None or trace[-1] < best[2][-1]:
            best = (labels, centroids, trace)
    labels, centroids, trace = best
    return ClusterModel(
        basis=basis,
        centroids=centroids,
        assignment={sid: int(l) for sid, l in zip(ids, labels)},
        inertia=trace[-1],
        seed=seed,
        inertia_trace=trace,
    )


def latent_basis(samples: Sequence[CanonicalSample], params: Params | None) -> np.ndarray:
    if params is None:
        raise ClusteringError("latent basis requires a fitted encoder")
    return encode_batch(params, make_batch(samples, params.config))


def endpoint_basis(samples: Sequence[CanonicalSample]) -> np.ndarray:
    return np.array([s.ego_future[-1] for s in samples], dtype=float).reshape(-1, 2)


def assign(point, model: ClusterModel) -> int:
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != model.centroids.shape[1:]:
        raise ClusteringError(f"point dimension {p.shape} does not match centroids {model.centroids.shape[1:]}")
    return int(np.argmin(np.sum((model.centroids - p) ** 2, axis=1)))


def assign_batch(points: np.ndarray, model: ClusterModel) -> np.ndarray:
    return np.argmin(_sq_dists(np.asarray(points, dtype=float), model.centroids), axis=1)
