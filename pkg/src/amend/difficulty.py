"""Constant-velocity Kalman difficulty scores and Top-alpha% splits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DEFAULT_DT, TrajectorySample


@dataclass(frozen=True)
class DifficultyScore:
    sample_id: int
    score: float


@dataclass(frozen=True)
class KalmanModel:
    """State (x, y, vx, vy) under constant velocity.

    ``q`` scales white-noise acceleration, ``r`` is the per-axis observation
    variance.
    """

    dt: float = DEFAULT_DT
    q: float = 0.1
    r: float = 0.1

    @property
    def F(self) -> np.ndarray:
        F = np.eye(4)
        F[0, 2] = F[1, 3] = self.dt
        return F

    @property
    def Q(self) -> np.ndarray:
        dt = self.dt
        blk = self.q * np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]])
        Q = np.zeros((4, 4))
        for axis in (0, 1):
            idx = np.ix_([axis, axis + 2], [axis, axis + 2])
            Q[idx] = blk
        return Q

    @property
    def H(self) -> np.ndarray:
        return np.eye(2, 4)

    def predict(self, x, P):
        F = self.F
        P = F @ P @ F.T + self.Q
        return F @ x, 0.5 * (P + P.T)

    def update(self, x, P, z):
        H = self.H
        S = H @ P @ H.T + self.r * np.eye(2)
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (z - H @ x)
        A = np.eye(4) - K @ H
        P = A @ P @ A.T + self.r * K @ K.T  # Joseph form keeps P symmetric PSD
        return x, 0.5 * (P + P.T)


def kalman_forecast(history: np.ndarray, t_pred: int, model: KalmanModel, trace: list | None = None) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    x = np.concatenate([history[1], (history[1] - history[0]) / model.dt])
    P = np.eye(4)
    if trace is not None:
        trace.append(P)
    for z in history[2:]:
        x, P = model.predict(x, P)
        x, P = model.update(x, P, z)
        if trace is not None:
            trace.append(P)
    out = np.empty((t_pred, 2))
    for t in range(t_pred):
        x, P = model.predict(x, P)
        if trace is not None:
            trace.append(P)
        out[t] = x[:2]
    return out


def kalman_score(
    sample: TrajectorySample, dt: float = DEFAULT_DT, q: float = 0.1, r: float = 0.1
) -> DifficultyScore:
    """ADE + FDE of the open-loop Kalman forecast, in meters."""
    fut = sample.ego_future
    pred = kalman_forecast(sample.ego_history, len(fut), KalmanModel(dt, q, r))
    dist = np.linalg.norm(pred - fut, axis=1)
    return DifficultyScore(sample.sample_id, float(dist.mean() + dist[-1]))


def top_percent_split(scores: Sequence[DifficultyScore], alpha: float) -> set[int]:
    """Ids of the ceil(alpha% * n) hardest samples; equal scores favour lower ids."""
    if not scores:
        raise ValueError("no difficulty scores")
    if not 0 < alpha <= 100:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    n_top = math.ceil(Fraction(repr(float(alpha))) * len(scores) / 100)
    ranked = sorted(scores, key=lambda s: (-s.score, s.sample_id))
    return {s.sample_id for s in ranked[:n_top]}


def save_scores(scores: Iterable[DifficultyScore], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(f"{s.sample_id}\t{float(s.score)!r}\n")


def load_scores(path: str | Path) -> list[DifficultyScore]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            sid, score = line.split("\t")
            out.append(DifficultyScore(int(sid), float(score)))
    return out
