"""Trajectory ingestion, windowing, canonical frames and synthetic datasets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

T_HIST = 8
T_PRED = 12
DEFAULT_DT = 0.4
EPS_STATIONARY = 1e-9


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(DatasetError):
    pass


class DegenerateScaleError(DatasetError):
    pass


class SynthConfigError(ValueError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawTrack:
    agent_id: int
    frame_ids: np.ndarray  # (n,) int
    positions: np.ndarray  # (n, 2) meters

    def __post_init__(self):
        object.__setattr__(self, "frame_ids", _frozen(self.frame_ids, np.int64))
        object.__setattr__(self, "positions", _frozen(self.positions).reshape(-1, 2))
        if len(self.frame_ids) == 0 or len(self.frame_ids) != len(self.positions):
            raise DatasetError("track needs at least one point and matching frames/positions")
        steps = np.diff(self.frame_ids)
        if len(steps) and (np.any(steps <= 0) or np.any(steps != steps[0])):
            raise DatasetError(f"agent {self.agent_id}: frame ids must increase by a constant stride")

    def __len__(self) -> int:
        return len(self.frame_ids)


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    ego_history: np.ndarray  # (t_hist, 2)
    ego_future: np.ndarray | None  # (t_pred, 2); None at inference time
    neighbors: np.ndarray  # (n, t_hist, 2), zeros where masked
    neighbor_mask: np.ndarray  # (n, t_hist) bool
    sample_id: int
    source: tuple[str, int, int] = ("", -1, -1)
    label: int | None = None  # generating mode for synthetic data; never a model input

    def __post_init__(self):
        hist = _frozen(self.ego_history)
        object.__setattr__(self, "ego_history", hist)
        if self.ego_future is not None:
            object.__setattr__(self, "ego_future", _frozen(self.ego_future))
        nb = _frozen(self.neighbors).reshape(-1, len(hist), 2)
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "neighbor_mask", _frozen(self.neighbor_mask, bool).reshape(len(nb), len(hist)))
        object.__setattr__(self, "source", tuple(self.source))
        if len(nb) and not self.neighbor_mask[:, -1].all():
            raise DatasetError(f"sample {self.sample_id}: every neighbor must be observed at t=0")

    @property
    def t_hist(self) -> int:
        return len(self.ego_history)

    @property
    def t_pred(self) -> int:
        return 0 if self.ego_future is None else len(self.ego_future)


@dataclass(frozen=True)
class NormalizationParams:
    scale: float

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise DegenerateScaleError(f"normalization scale must be positive, got {self.scale}")


@dataclass(frozen=True, eq=False)
class CanonicalSample(TrajectorySample):
    """A sample expressed in its own ego-centred, heading-aligned, scaled frame.

    `rotation` is the angle applied after translating by `-translation`;
    `scale` divides every coordinate.
    """

    rotation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "translation", _frozen(self.translation))


# --------------------------------------------------------------------------- io

def _parse_frame(token: str) -> int:
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"frame id {token!r} is not an integer")
    return int(value)


def load_dataset(path: str | Path, stride: int) -> list[RawTrack]:
    """Read a `frame<TAB>agent<TAB>x<TAB>y` file into gap-free tracks."""
    path = Path(path)
    obs: dict[int, dict[int, tuple[float, float]]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 4:
                raise ParseError(line_no, f"expected 4 tab-separated fields, got {len(parts)}")
            try:
                frame, agent = _parse_frame(parts[0]), _parse_frame(parts[1])
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(line_no, "non-finite coordinate")
            per_agent = obs.setdefault(agent, {})
            if frame in per_agent:
                raise ParseError(line_no, f"duplicate observation of agent {agent} at frame {frame}")
            per_agent[frame] = (x, y)
    if not obs:
        raise EmptyDatasetError(f"{path} contains no observations")

    tracks = []
    for agent in sorted(obs):
        frames = sorted(obs[agent])
        start = 0
        for i in range(1, len(frames) + 1):
            if i == len(frames) or frames[i] - frames[i - 1] != stride:
                seg = frames[start:i]
                tracks.append(RawTrack(agent, seg, [obs[agent][f] for f in seg]))
                start = i
    return tracks


def save_tracks(tracks: Iterable[RawTrack], path: str | Path) -> None:
    rows = []
    for tr in tracks:
        for f, (x, y) in zip(tr.frame_ids, tr.positions):
            rows.append((int(f), tr.agent_id, x, y))
    rows.sort()
    with Path(path).open("w", encoding="utf-8") as fh:
        for f, a, x, y in rows:
            fh.write(f"{f}\t{a}\t{float(x)!r}\t{float(y)!r}\n")


# --------------------------------------------------------------------- windows

def window_samples(
    tracks: Sequence[RawTrack],
    t_hist: int = T_HIST,
    t_pred: int = T_PRED,
    scene: str = "",
    start_id: int = 0,
) -> list[TrajectorySample]:
    if t_hist < 2 or t_pred < 1:
        raise ValueError("window_samples needs t_hist >= 2 and t_pred >= 1")
    at_frame: dict[int, dict[int, np.ndarray]] = {}
    for tr in tracks:
        for f, p in zip(tr.frame_ids, tr.positions):
            at_frame.setdefault(int(f), {})[tr.agent_id] = p

    samples = []
    span = t_hist + t_pred
    for tr in tracks:
        if len(tr) < span:
            continue
        stride = int(tr.frame_ids[1] - tr.frame_ids[0])
        for a in range(t_hist - 1, len(tr) - t_pred):
            anchor = int(tr.frame_ids[a])
            hist_frames = [anchor - (t_hist - 1 - j) * stride for j in range(t_hist)]
            others = sorted(k for k in at_frame[anchor] if k != tr.agent_id)
            nbrs = np.zeros((len(others), t_hist, 2))
            mask = np.zeros((len(others), t_hist), dtype=bool)
            for n, other in enumerate(others):
                for j, f in enumerate(hist_frames):
                    p = at_frame.get(f, {}).get(other)
                    if p is not None:
                        nbrs[n, j] = p
                        mask[n, j] = True
            samples.append(
                TrajectorySample(
                    ego_history=tr.positions[a - t_hist + 1 : a + 1],
                    ego_future=tr.positions[a + 1 : a + 1 + t_pred],
                    neighbors=nbrs,
                    neighbor_mask=mask,
                    sample_id=start_id + len(samples),
                    source=(scene, tr.agent_id, anchor),
                )
            )
    return samples


# --------------------------------------------------------------- normalization

def ego_displacements(sample: TrajectorySample) -> np.ndarray:
    track = sample.ego_history if sample.ego_future is None else np.vstack([sample.ego_history, sample.ego_future])
    return np.diff(track, axis=0)


def fit_normalization(samples: Sequence[TrajectorySample]) -> NormalizationParams:
    """Pooled population std of every per-step ego displacement component."""
    if not samples:
        raise EmptyDatasetError("cannot fit normalization on an empty training split")
    comps = np.concatenate([ego_displacements(s).ravel() for s in samples])
    scale = float(np.std(comps))
    if not scale > 0:
        raise DegenerateScaleError("all training agents are stationary; displacement std is 0")
    return NormalizationParams(scale)


def _heading_angle(history: np.ndarray) -> float:
    """Angle that rotates the last non-zero history displacement onto +y."""
    disp = np.diff(history, axis=0)
    for d in disp[::-1]:
        n = math.hypot(d[0], d[1])
        if n >= EPS_STATIONARY:
            return math.atan2(d[0] / n, d[1] / n)
    return 0.0


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def canonicalize(sample: TrajectorySample, params: NormalizationParams) -> CanonicalSample:
    origin = sample.ego_history[-1].copy()
    angle = _heading_angle(sample.ego_history)
    rot = _rotation(angle)

    def fwd(p):
        return ((p - origin) @ rot.T) / params.scale

    nbrs = np.where(sample.neighbor_mask[..., None], fwd(sample.neighbors), 0.0)
    return CanonicalSample(
        ego_history=fwd(sample.ego_history),
        ego_future=None if sample.ego_future is None else fwd(sample.ego_future),
        neighbors=nbrs,
        neighbor_mask=sample.neighbor_mask,
        sample_id=sample.sample_id,
        source=sample.source,
        label=sample.label,
        rotation=angle,
        translation=origin,
        scale=params.scale,
    )


def to_world(points: np.ndarray, canon: CanonicalSample) -> np.ndarray:
    """Map canonical-frame points (any leading shape, last axis 2) back to meters."""
    rot = _rotation(canon.rotation)
    return (np.asarray(points) * canon.scale) @ rot + canon.translation


def decanonicalize(pred, canon: CanonicalSample):
    from .net import PredictionSet

    return PredictionSet(to_world(pred.hypotheses, canon))


def restore_sample(canon: CanonicalSample) -> TrajectorySample:
    nbrs = np.where(canon.neighbor_mask[..., None], to_world(canon.neighbors, canon), 0.0)
    return TrajectorySample(
        ego_history=to_world(canon.ego_history, canon),
        ego_future=None if canon.ego_future is None else to_world(canon.ego_future, canon),
        neighbors=nbrs,
        neighbor_mask=canon.neighbor_mask,
        sample_id=canon.sample_id,
        source=canon.source,
        label=canon.label,
    )


# ------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class MotionMode:
    name: str
    weight: float
    speed_range: tuple[float, float]
    turn_rate: float = 0.0  # rad/s, positive turns left
    accel: float = 0.0  # m/s^2, speed clipped at 0
    turn_start: int = 0  # step index (0 = first history point) where turning begins


@dataclass(frozen=True)
class SynthSpec:
    modes: tuple[MotionMode, ...]
    noise_sigma: float = 0.0
    n_samples: int = 1000
    seed: int = 0
    t_hist: int = T_HIST
    t_pred: int = T_PRED
    dt: float = DEFAULT_DT
    max_neighbors: int = 3
    arena: float = 10.0

    def __post_init__(self):
        if not self.modes:
            raise SynthConfigError("at least one motion mode is required")
        weights = [Fraction(repr(float(m.weight))) for m in self.modes]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1) > Fraction(1, 10**9):
            raise SynthConfigError(f"mode weights must be non-negative and sum to 1, got {[m.weight for m in self.modes]}")
        if self.noise_sigma < 0 or self.n_samples < 0:
            raise SynthConfigError("noise_sigma and n_samples must be non-negative")
        for m in self.modes:
            lo, hi = m.speed_range
            if lo < 0 or hi < lo:
                raise SynthConfigError(f"mode {m.name}: bad speed_range {m.speed_range}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        modes = tuple(
            MotionMode(
                name=m["name"],
                weight=float(m["weight"]),
                speed_range=tuple(float(v) for v in m["speed_range"]),
                turn_rate=float(m.get("turn_rate", 0.0)),
                accel=float(m.get("accel", 0.0)),
                turn_start=int(m.get("turn_start", 0)),
            )
            for m in d.pop("modes")
        )
        return cls(modes=modes, **d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "modes": [
                {
                    "name": m.name,
                    "weight": m.weight,
                    "speed_range": list(m.speed_range),
                    "turn_rate": m.turn_rate,
                    "accel": m.accel,
                    "turn_start": m.turn_start,
                }
                for m in self.modes
            ],
            "noise_sigma": self.noise_sigma,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "t_hist": self.t_hist,
            "t_pred": self.t_pred,
            "dt": self.dt,
            "max_neighbors": self.max_neighbors,
            "arena": self.arena,
        }


def _rollout(mode: MotionMode, speed: float, heading: float, start: np.ndarray, n: int, dt: float) -> np.ndarray:
    pts = np.empty((n, 2))
    pts[0] = start
    for t in range(1, n):
        if t > mode.turn_start:
            heading += mode.turn_rate * dt
        speed = max(0.0, speed + mode.accel * dt)
        pts[t] = pts[t - 1] + speed * dt * np.array([math.cos(heading), math.sin(heading)])
    return pts


def synthesize_dataset(spec: SynthSpec, seed: int | None = None) -> list[TrajectorySample]:
    """Draw labelled samples from the mode mixture; a pure function of (spec, seed)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n_steps = spec.t_hist + spec.t_pred
    probs = np.array([m.weight for m in spec.modes], dtype=float)
    probs = probs / probs.sum()
    labels = rng.choice(len(spec.modes), size=spec.n_samples, p=probs)

    samples = []
    for i, label in enumerate(labels):
        mode = spec.modes[int(label)]
        speed = rng.uniform(*mode.speed_range)
        heading = rng.uniform(-math.pi, math.pi)
        start = rng.uniform(-spec.arena, spec.arena, size=2)
        track = _rollout(mode, speed, heading, start, n_steps, spec.dt)
        if spec.noise_sigma > 0:
            track = track + rng.normal(0.0, spec.noise_sigma, size=track.shape)

        n_nb = int(rng.integers(0, spec.max_neighbors + 1)) if spec.max_neighbors else 0
        nbrs = np.zeros((n_nb, spec.t_hist, 2))
        mask = np.ones((n_nb, spec.t_hist), dtype=bool)
        for j in range(n_nb):
            offset = rng.normal(0.0, 3.0, size=2)
            vel = rng.normal(0.0, 1.0, size=2)
            steps = np.arange(-spec.t_hist + 1, 1)[:, None] * spec.dt
            nbrs[j] = track[spec.t_hist - 1] + offset + steps * vel
            missing = int(rng.integers(0, spec.t_hist))  # leading steps unobserved
            mask[j, :missing] = False
            nbrs[j, :missing] = 0.0

        samples.append(
            TrajectorySample(
                ego_history=track[: spec.t_hist],
                ego_future=track[spec.t_hist :],
                neighbors=nbrs,
                neighbor_mask=mask,
                sample_id=i,
                source=("synthetic", i, spec.t_hist - 1),
                label=int(label),
            )
        )
    return samples


# ------------------------------------------------------------- serialization

def sample_to_dict(s: TrajectorySample) -> dict:
    return {
        "sample_id": s.sample_id,
        "source": list(s.source),
        "label": s.label,
        "ego_history": s.ego_history.tolist(),
        "ego_future": None if s.ego_future is None else s.ego_future.tolist(),
        "neighbors": s.neighbors.tolist(),
        "neighbor_mask": s.neighbor_mask.astype(int).tolist(),
    }


def sample_from_dict(d: dict) -> TrajectorySample:
    t_hist = len(d["ego_history"])
    nb = np.asarray(d["neighbors"], dtype=float).reshape(-1, t_hist, 2)
    return TrajectorySample(
        ego_history=d["ego_history"],
        ego_future=d["ego_future"],
        neighbors=nb,
        neighbor_mask=np.asarray(d["neighbor_mask"], dtype=bool).reshape(len(nb), t_hist),
        sample_id=int(d["sample_id"]),
        source=tuple(d["source"]),
        label=d.get("label"),
    )


def save_samples(samples: Iterable[TrajectorySample], path: str | Path) -> None:
    payload = [sample_to_dict(s) for s in samples]
    Path(path).write_text(json.dumps(payload, separators=(",", ":")), encoding="utf-8")


def load_samples(path: str | Path) -> list[TrajectorySample]:
    return [sample_from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
