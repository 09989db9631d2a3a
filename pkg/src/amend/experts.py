"""Cluster-specialized experts trained with an in/out-of-cluster weighted loss."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import ClusterModel
from .data import CanonicalSample, NormalizationParams
from .net import Batch, NetConfig, Params, TrainOptions, load_params, make_batch, save_params, train


@dataclass
class ExpertEnsemble:
    experts: list[Params]
    cluster_model: ClusterModel
    alpha: float
    normalization: NormalizationParams
    net_config: NetConfig

    def __post_init__(self):
        if len(self.experts) != self.cluster_model.C:
            raise ValueError(f"{len(self.experts)} experts for {self.cluster_model.C} clusters")
        if any(e.config != self.net_config for e in self.experts):
            raise ValueError("all experts must share the ensemble's net_config")

    @property
    def C(self) -> int:
        return len(self.experts)

    def save(self, directory: str | Path, cluster_file: str = "clusters.json") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c, params in enumerate(self.experts):
            save_params(params, directory / f"expert_{c}.json")
        manifest = {
            "C": self.C,
            "alpha": self.alpha,
            "cluster_file": cluster_file,
            "net_config": self.net_config.to_dict(),
            "scale": self.normalization.scale,
        }
        (directory / "ensemble.json").write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, cluster_model: ClusterModel) -> "ExpertEnsemble":
        directory = Path(directory)
        d = json.loads((directory / "ensemble.json").read_text(encoding="utf-8"))
        experts = [load_params(directory / f"expert_{c}.json") for c in range(int(d["C"]))]
        return cls(experts, cluster_model, float(d["alpha"]), NormalizationParams(d["scale"]),
                   NetConfig(**d["net_config"]))


def cluster_weights(in_cluster: np.ndarray, alpha: float) -> np.ndarray:
    """1 + alpha inside the expert's cluster, 1 - alpha outside."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return np.where(np.asarray(in_cluster, dtype=bool), 1.0 + alpha, 1.0 - alpha)


def weighted_batch_loss(losses: Sequence[float], in_cluster: Sequence[bool], alpha: float) -> float:
    losses = np.asarray(losses, dtype=float)
    return float(np.sum(cluster_weights(in_cluster, alpha) * losses) / len(losses))


def train_experts(
    dataset: Sequence[CanonicalSample],
    val_set: Sequence[CanonicalSample] | None,
    cluster_model: ClusterModel,
    alpha: float,
    config: NetConfig,
    seed: int,
    normalization: NormalizationParams,
    options: TrainOptions = TrainOptions(),
    shared_seed: bool = False,
) -> ExpertEnsemble:
    """Expert c sees every sample, reweighted towards cluster c; seed ``seed + c``.

    ``shared_seed`` trains every expert from ``seed`` instead.
    """
    try:
        labels = np.array([cluster_model.assignment[s.sample_id] for s in dataset])
    except KeyError as exc:
        raise ValueError(f"sample {exc.args[0]} has no cluster assignment") from None
    data = make_batch(dataset, config)
    val = None if not val_set else make_batch(val_set, config)
    experts = []
    for c in range(cluster_model.C):
        w = cluster_weights(labels == c, alpha)
        result = train(data, val, config, seed if shared_seed else seed + c, loss_weights=w, options=options)
        experts.append(result.params)
    return ExpertEnsemble(experts, cluster_model, alpha, normalization, config)
