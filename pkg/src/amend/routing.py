"""Expert selection: learned router, centroid-distance confidence, random and oracle policies.

Expert indices are 0-based throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import ClusterModel
from .data import CanonicalSample, decanonicalize
from .experts import ExpertEnsemble
from .net import (
    Batch,
    ConfigError,
    Dense,
    NetConfig,
    Params,
    PredictionSet,
    TrainOptions,
    encode_batch,
    encoder_backward,
    encoder_forward,
    glorot_layer,
    init_encoder,
    load_params,
    make_batch,
    min_ade_batch,
    min_fde_batch,
    mlp_backward,
    mlp_forward,
    predict_batch,
    run_adam,
    save_params,
)

POLICIES = ("router", "cluster", "random", "oracle")


@dataclass(frozen=True)
class ExpertRanking:
    sample_id: int
    rank_ade: tuple[int, ...]
    rank_fde: tuple[int, ...]
    c_best: int


def rank_values(values: Sequence[float]) -> tuple[int, ...]:
    """1 = smallest value; equal values rank the lower index first."""
    order = np.argsort(np.asarray(values, dtype=float), kind="stable")
    ranks = np.empty(len(order), dtype=int)
    ranks[order] = np.arange(1, len(order) + 1)
    return tuple(int(r) for r in ranks)


def ranking_from_metrics(sample_id: int, ade: Sequence[float], fde: Sequence[float]) -> ExpertRanking:
    r_ade, r_fde = rank_values(ade), rank_values(fde)
    total = np.add(r_ade, r_fde)
    return ExpertRanking(sample_id, r_ade, r_fde, int(np.argmin(total)))


def expert_metrics(batch: Batch, ensemble: ExpertEnsemble, trials: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """minADE and minFDE of every expert on every sample, each (B, C), canonical units.

    The predictors are deterministic, so ``trials`` repeats are averaged only
    for interface parity with stochastic backbones.
    """
    if batch.future is None:
        raise ValueError("ranking experts needs ground-truth futures")
    ade = np.zeros((len(batch), ensemble.C))
    fde = np.zeros((len(batch), ensemble.C))
    for _ in range(trials):
        for c, params in enumerate(ensemble.experts):
            hyps = predict_batch(params, batch)
            ade[:, c] += min_ade_batch(hyps, batch.future)
            fde[:, c] += min_fde_batch(hyps, batch.future)
    return ade / trials, fde / trials


def rank_experts_batch(samples: Sequence[CanonicalSample], ensemble: ExpertEnsemble, trials: int = 1) -> list[ExpertRanking]:
    ade, fde = expert_metrics(make_batch(samples, ensemble.net_config), ensemble, trials)
    return [ranking_from_metrics(s.sample_id, a, f) for s, a, f in zip(samples, ade, fde)]


def rank_experts(sample: CanonicalSample, ensemble: ExpertEnsemble, trials: int = 1) -> ExpertRanking:
    return rank_experts_batch([sample], ensemble, trials)[0]


def router_targets(rankings: Sequence[ExpertRanking], C: int) -> list[tuple[int, np.ndarray]]:
    out = []
    for r in rankings:
        t = np.zeros(C)
        t[r.c_best] = 1.0
        out.append((r.sample_id, t))
    return out


def save_rankings(rankings: Sequence[ExpertRanking], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rankings:
            fields = [r.sample_id, r.c_best, *r.rank_ade, *r.rank_fde]
            fh.write("\t".join(str(f) for f in fields) + "\n")


def load_rankings(path: str | Path) -> list[ExpertRanking]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        f = [int(v) for v in line.split("\t")]
        C = (len(f) - 2) // 2
        out.append(ExpertRanking(f[0], tuple(f[2 : 2 + C]), tuple(f[2 + C :]), f[1]))
    return out


# ---------------------------------------------------------------- confidences

def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class RouterNet:
    params: Params
    C: int
    temperature: float = 1.0
    hidden_dim: int = 232

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("router temperature must be positive")
        head = self.params.layers[len(self.params.encoder_layers()):]
        latent = self.params.config.latent_dim
        if [l.weights.shape for l in head] != [(self.hidden_dim, latent), (self.C, self.hidden_dim)]:
            raise ConfigError(f"router head shapes {[l.weights.shape for l in head]} do not match C={self.C}")

    def save(self, path: str | Path) -> None:
        meta = {"C": self.C, "temperature": self.temperature, "hidden_dim": self.hidden_dim}
        save_params(Params(self.params.config, self.params.layers, "router", meta), path)

    @classmethod
    def load(cls, path: str | Path) -> "RouterNet":
        p = load_params(path)
        return cls(p, int(p.meta["C"]), float(p.meta["temperature"]), int(p.meta["hidden_dim"]))


def init_router(config: NetConfig, C: int, hidden_dim: int, seed, warm_start: Params | None = None) -> Params:
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    layers = init_encoder(config, rng)
    if warm_start is not None:
        layers = list(warm_start.encoder_layers())
    layers += [glorot_layer(rng, config.latent_dim, hidden_dim, "tanh"), glorot_layer(rng, hidden_dim, C, "linear")]
    return Params(config, tuple(layers), "router", {"C": C, "hidden_dim": hidden_dim})


def router_logits(params: Params, batch: Batch) -> np.ndarray:
    z = encode_batch(params, batch)
    return mlp_forward(params.layers[len(params.encoder_layers()):], z)[0]


def router_loss_and_grad(params: Params, batch: Batch, targets: np.ndarray, temperature: float = 1.0):
    """Mean cross-entropy of softmax(logits / temperature) against target distributions."""
    enc = params.encoder_layers()
    head = params.layers[len(enc):]
    z, enc_cache = encoder_forward(enc, batch)
    logits, head_cache = mlp_forward(head, z, offset=len(enc))
    s = logits / temperature
    s = s - s.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    B = len(batch)
    loss = float(-np.sum(targets * logp) / B)
    dlogits = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / (B * temperature)
    head_grads, dz = mlp_backward(head, head_cache, dlogits, offset=len(enc))
    return loss, encoder_backward(enc, batch, enc_cache, dz) + head_grads


def train_router(
    dataset: Sequence[CanonicalSample] | Batch,
    targets: np.ndarray,
    config: NetConfig,
    seed: int,
    hidden_dim: int = 232,
    temperature: float = 1.0,
    options: TrainOptions = TrainOptions(),
    warm_start: Params | None = None,
    loss_history: list | None = None,
) -> RouterNet:
    data = dataset if isinstance(dataset, Batch) else make_batch(dataset, config)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or len(targets) != len(data):
        raise ValueError("targets must be a (n_samples, C) matrix covering the dataset")
    if len(data) == 0:
        raise ValueError("cannot train a router on an empty dataset")
    C = targets.shape[1]
    rng = np.random.default_rng(seed)
    params = init_router(config, C, hidden_dim, rng, warm_start)

    def loss_and_grad(p, idx):
        return router_loss_and_grad(p, data.take(idx), targets[idx], temperature)

    def on_epoch(p, epoch, mean_loss):
        if loss_history is not None:
            loss_history.append(mean_loss)

    params = run_adam(params, len(data), loss_and_grad, options, rng, on_epoch)
    params = replace(params, meta={"C": C, "temperature": temperature, "hidden_dim": hidden_dim})
    return RouterNet(params, C, temperature, hidden_dim)


def route_confidence_batch(batch: Batch, router: RouterNet) -> np.ndarray:
    return softmax(router_logits(router.params, batch), router.temperature)


def route_confidence(sample: CanonicalSample, router: RouterNet) -> np.ndarray:
    return route_confidence_batch(make_batch([sample], router.params.config), router)[0]


def cluster_confidence_batch(batch: Batch, encoder: Params, cluster_model: ClusterModel) -> np.ndarray:
    if cluster_model.basis != "latent":
        raise ValueError(f"cluster confidence needs a latent-basis cluster model, got {cluster_model.basis!r}")
    z = encode_batch(encoder, batch)
    dist = np.sqrt(np.sum((z[:, None, :] - cluster_model.centroids[None]) ** 2, axis=-1))
    return softmax(-dist)


def cluster_confidence(sample: CanonicalSample, encoder: Params, cluster_model: ClusterModel) -> np.ndarray:
    return cluster_confidence_batch(make_batch([sample], encoder.config), encoder, cluster_model)[0]


def select_expert(p) -> int:
    return int(np.argmax(np.asarray(p, dtype=float)))


def random_route(C: int, seed) -> int:
    """Uniform expert index; ``seed`` may be an int or a sequence such as (seed, sample_id)."""
    return int(np.random.default_rng(seed).integers(C))


def random_routes(C: int, seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(C, size=n)


# ------------------------------------------------------------------ inference

def choose_experts(
    samples: Sequence[CanonicalSample],
    ensemble: ExpertEnsemble,
    policy: str,
    router: RouterNet | None = None,
    encoder: Params | None = None,
    seed: int = 0,
) -> np.ndarray:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    batch = make_batch(samples, ensemble.net_config)
    if policy == "router":
        if router is None:
            raise ValueError("router policy needs a trained router")
        return np.argmax(route_confidence_batch(batch, router), axis=1)
    if policy == "cluster":
        if encoder is None:
            raise ValueError("cluster policy needs the baseline encoder")
        return np.argmax(cluster_confidence_batch(batch, encoder, ensemble.cluster_model), axis=1)
    if policy == "random":
        return np.array([random_route(ensemble.C, (seed, s.sample_id)) for s in samples], dtype=int)
    if batch.future is None:
        raise ValueError("oracle routing requires ground-truth futures")
    ade, fde = expert_metrics(batch, ensemble)
    return np.array([ranking_from_metrics(0, a, f).c_best for a, f in zip(ade, fde)], dtype=int)


def predict(
    sample: CanonicalSample,
    ensemble: ExpertEnsemble,
    policy: str = "router",
    router: RouterNet | None = None,
    encoder: Params | None = None,
    seed: int = 0,
) -> tuple[int, PredictionSet]:
    """Run exactly one expert, chosen by ``policy``; returns (expert, world-frame predictions)."""
    c = int(choose_experts([sample], ensemble, policy, router, encoder, seed)[0])
    hyps = predict_batch(ensemble.experts[c], make_batch([sample], ensemble.net_config))[0]
    return c, decanonicalize(PredictionSet(hyps), sample)
