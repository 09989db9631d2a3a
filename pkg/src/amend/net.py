"""Compact multi-hypothesis trajectory predictor.

Architecture (all dense layers stored as ``W @ x + b``):

* neighbor layer: per-neighbor (rel. position, rel. velocity) at t=0 -> tanh
  features, max-pooled over valid neighbors (zero vector if none);
* encoder: [ego history displacements, pooled neighbors] -> tanh MLP -> latent;
* decoder trunk: tanh MLP on the latent;
* head: one linear block of ``k_max * t_pred * 2`` rows. Rows of hypothesis
  ``h`` are private to it; each hypothesis is the cumulative sum of its
  displacements from the origin.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import CanonicalSample

FORMAT_VERSION = 1
NEIGHBOR_INPUT_DIM = 4


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class NetConfig:
    t_hist: int = 8
    t_pred: int = 12
    neighbor_feature_dim: int = 16
    encoder_hidden_dims: tuple[int, ...] = (64, 64)
    latent_dim: int = 32
    decoder_hidden_dims: tuple[int, ...] = (64,)
    k_max: int = 20
    n_max: int = 8

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden_dims", tuple(int(d) for d in self.encoder_hidden_dims))
        object.__setattr__(self, "decoder_hidden_dims", tuple(int(d) for d in self.decoder_hidden_dims))
        dims = [self.neighbor_feature_dim, self.latent_dim, self.k_max, self.n_max, self.t_pred,
                *self.encoder_hidden_dims, *self.decoder_hidden_dims]
        if self.t_hist < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"invalid network config {self}")

    @property
    def hist_input_dim(self) -> int:
        return 2 * (self.t_hist - 1)

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder_hidden_dims) + 1

    @property
    def n_decoder_layers(self) -> int:
        return len(self.decoder_hidden_dims) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden_dims"] = list(self.encoder_hidden_dims)
        d["decoder_hidden_dims"] = list(self.decoder_hidden_dims)
        return d


@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(f"dense layer shapes {self.weights.shape} / {self.bias.shape} disagree")


@dataclass(frozen=True)
class Params:
    """Layer list of a predictor (``kind='predictor'``) or router (``kind='router'``)."""

    config: NetConfig
    layers: tuple[Dense, ...]
    kind: str = "predictor"
    meta: dict = field(default_factory=dict)

    def encoder_layers(self) -> tuple[Dense, ...]:
        return self.layers[: 1 + self.config.n_encoder_layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "Params":
        layers = tuple(
            Dense(arrays[2 * i], arrays[2 * i + 1], layer.activation) for i, layer in enumerate(self.layers)
        )
        return Params(self.config, layers, self.kind, dict(self.meta))


@dataclass(frozen=True)
class PredictionSet:
    hypotheses: np.ndarray  # (K, t_pred, 2)

    def __post_init__(self):
        h = np.asarray(self.hypotheses, dtype=float)
        if h.ndim != 3 or h.shape[0] < 1 or h.shape[2] != 2:
            raise ConfigError(f"prediction set must be (K, T, 2), got {h.shape}")
        object.__setattr__(self, "hypotheses", h)

    @property
    def K(self) -> int:
        return self.hypotheses.shape[0]


# ------------------------------------------------------------------- features

@dataclass(frozen=True)
class Batch:
    hist: np.ndarray  # (B, hist_input_dim)
    nbr: np.ndarray  # (B, n_max, 4)
    nbr_mask: np.ndarray  # (B, n_max)
    future: np.ndarray | None  # (B, t_pred, 2)

    def __len__(self) -> int:
        return len(self.hist)

    def take(self, idx) -> "Batch":
        return Batch(self.hist[idx], self.nbr[idx], self.nbr_mask[idx],
                     None if self.future is None else self.future[idx])


def neighbor_features(sample: CanonicalSample, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Relative position and velocity at t=0 of the ``n_max`` nearest neighbors."""
    feats = np.zeros((n_max, NEIGHBOR_INPUT_DIM))
    mask = np.zeros(n_max, dtype=bool)
    if len(sample.neighbors) == 0:
        return feats, mask
    ego_vel = sample.ego_history[-1] - sample.ego_history[-2]
    pos = sample.neighbors[:, -1]
    prev_ok = sample.neighbor_mask[:, -2]
    vel = np.where(prev_ok[:, None], sample.neighbors[:, -1] - sample.neighbors[:, -2], 0.0)
    order = np.argsort(np.hypot(pos[:, 0], pos[:, 1]), kind="stable")[:n_max]
    n = len(order)
    feats[:n, :2] = pos[order]
    feats[:n, 2:] = vel[order] - ego_vel
    mask[:n] = True
    return feats, mask


def make_batch(samples: Sequence[CanonicalSample], config: NetConfig) -> Batch:
    B = len(samples)
    hist = np.empty((B, config.hist_input_dim))
    nbr = np.zeros((B, config.n_max, NEIGHBOR_INPUT_DIM))
    mask = np.zeros((B, config.n_max), dtype=bool)
    has_future = B > 0 and all(s.ego_future is not None for s in samples)
    future = np.empty((B, config.t_pred, 2)) if has_future else None
    for i, s in enumerate(samples):
        if s.t_hist != config.t_hist:
            raise ConfigError(f"sample {s.sample_id} has t_hist={s.t_hist}, network expects {config.t_hist}")
        hist[i] = np.diff(s.ego_history, axis=0).ravel()
        nbr[i], mask[i] = neighbor_features(s, config.n_max)
        if has_future:
            if s.t_pred != config.t_pred:
                raise ConfigError(f"sample {s.sample_id} has t_pred={s.t_pred}, network expects {config.t_pred}")
            future[i] = s.ego_future
    return Batch(hist, nbr, mask, future)


# ------------------------------------------------------------------ init / io

def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> Dense:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), activation)


def _encoder_dims(config: NetConfig) -> list[tuple[int, int]]:
    dims = [config.hist_input_dim + config.neighbor_feature_dim, *config.encoder_hidden_dims, config.latent_dim]
    return list(zip(dims[:-1], dims[1:]))


def init_encoder(config: NetConfig, rng: np.random.Generator) -> list[Dense]:
    layers = [glorot_layer(rng, NEIGHBOR_INPUT_DIM, config.neighbor_feature_dim, "tanh")]
    layers += [glorot_layer(rng, i, o, "tanh") for i, o in _encoder_dims(config)]
    return layers


def init_params(config: NetConfig, seed: int | np.random.Generator) -> Params:
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    layers = init_encoder(config, rng)
    dims = [config.latent_dim, *config.decoder_hidden_dims]
    layers += [glorot_layer(rng, i, o, "tanh") for i, o in zip(dims[:-1], dims[1:])]
    layers.append(glorot_layer(rng, dims[-1], config.k_max * config.t_pred * 2, "linear"))
    return Params(config, tuple(layers))


def check_params(params: Params) -> None:
    cfg = params.config
    n_enc = 1 + cfg.n_encoder_layers
    expected = [(cfg.neighbor_feature_dim, NEIGHBOR_INPUT_DIM)] + [(o, i) for i, o in _encoder_dims(cfg)]
    if params.kind == "predictor":
        dims = [cfg.latent_dim, *cfg.decoder_hidden_dims]
        expected += [(o, i) for i, o in zip(dims[:-1], dims[1:])]
        expected.append((cfg.k_max * cfg.t_pred * 2, dims[-1]))
    if len(params.layers) < n_enc:
        raise ConfigError(f"expected at least {n_enc} layers, got {len(params.layers)}")
    for i, (layer, shape) in enumerate(zip(params.layers, expected)):
        if layer.weights.shape != shape:
            raise ConfigError(f"layer {i}: weights {layer.weights.shape}, config expects {shape}")
    if params.kind == "predictor" and len(params.layers) != len(expected):
        raise ConfigError(f"expected {len(expected)} layers, got {len(params.layers)}")


def params_to_dict(params: Params) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": params.kind,
        "net_config": params.config.to_dict(),
        **params.meta,
        "layers": [
            {
                "rows": int(l.weights.shape[0]),
                "cols": int(l.weights.shape[1]),
                "weights_row_major": l.weights.ravel().tolist(),
                "bias": l.bias.tolist(),
                "activation": l.activation,
            }
            for l in params.layers
        ],
    }


def params_from_dict(d: dict) -> Params:
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported model format_version {d.get('format_version')!r}")
    cfg = NetConfig(**d["net_config"])
    layers = tuple(
        Dense(
            np.asarray(l["weights_row_major"], dtype=float).reshape(l["rows"], l["cols"]),
            np.asarray(l["bias"], dtype=float),
            l["activation"],
        )
        for l in d["layers"]
    )
    reserved = {"format_version", "kind", "net_config", "layers"}
    meta = {k: v for k, v in d.items() if k not in reserved}
    params = Params(cfg, layers, d.get("kind", "predictor"), meta)
    check_params(params)
    return params


def save_params(params: Params, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)), encoding="utf-8")


def load_params(path: str | Path) -> Params:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -------------------------------------------------------------- forward/back

def _act(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else z


def _check(a: np.ndarray, layer: int, what: str = "activation") -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite {what}", layer)


def mlp_forward(layers: Sequence[Dense], x: np.ndarray, offset: int = 0) -> tuple[np.ndarray, list]:
    cache = []
    for i, layer in enumerate(layers):
        y = _act(x @ layer.weights.T + layer.bias, layer.activation)
        _check(y, offset + i)
        cache.append((x, y))
        x = y
    return x, cache


def mlp_backward(layers: Sequence[Dense], cache: list, dout: np.ndarray, offset: int = 0):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x, y = cache[i]
        dz = dout * (1.0 - y * y) if layer.activation == "tanh" else dout
        _check(dz, offset + i, "gradient")
        grads[i] = (dz.T @ x, dz.sum(axis=0))
        dout = dz @ layer.weights
    return grads, dout


def encoder_forward(layers: Sequence[Dense], batch: Batch):
    nl = layers[0]
    act = np.tanh(batch.nbr @ nl.weights.T + nl.bias)  # (B, N, F)
    _check(act, 0)
    masked = np.where(batch.nbr_mask[..., None], act, -np.inf)
    arg = np.argmax(masked, axis=1)  # (B, F), first max wins
    any_valid = batch.nbr_mask.any(axis=1)
    pooled = np.where(any_valid[:, None], np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0, :], 0.0)
    x = np.concatenate([batch.hist, pooled], axis=1)
    z, cache = mlp_forward(layers[1:], x, offset=1)
    return z, (act, arg, any_valid, cache)


def encoder_backward(layers: Sequence[Dense], batch: Batch, enc_cache, dz: np.ndarray):
    act, arg, any_valid, cache = enc_cache
    grads, dx = mlp_backward(layers[1:], cache, dz, offset=1)
    dpooled = dx[:, batch.hist.shape[1]:] * any_valid[:, None]
    B, N, F = act.shape
    dact = np.zeros_like(act)
    rows = np.repeat(np.arange(B), F)
    cols = np.tile(np.arange(F), B)
    dact[rows, arg.ravel(), cols] = dpooled.ravel()
    dpre = dact * (1.0 - act * act)
    _check(dpre, 0, "gradient")
    nl_grad = (
        np.einsum("bnf,bni->fi", dpre, batch.nbr),
        dpre.sum(axis=(0, 1)),
    )
    return [nl_grad] + grads


def encode_batch(params: Params, batch: Batch) -> np.ndarray:
    return encoder_forward(params.encoder_layers(), batch)[0]


def _decoder_layers(params: Params):
    return params.layers[1 + params.config.n_encoder_layers:]


def decode_batch(params: Params, z: np.ndarray, K: int | None = None) -> np.ndarray:
    """Latents (B, latent) -> hypotheses (B, K, t_pred, 2)."""
    cfg = params.config
    K = cfg.k_max if K is None else K
    if not 1 <= K <= cfg.k_max:
        raise ConfigError(f"K={K} outside [1, {cfg.k_max}]")
    dec = _decoder_layers(params)
    h, _ = mlp_forward(dec[:-1], z)
    head = dec[-1]
    rows = K * cfg.t_pred * 2
    disp = h @ head.weights[:rows].T + head.bias[:rows]
    return np.cumsum(disp.reshape(len(z), K, cfg.t_pred, 2), axis=2)


def predict_batch(params: Params, batch: Batch, K: int | None = None) -> np.ndarray:
    return decode_batch(params, encode_batch(params, batch), K)


def encode(sample: CanonicalSample, params: Params) -> np.ndarray:
    check_params(params)
    return encode_batch(params, make_batch([sample], params.config))[0]


def decode(z: np.ndarray, params: Params, K: int | None = None) -> PredictionSet:
    z = np.asarray(z, dtype=float)
    if z.shape != (params.config.latent_dim,):
        raise ConfigError(f"latent has shape {z.shape}, expected ({params.config.latent_dim},)")
    return PredictionSet(decode_batch(params, z[None], K)[0])


# ------------------------------------------------------------------- losses

def hypothesis_errors(hyps: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Mean squared Euclidean distance per hypothesis; hyps (..., K, T, 2)."""
    return np.mean(np.sum((hyps - truth[..., None, :, :]) ** 2, axis=-1), axis=-1)


def winner_gate(errors: np.ndarray, k: int) -> np.ndarray:
    """(B, K) matrix holding 1/k on each row's k smallest errors (lower index wins ties)."""
    order = np.argsort(errors, axis=-1, kind="stable")[..., :k]
    gate = np.zeros_like(errors)
    np.put_along_axis(gate, order, 1.0 / k, axis=-1)
    return gate


def ewta_loss(pred: PredictionSet, truth: np.ndarray, k: int) -> float:
    if not 1 <= k <= pred.K:
        raise ValueError(f"k={k} outside [1, {pred.K}]")
    errs = hypothesis_errors(pred.hypotheses, np.asarray(truth, dtype=float))
    return float(np.sort(errs, kind="stable")[:k].mean())


def predictor_loss_and_grad(params: Params, batch: Batch, k: int, weights: np.ndarray | None = None):
    """Mean weighted EWTA loss over the batch and its gradient per layer."""
    cfg = params.config
    B = len(batch)
    enc_layers = params.encoder_layers()
    dec = _decoder_layers(params)
    z, enc_cache = encoder_forward(enc_layers, batch)
    h, trunk_cache = mlp_forward(dec[:-1], z, offset=len(enc_layers))
    head = dec[-1]
    disp = h @ head.weights.T + head.bias
    _check(disp, len(params.layers) - 1)
    hyps = np.cumsum(disp.reshape(B, cfg.k_max, cfg.t_pred, 2), axis=2)

    errs = hypothesis_errors(hyps, batch.future)
    gate = winner_gate(errs, k)
    per_sample = np.sum(gate * errs, axis=1)
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
    loss = float(np.sum(w * per_sample) / B)

    coef = (w[:, None] * gate)[:, :, None, None] * (2.0 / (cfg.t_pred * B))
    dpos = coef * (hyps - batch.future[:, None])
    ddisp = np.flip(np.cumsum(np.flip(dpos, axis=2), axis=2), axis=2).reshape(B, -1)
    head_grad = (ddisp.T @ h, ddisp.sum(axis=0))
    dh = ddisp @ head.weights
    trunk_grads, dz = mlp_backward(dec[:-1], trunk_cache, dh, offset=len(enc_layers))
    enc_grads = encoder_backward(enc_layers, batch, enc_cache, dz)
    return loss, enc_grads + trunk_grads + [head_grad]


def backward(sample: CanonicalSample, truth: np.ndarray, params: Params, k: int):
    """Exact gradient of the single-sample EWTA loss as a list of (dW, db)."""
    batch = make_batch([sample], params.config)
    batch = Batch(batch.hist, batch.nbr, batch.nbr_mask, np.asarray(truth, dtype=float)[None])
    return predictor_loss_and_grad(params, batch, k)[1]


# ------------------------------------------------------------------ metrics

def min_ade_batch(hyps: np.ndarray, truth: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(hyps - truth[:, None], axis=-1).mean(axis=-1)
    return d.min(axis=1)


def min_fde_batch(hyps: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.linalg.norm(hyps[:, :, -1] - truth[:, None, -1], axis=-1).min(axis=1)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ewta_decay: float = 0.8
    ewta_patience: int = 5


@dataclass
class EwtaSchedule:
    k_current: int
    decay_factor: float = 0.8
    patience_epochs: int = 5
    best_metric_so_far: float = math.inf
    stale_epochs: int = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's validation metric; return True on improvement."""
        if metric < self.best_metric_so_far:
            self.best_metric_so_far = metric
            self.stale_epochs = 0
            return True
        self.stale_epochs += 1
        if self.stale_epochs >= self.patience_epochs and self.k_current > 1:
            # ceil(0.8 k) stalls at k=4; always shrink by at least one
            self.k_current = max(1, min(self.k_current - 1, math.ceil(self.decay_factor * self.k_current)))
            self.stale_epochs = 0
        return False


class Adam:
    def __init__(self, arrays: Sequence[np.ndarray], opts: TrainOptions):
        self.opts = opts
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        o = self.opts
        self.t += 1
        c1 = 1.0 - o.beta1 ** self.t
        c2 = 1.0 - o.beta2 ** self.t
        out = []
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= o.beta1
            m += (1.0 - o.beta1) * g
            v *= o.beta2
            v += (1.0 - o.beta2) * g * g
            out.append(a - o.lr * (m / c1) / (np.sqrt(v / c2) + o.eps))
        return out


def flatten_grads(grads) -> list[np.ndarray]:
    out = []
    for gw, gb in grads:
        out += [gw, gb]
    return out


def run_adam(
    params: Params,
    n: int,
    loss_and_grad: Callable[[Params, np.ndarray], tuple[float, list]],
    opts: TrainOptions,
    rng: np.random.Generator,
    on_epoch: Callable[[Params, int, float], None] | None = None,
) -> Params:
    """Shuffled mini-batch Adam; the only source of randomness is ``rng``."""
    arrays = params.arrays()
    adam = Adam(arrays, opts)
    for epoch in range(opts.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opts.batch_size):
            idx = order[start : start + opts.batch_size]
            loss, grads = loss_and_grad(params, idx)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            arrays = adam.step(arrays, flatten_grads(grads))
            params = params.with_arrays(arrays)
        if on_epoch is not None:
            on_epoch(params, epoch, total / n)
    return params


@dataclass
class TrainResult:
    params: Params
    k_history: list[int]
    val_history: list[float]
    loss_history: list[float]
    best_epoch: int


def evaluate_min_ade(params: Params, batch: Batch, chunk: int = 512) -> float:
    vals = [min_ade_batch(predict_batch(params, batch.take(slice(s, s + chunk))), batch.future[s : s + chunk])
            for s in range(0, len(batch), chunk)]
    return float(np.mean(np.concatenate(vals)))


def train(
    dataset: Sequence[CanonicalSample] | Batch,
    val_set: Sequence[CanonicalSample] | Batch | None,
    config: NetConfig,
    seed: int,
    epochs: int | None = None,
    loss_weights: np.ndarray | None = None,
    options: TrainOptions = TrainOptions(),
) -> TrainResult:
    """Train a predictor with EWTA; returns the parameters with best validation minADE.

    With no validation set the training set is used for model selection.
    """
    if epochs is not None:
        options = TrainOptions(**{**asdict(options), "epochs": epochs})
    if options.epochs < 1:
        raise ValueError("epochs must be >= 1")
    data = dataset if isinstance(dataset, Batch) else make_batch(dataset, config)
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.future is None:
        raise ValueError("training samples need ground-truth futures")
    val = data if val_set is None or len(val_set) == 0 else (
        val_set if isinstance(val_set, Batch) else make_batch(val_set, config))
    weights = np.ones(len(data)) if loss_weights is None else np.asarray(loss_weights, dtype=float)
    if weights.shape != (len(data),):
        raise ValueError(f"loss_weights must have shape ({len(data)},)")

    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    sched = EwtaSchedule(config.k_max, options.ewta_decay, options.ewta_patience)
    result = TrainResult(params, [], [], [], -1)

    def loss_and_grad(p, idx):
        return predictor_loss_and_grad(p, data.take(idx), sched.k_current, weights[idx])

    def on_epoch(p, epoch, mean_loss):
        metric = evaluate_min_ade(p, val)
        result.k_history.append(sched.k_current)
        result.val_history.append(metric)
        result.loss_history.append(mean_loss)
        if sched.step(metric):
            result.params = p
            result.best_epoch = epoch

    run_adam(params, len(data), loss_and_grad, options, rng, on_epoch)
    return result
