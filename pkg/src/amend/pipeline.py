"""Stage-per-command training and evaluation pipeline with chained fingerprints.

Every stage writes its artifacts under the output directory plus a manifest in
``manifests/<command>.json``.  A stage's fingerprint hashes the config keys it
reads together with the fingerprints of the stages it consumes, so changing one
setting only invalidates that stage and everything downstream of it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .clustering import ClusterModel, assign_batch, endpoint_basis, fit_kmeans, latent_basis
from .data import (
    DatasetError,
    NormalizationParams,
    SynthSpec,
    canonicalize,
    fit_normalization,
    load_dataset,
    load_samples,
    save_samples,
    synthesize_dataset,
    window_samples,
)
from .difficulty import load_scores, kalman_score, save_scores, top_percent_split
from .evaluation import SPLITS, SampleError, build_report, errors_csv, format_table, routing_accuracy
from .experts import ExpertEnsemble, train_experts
from .net import (
    ConfigError,
    NetConfig,
    TrainOptions,
    load_params,
    make_batch,
    min_ade_batch,
    min_fde_batch,
    predict_batch,
    save_params,
    train,
)
from .routing import (
    POLICIES,
    RouterNet,
    choose_experts,
    expert_metrics,
    load_rankings,
    rank_experts_batch,
    router_targets,
    save_rankings,
    train_router,
)

log = logging.getLogger("amend")

THREE_MODES = [
    {"name": "straight", "weight": 0.7, "speed_range": [1.0, 1.6], "turn_rate": 0.0},
    {"name": "left", "weight": 0.2, "speed_range": [1.0, 1.6], "turn_rate": 0.6},
    {"name": "right", "weight": 0.1, "speed_range": [1.0, 1.6], "turn_rate": -0.6},
]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "amend_run",
    "data.source": "synth",
    "data.train_files": [],
    "data.val_files": [],
    "data.test_files": [],
    "data.stride": 10,
    "data.dt": 0.4,
    "data.val_fraction": 0.1,
    "data.test_fraction": 0.2,
    "synth.modes": THREE_MODES,
    "synth.noise_sigma": 0.0,
    "synth.n_samples": 3000,
    "synth.seed": None,
    "synth.max_neighbors": 3,
    "synth.arena": 10.0,
    "t_hist": 8,
    "t_pred": 12,
    "net.neighbor_feature_dim": 16,
    "net.encoder_hidden_dims": [64, 64],
    "net.latent_dim": 32,
    "net.decoder_hidden_dims": [64],
    "net.k_max": 20,
    "net.n_max": 8,
    "train.epochs": 300,
    "train.lr": 1e-3,
    "train.batch_size": 64,
    "train.ewta_decay": 0.8,
    "train.ewta_patience": 5,
    "cluster.C": 3,
    "cluster.basis": "latent",
    "cluster.n_init": 10,
    "cluster.max_iter": 300,
    "experts.alpha": 0.5,
    "experts.shared_seed": False,
    "router.hidden_dim": 232,
    "router.temperature": 1.0,
    "router.warm_start": False,
    "router.epochs": None,
    "difficulty.q": 0.1,
    "difficulty.r": 0.1,
    "eval.var_level": 0.97,
    "eval.policies": ["router", "cluster", "random", "oracle"],
    "eval.rank_trials": 1,
}

# Keys (or key prefixes ending in '.') that each stage reads, and its upstream stages.
STAGES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "synth": (("seed", "synth.", "t_hist", "t_pred", "data.dt"), ()),
    "prepare": (("seed", "data.", "t_hist", "t_pred", "difficulty."), ("synth",)),
    "train-baseline": (("seed", "net.", "train."), ("prepare",)),
    "embed": (("cluster.basis",), ("train-baseline",)),
    "cluster": (("seed", "cluster."), ("embed",)),
    "train-experts": (("seed", "experts."), ("cluster",)),
    "rank": (("eval.rank_trials",), ("train-experts",)),
    "train-router": (("seed", "router."), ("rank",)),
    "evaluate": (("eval.",), ("train-router",)),
}
COMMANDS = tuple(STAGES)


class MissingArtifactError(RuntimeError):
    pass


class FingerprintMismatch(MissingArtifactError):
    pass


# ------------------------------------------------------------------- config

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "synth.modes":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    updates = {}
    if path is not None:
        try:
            updates.update(_flatten(json.loads(Path(path).read_text(encoding="utf-8"))))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    updates.update(overrides or {})
    unknown = sorted(set(updates) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(updates)
    try:
        _validate(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["data.source"] not in ("synth", "tracks"):
        raise ConfigError("data.source must be 'synth' or 'tracks'")
    if cfg["cluster.basis"] not in ("latent", "endpoint"):
        raise ConfigError("cluster.basis must be 'latent' or 'endpoint'")
    if not 0 <= cfg["experts.alpha"] <= 1:
        raise ConfigError("experts.alpha must lie in [0, 1]")
    bad = [p for p in cfg["eval.policies"] if p not in POLICIES]
    if bad or not cfg["eval.policies"]:
        raise ConfigError(f"eval.policies must be a non-empty subset of {POLICIES}")
    if not 0 < cfg["eval.var_level"] < 1:
        raise ConfigError("eval.var_level must lie in (0, 1)")
    if int(cfg["cluster.C"]) < 1:
        raise ConfigError("cluster.C must be >= 1")
    for key in ("data.val_fraction", "data.test_fraction"):
        if not 0 <= cfg[key] < 1:
            raise ConfigError(f"{key} must lie in [0, 1)")
    if cfg["data.val_fraction"] + cfg["data.test_fraction"] >= 1:
        raise ConfigError("validation and test fractions leave no training data")
    net_config(cfg)
    train_options(cfg)


def net_config(cfg: dict) -> NetConfig:
    return NetConfig(
        t_hist=int(cfg["t_hist"]),
        t_pred=int(cfg["t_pred"]),
        neighbor_feature_dim=int(cfg["net.neighbor_feature_dim"]),
        encoder_hidden_dims=tuple(cfg["net.encoder_hidden_dims"]),
        latent_dim=int(cfg["net.latent_dim"]),
        decoder_hidden_dims=tuple(cfg["net.decoder_hidden_dims"]),
        k_max=int(cfg["net.k_max"]),
        n_max=int(cfg["net.n_max"]),
    )


def train_options(cfg: dict, epochs: int | None = None) -> TrainOptions:
    opts = TrainOptions(
        epochs=int(cfg["train.epochs"] if epochs is None else epochs),
        lr=float(cfg["train.lr"]),
        batch_size=int(cfg["train.batch_size"]),
        ewta_decay=float(cfg["train.ewta_decay"]),
        ewta_patience=int(cfg["train.ewta_patience"]),
    )
    if opts.epochs < 1 or opts.batch_size < 1 or opts.lr <= 0:
        raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")
    return opts


def synth_spec(cfg: dict) -> SynthSpec:
    seed = cfg["seed"] if cfg["synth.seed"] is None else cfg["synth.seed"]
    try:
        return SynthSpec.from_dict({
            "modes": cfg["synth.modes"],
            "noise_sigma": float(cfg["synth.noise_sigma"]),
            "n_samples": int(cfg["synth.n_samples"]),
            "seed": int(seed),
            "t_hist": int(cfg["t_hist"]),
            "t_pred": int(cfg["t_pred"]),
            "dt": float(cfg["data.dt"]),
            "max_neighbors": int(cfg["synth.max_neighbors"]),
            "arena": float(cfg["synth.arena"]),
        })
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None


def _upstream(cfg: dict, stage: str) -> tuple[str, ...]:
    ups = STAGES[stage][1]
    if stage == "prepare" and cfg["data.source"] != "synth":
        return ()
    return ups


def stage_fingerprint(cfg: dict, stage: str) -> str:
    prefixes = STAGES[stage][0]
    keys = {k: cfg[k] for k in sorted(cfg) if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)}
    payload = {
        "stage": stage,
        "config": keys,
        "upstream": [stage_fingerprint(cfg, u) for u in _upstream(cfg, stage)],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stage_config(cfg: dict, stage: str) -> dict:
    prefixes = STAGES[stage][0]
    return {k: cfg[k] for k in sorted(cfg) if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)}


# ---------------------------------------------------------------- artifacts

ARTIFACT_NAMES = {
    "synth": "synthetic samples",
    "prepare": "prepared dataset splits",
    "train-baseline": "baseline model",
    "embed": "training embeddings",
    "cluster": "cluster model",
    "train-experts": "expert ensemble",
    "rank": "expert rankings",
    "train-router": "router model",
    "evaluate": "evaluation report",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_path(out: Path, command: str) -> Path:
    return out / "manifests" / f"{command}.json"


def require(cfg: dict, out: Path, stage: str) -> dict:
    """Load the manifest of ``stage`` and check it belongs to this configuration."""
    path = manifest_path(out, stage)
    name = ARTIFACT_NAMES[stage]
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {name} ({path}); run `amend {stage}` first")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    for rel in manifest["outputs"]:
        if not (out / rel).exists():
            raise MissingArtifactError(f"missing artifact: {name} file {out / rel}; rerun `amend {stage}`")
    expected = stage_fingerprint(cfg, stage)
    if manifest["fingerprint"] != expected:
        raise FingerprintMismatch(
            f"{name} in {out} was built with fingerprint {manifest['fingerprint']}, "
            f"this config expects {expected}; rerun `amend {stage}` or choose another --out"
        )
    return manifest


@dataclass
class Context:
    cfg: dict
    out: Path

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def normalization(self) -> NormalizationParams:
        return NormalizationParams(json.loads(self.path("data/normalization.json").read_text())["scale"])

    def split(self, name: str):
        norm = self.normalization()
        return [canonicalize(s, norm) for s in load_samples(self.path(f"data/{name}.json"))]

    def cluster_model(self) -> ClusterModel:
        return ClusterModel.load(self.path("clusters.json"), self.path("assignments.tsv"))

    def ensemble(self) -> ExpertEnsemble:
        return ExpertEnsemble.load(self.path("experts"), self.cluster_model())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- commands

def cmd_synth(ctx: Context) -> list[str]:
    if ctx.cfg["data.source"] != "synth":
        raise ConfigError("`synth` needs data.source = synth")
    spec = synth_spec(ctx.cfg)
    save_samples(synthesize_dataset(spec), ctx.path("data/samples.json"))
    _write_json(ctx.path("data/synth_spec.json"), spec.to_dict())
    return ["data/samples.json", "data/synth_spec.json"]


def _split_indices(n: int, cfg: dict, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_val = int(round(cfg["data.val_fraction"] * n))
    n_test = int(round(cfg["data.test_fraction"] * n))
    perm = rng.permutation(n)
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def _load_track_files(files, cfg, start_id):
    samples = []
    for f in files:
        tracks = load_dataset(f, int(cfg["data.stride"]))
        samples += window_samples(tracks, int(cfg["t_hist"]), int(cfg["t_pred"]), Path(f).stem, start_id + len(samples))
    return samples


def cmd_prepare(ctx: Context) -> list[str]:
    cfg = ctx.cfg
    rng = np.random.default_rng(ctx.seed)
    if cfg["data.source"] == "synth":
        pool = load_samples(ctx.path("data/samples.json"))
        tr, va, te = _split_indices(len(pool), cfg, rng)
        train_s, val_s, test_s = ([pool[i] for i in idx] for idx in (tr, va, te))
    else:
        if not cfg["data.train_files"] or not cfg["data.test_files"]:
            raise ConfigError("data.train_files and data.test_files are required for data.source = tracks")
        missing = [f for key in ("data.train_files", "data.val_files", "data.test_files") for f in cfg[key]
                   if not Path(f).exists()]
        if missing:
            raise MissingArtifactError(f"missing artifact: trajectory file(s) {', '.join(missing)}")
        train_s = _load_track_files(cfg["data.train_files"], cfg, 0)
        val_s = _load_track_files(cfg["data.val_files"], cfg, len(train_s))
        test_s = _load_track_files(cfg["data.test_files"], cfg, len(train_s) + len(val_s))
        if not val_s and cfg["data.val_fraction"] > 0:
            n_val = int(round(cfg["data.val_fraction"] * len(train_s)))
            perm = rng.permutation(len(train_s))
            val_s = [train_s[i] for i in sorted(perm[:n_val])]
            train_s = [train_s[i] for i in sorted(perm[n_val:])]
    if not train_s or not test_s:
        raise DatasetError("training and test splits must both be non-empty")
    norm = fit_normalization(train_s)
    for name, split in (("train", train_s), ("val", val_s), ("test", test_s)):
        save_samples(split, ctx.path(f"data/{name}.json"))
    _write_json(ctx.path("data/normalization.json"), {"scale": norm.scale})
    scores = [kalman_score(s, float(cfg["data.dt"]), float(cfg["difficulty.q"]), float(cfg["difficulty.r"]))
              for s in test_s]
    save_scores(scores, ctx.path("data/difficulty.tsv"))
    return ["data/train.json", "data/val.json", "data/test.json", "data/normalization.json", "data/difficulty.tsv"]


def cmd_train_baseline(ctx: Context) -> list[str]:
    res = train(ctx.split("train"), ctx.split("val"), net_config(ctx.cfg), ctx.seed, options=train_options(ctx.cfg))
    save_params(res.params, ctx.path("baseline.json"))
    _write_json(ctx.path("baseline_history.json"),
                {"best_epoch": res.best_epoch, "k": res.k_history, "val_min_ade": res.val_history, "loss": res.loss_history})
    return ["baseline.json", "baseline_history.json"]


def _write_embeddings(path: Path, ids, points: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for sid, row in zip(ids, points):
            fh.write("\t".join([str(sid), *(repr(float(v)) for v in row)]) + "\n")


def _read_embeddings(path: Path) -> tuple[list[int], np.ndarray]:
    ids, rows = [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        ids.append(int(parts[0]))
        rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows, dtype=float)


def cmd_embed(ctx: Context) -> list[str]:
    train_s = ctx.split("train")
    if ctx.cfg["cluster.basis"] == "latent":
        points = latent_basis(train_s, load_params(ctx.path("baseline.json")))
    else:
        points = endpoint_basis(train_s)
    _write_embeddings(ctx.path("embeddings.tsv"), [s.sample_id for s in train_s], points)
    return ["embeddings.tsv"]


def cmd_cluster(ctx: Context) -> list[str]:
    cfg = ctx.cfg
    ids, points = _read_embeddings(ctx.path("embeddings.tsv"))
    model = fit_kmeans(points, int(cfg["cluster.C"]), seed=ctx.seed, max_iter=int(cfg["cluster.max_iter"]),
                       n_init=int(cfg["cluster.n_init"]), sample_ids=ids, basis=cfg["cluster.basis"])
    model.save(ctx.path("clusters.json"), ctx.path("assignments.tsv"))
    sizes = np.bincount(list(model.assignment.values()), minlength=model.C)
    log.info("cluster sizes %s, inertia %.6g", sizes.tolist(), model.inertia)
    return ["clusters.json", "assignments.tsv"]


def cmd_train_experts(ctx: Context) -> list[str]:
    cfg = ctx.cfg
    ens = train_experts(ctx.split("train"), ctx.split("val"), ctx.cluster_model(), float(cfg["experts.alpha"]),
                        net_config(cfg), ctx.seed, ctx.normalization(), train_options(cfg),
                        shared_seed=bool(cfg["experts.shared_seed"]))
    ens.save(ctx.path("experts"))
    return [f"experts/expert_{c}.json" for c in range(ens.C)] + ["experts/ensemble.json"]


def cmd_rank(ctx: Context) -> list[str]:
    ens = ctx.ensemble()
    trials = int(ctx.cfg["eval.rank_trials"])
    save_rankings(rank_experts_batch(ctx.split("train"), ens, trials), ctx.path("rankings.tsv"))
    save_rankings(rank_experts_batch(ctx.split("test"), ens, trials), ctx.path("rankings_test.tsv"))
    return ["rankings.tsv", "rankings_test.tsv"]


def cmd_train_router(ctx: Context) -> list[str]:
    cfg = ctx.cfg
    train_s = ctx.split("train")
    ens = ctx.ensemble()
    by_id = dict(router_targets(load_rankings(ctx.path("rankings.tsv")), ens.C))
    missing = [s.sample_id for s in train_s if s.sample_id not in by_id]
    if missing:
        raise MissingArtifactError(f"rankings.tsv lacks {len(missing)} training samples (first: {missing[0]})")
    targets = np.array([by_id[s.sample_id] for s in train_s])
    warm = load_params(ctx.path("baseline.json")) if cfg["router.warm_start"] else None
    router = train_router(train_s, targets, net_config(cfg), ctx.seed, hidden_dim=int(cfg["router.hidden_dim"]),
                          temperature=float(cfg["router.temperature"]),
                          options=train_options(cfg, cfg["router.epochs"]), warm_start=warm)
    router.save(ctx.path("router.json"))
    return ["router.json"]


def cmd_evaluate(ctx: Context) -> list[str]:
    cfg = ctx.cfg
    fp = stage_fingerprint(cfg, "evaluate")
    test = ctx.split("test")
    ids = [s.sample_id for s in test]
    scale = ctx.normalization().scale
    ncfg = net_config(cfg)
    batch = make_batch(test, ncfg)
    baseline = load_params(ctx.path("baseline.json"))
    ens = ctx.ensemble()
    router = RouterNet.load(ctx.path("router.json"))
    rankings = {r.sample_id: r for r in load_rankings(ctx.path("rankings_test.tsv"))}

    scores = load_scores(ctx.path("data/difficulty.tsv"))
    splits = {name: top_percent_split(scores, pct) for name, pct in SPLITS}

    hyps = predict_batch(baseline, batch)
    base_err = [SampleError(i, float(a) * scale, float(f) * scale, "baseline") for i, a, f in
                zip(ids, min_ade_batch(hyps, batch.future), min_fde_batch(hyps, batch.future))]

    policies = list(cfg["eval.policies"])
    if cfg["cluster.basis"] != "latent" and "cluster" in policies:
        log.warning("skipping cluster routing: it needs latent-space clusters")
        policies.remove("cluster")
    ade, fde = expert_metrics(batch, ens)
    errors, routing = {}, {}
    for policy in policies:
        sel = choose_experts(test, ens, policy, router, baseline, ctx.seed)
        rows = np.arange(len(test))
        errors[policy] = [SampleError(i, float(a) * scale, float(f) * scale, policy)
                          for i, a, f in zip(ids, ade[rows, sel], fde[rows, sel])]
        routing[policy] = routing_accuracy(dict(zip(ids, sel.tolist())), rankings)

    var_level = float(cfg["eval.var_level"])
    reports = {p: build_report(errors[p], splits, routing, var_level, fp) for p in policies}
    base_report = build_report(base_err, splits, None, var_level, fp)
    for p, rep in reports.items():
        ctx.path(f"reports/{p}.json").write_text(rep.to_json(), encoding="utf-8")
    ctx.path("reports/baseline.json").write_text(base_report.to_json(), encoding="utf-8")
    main = "router" if "router" in reports else policies[0]
    ctx.path("report.json").write_text(reports[main].to_json(), encoding="utf-8")
    table = {"Baseline": base_report, **{f"AMEND ({p})": r for p, r in reports.items()}}
    ctx.path("report.txt").write_text(format_table(table), encoding="utf-8")
    ctx.path("errors.csv").write_text(errors_csv({"baseline": base_err, **errors}), encoding="utf-8")

    # mean FDE of every expert on the test samples of every cluster (plot data for specialization)
    if cfg["cluster.basis"] == "latent":
        clusters = assign_batch(latent_basis(test, baseline), ens.cluster_model)
    else:
        clusters = assign_batch(endpoint_basis(test), ens.cluster_model)
    spec = {
        "cluster_sizes": np.bincount(clusters, minlength=ens.C).tolist(),
        "fde": [[float(v) * scale for v in fde[clusters == c].mean(axis=0)] if np.any(clusters == c) else [None] * ens.C
                for c in range(ens.C)],
    }
    _write_json(ctx.path("specialization.json"), spec)
    outputs = [f"reports/{p}.json" for p in policies]
    return outputs + ["reports/baseline.json", "report.json", "report.txt", "errors.csv", "specialization.json"]


HANDLERS: dict[str, Callable[[Context], list[str]]] = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train-baseline": cmd_train_baseline,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "train-experts": cmd_train_experts,
    "rank": cmd_rank,
    "train-router": cmd_train_router,
    "evaluate": cmd_evaluate,
}


def run_command(command: str, cfg: dict, out: str | Path | None = None) -> dict:
    """Run one stage after checking its inputs; returns the manifest written."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    out = Path(cfg["out"] if out is None else out)
    # every upstream manifest in the chain must match this config; report the earliest stale stage
    chain, stage = [], command
    while _upstream(cfg, stage):
        stage = _upstream(cfg, stage)[0]
        chain.append(stage)
    manifests = {up: require(cfg, out, up) for up in reversed(chain)}
    inputs = [{"command": up, "fingerprint": manifests[up]["fingerprint"], "files": sorted(manifests[up]["outputs"])}
              for up in _upstream(cfg, command)]
    start = time.perf_counter()
    outputs = HANDLERS[command](Context(cfg, out))
    manifest = {
        "command": command,
        "fingerprint": stage_fingerprint(cfg, command),
        "config": stage_config(cfg, command),
        "inputs": inputs,
        "outputs": {rel: _sha256(out / rel) for rel in outputs},
        "wall_time": round(time.perf_counter() - start, 3),
    }
    path = manifest_path(out, command)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, manifest)
    log.info("%s done in %.1fs (fingerprint %s)", command, manifest["wall_time"], manifest["fingerprint"])
    return manifest


def run_all(cfg: dict, out: str | Path | None = None) -> list[dict]:
    chain = [c for c in COMMANDS if not (c == "synth" and cfg["data.source"] != "synth")]
    return [run_command(c, cfg, out) for c in chain]


def read_report(out: str | Path, name: str = "report.json") -> dict:
    return json.loads((Path(out) / name).read_text(encoding="utf-8"))

