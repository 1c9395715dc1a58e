"""Shared runner for the four-arm trade-off experiment.

Used by the pilot script during development and by the acceptance suite.
Results are cached per (arm, seed) as JSON when a cache directory is given,
keyed by the full configuration, so interrupted sweeps resume cheaply.
"""

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ecgtext.datasets import GeneratorConfig, generate_corpus
from ecgtext.evaluation import ProbeConfig, diagnostics, probe_checkpoint, zero_shot
from ecgtext.objectives import ObjectiveConfig
from ecgtext.training import (
    TrainConfig,
    encoder_config_for,
    initial_checkpoint,
    pretrain,
)

ARMS = ("mse", "cma", "mib", "merit")

TRAIN_DATA_SEED = 100
EVAL_DATA_SEED = 200


def default_spec(n_train=4096, n_eval=1024, epochs=20, batch_size=32):
    return {
        "corpus_rev": 2,  # bump when generator constants change to void caches
        "n_train": n_train,
        "n_eval": n_eval,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr_max": 1e-3,
        "mask_ratio": 0.75,
        "weight_decay": 1e-5,
        "tau": 0.07,
        "lambda_ib_mib": 1.0,
        "probe_epochs": 100,
        "probe_folds": 5,
        "mi_batch_size": 32,
        "mi_tau": 1.0,
    }


def make_datasets(spec):
    gen = lambda n, seed: generate_corpus(
        GeneratorConfig(n=n, c=12, t=1000, k_s=4, k_m=2, prevalence=(0.3,) * 4),
        seed=seed,
    )
    return gen(spec["n_train"], TRAIN_DATA_SEED), gen(spec["n_eval"], EVAL_DATA_SEED)


def arm_configs(arm, seed, spec):
    obj = ObjectiveConfig(
        tau=spec["tau"],
        lambda_ib=spec["lambda_ib_mib"] if arm == "mib" else 0.1,
    )
    train = TrainConfig(
        objective=arm,
        epochs=spec["epochs"],
        batch_size=spec["batch_size"],
        lr_max=spec["lr_max"],
        weight_decay=spec["weight_decay"],
        mask_ratio=spec["mask_ratio"],
        seed=seed,
    )
    return obj, train


def evaluate_checkpoint(ckpt, eval_ds, spec, mi_taus=(None,)):
    out = {}
    for target in ("semantic", "structural"):
        report = probe_checkpoint(
            ckpt,
            eval_ds,
            ProbeConfig(
                epochs=spec["probe_epochs"],
                n_folds=spec["probe_folds"],
                target=target,
                seed=0,
            ),
        )
        out[f"probe_{target}_auc"] = report.macro_auc
        out[f"probe_{target}_f1"] = report.macro_f1
        out[f"probe_{target}_auc_per_class"] = report.per_class_auc
    if ckpt.train_config.objective != "mse":
        zs = zero_shot(ckpt, eval_ds)
        out["zeroshot_auc"] = zs.macro_auc
        out["zeroshot_f1"] = zs.macro_f1
    for tau in mi_taus:
        tau_val = spec["mi_tau"] if tau is None else tau
        diag = diagnostics(ckpt, eval_ds, batch_size=spec["mi_batch_size"], tau=tau_val)
        key = "" if tau is None else f"_tau{tau_val:g}"
        out[f"mi_proxy{key}"] = diag["mi_proxy"]
        out[f"paired_cosine{key}"] = diag["mean_paired_cosine"]
    return out


def _cache_key(kind, arm, seed, spec):
    doc = json.dumps({"kind": kind, "arm": arm, "seed": seed, "spec": spec}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:20]


def run_tradeoff(
    seeds=(0, 1, 2),
    spec=None,
    arms=ARMS,
    cache_dir=None,
    mi_taus=(None,),
    progress=None,
):
    """Train every (arm, seed) pair, evaluate on the held-out corpus, and
    return {"arms": {arm: {seed: metrics}}, "untrained": {seed: metrics}}."""
    spec = spec or default_spec()
    say = progress or (lambda msg: None)
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)

    train_ds, eval_ds = make_datasets(spec)
    enc = encoder_config_for(train_ds)

    def cached(kind, arm, seed, build):
        if cache:
            path = cache / f"{_cache_key(kind, arm, seed, spec)}.json"
            if path.exists():
                say(f"[cache] {kind}/{arm}/seed{seed}")
                return json.loads(path.read_text())
        t0 = time.time()
        value = build()
        say(f"[done] {kind}/{arm}/seed{seed} in {time.time() - t0:.0f}s")
        if cache:
            path.write_text(json.dumps(value, sort_keys=True))
        return value

    results = {"arms": {arm: {} for arm in arms}, "untrained": {}, "spec": spec}
    for seed in seeds:
        obj, train = arm_configs("cma", seed, spec)
        untrained = initial_checkpoint(enc, obj, train)
        results["untrained"][str(seed)] = cached(
            "untrained", "none", seed, lambda: evaluate_checkpoint(untrained, eval_ds, spec, mi_taus)
        )
    for arm in arms:
        for seed in seeds:
            def build(arm=arm, seed=seed):
                obj, train = arm_configs(arm, seed, spec)
                ckpt = pretrain(train_ds, enc, obj, train)
                return evaluate_checkpoint(ckpt, eval_ds, spec, mi_taus)

            results["arms"][arm][str(seed)] = cached("arm", arm, seed, build)
    return results


def seed_mean(results, arm, key):
    block = results["arms"][arm] if arm != "untrained" else results["untrained"]
    values = [v[key] for v in block.values() if key in v]
    return float(np.mean(values)) if values else float("nan")
