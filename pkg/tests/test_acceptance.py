"""Acceptance suite: every criterion runs at its stated tolerance and prints
one pass/fail line.  Run with ``pytest tests/test_acceptance.py -s``.

The four-arm trade-off experiment (criterion 5) pretrains
4 objectives x 3 seeds at the full desk configuration and is compute-heavy;
set ``ECGTEXT_ACCEPT_CACHE=<dir>`` to reuse per-arm results across runs.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import make_tiny_dataset, make_tiny_encoder, make_tiny_train
from ecgtext import autodiff as ad
from ecgtext import models
from ecgtext.autodiff import Tensor
from ecgtext.datasets import GeneratorConfig, generate_corpus, load_dataset, save_dataset
from ecgtext.evaluation import (
    ProbeConfig,
    embed_dataset,
    export_embeddings,
    linear_probe,
    load_embeddings,
    zero_shot,
)
from ecgtext.gradcheck import run_gradcheck
from ecgtext.metrics import auroc, f1_accuracy, macro_auroc
from ecgtext.objectives import ObjectiveConfig, loss_cma, loss_ib, mi_proxy
from ecgtext.preprocessing import patchify, preprocess, sample_mask, unpatchify
from ecgtext.training import (
    AdamState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    encoder_config_for,
    load_checkpoint,
    pretrain,
    trainable_names,
)
from experiment import default_spec, run_tradeoff, seed_mean
from oracles import auroc_pairs, infonce_direct


def report(criterion: str, ok: bool, detail: str = "") -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{criterion} failed: {detail}"


def unit_rows(rng, b, d):
    v = rng.normal(size=(b, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# criterion 1 — gradient oracle suite


def test_criterion_1_gradient_oracles():
    t0 = time.time()
    rows = run_gradcheck(seed=0)
    elapsed = time.time() - t0
    for row in rows:
        print(
            f"  gradcheck {row['name']:22s} max_rel_err {row['max_rel_err']:.3e} "
            f"tol {row['tolerance']:.0e} {'PASS' if row['passed'] else 'FAIL'}"
        )
    ok = all(r["passed"] for r in rows) and elapsed <= 120.0
    report("criterion-1 gradient-oracles", ok, f"{len(rows)} checks in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2 — loss oracles


def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        b, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        tau = float(rng.uniform(0.05, 2.0))
        z, r = unit_rows(rng, b, d), unit_rows(rng, b, d)
        got = loss_cma(Tensor(z), Tensor(r), tau).item()
        worst = max(worst, abs(got - infonce_direct(z, r, tau)))
    single = loss_cma(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), 0.07).item()
    ones = Tensor([[1.0, 0.0], [1.0, 0.0]])
    equal = loss_cma(ones, ones, 1.0).item()
    ident = loss_cma(Tensor(np.eye(2)), Tensor(np.eye(2)), 1.0).item()
    z4 = unit_rows(rng, 4, 5)
    ib_cases = (
        abs(loss_ib(Tensor(z4), Tensor(z4.copy())).item()),
        abs(loss_ib(Tensor(z4), Tensor(-z4)).item() - 2.0),
        abs(loss_ib(Tensor(np.eye(2)), Tensor(np.eye(2)[::-1].copy())).item() - 1.0),
    )
    ok = (
        worst <= 1e-6
        and abs(single) <= 1e-6
        and abs(equal - 2 * math.log(2)) <= 1e-6
        and abs(ident - 2 * math.log(1 + math.exp(-1))) <= 1e-6
        and max(ib_cases) <= 1e-6
    )
    report(
        "criterion-2 loss-oracles",
        ok,
        f"100 random instances, worst |diff| {worst:.2e}; closed forms within 1e-6",
    )


# ---------------------------------------------------------------------------
# criterion 3 — metric oracles


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.normal(size=n)
        if i % 2 == 0:
            scores = np.round(scores, 1)  # force ties
        worst = max(worst, abs(auroc(scores, labels) - auroc_pairs(scores, labels)))
    example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = worst <= 1e-12 and example == 0.75
    report(
        "criterion-3 metric-oracles",
        ok,
        f"500 instances incl. ties, worst |diff| {worst:.2e}; 4-point example {example}",
    )


# ---------------------------------------------------------------------------
# criterion 4 — determinism and persistence


def test_criterion_4_determinism_persistence(tmp_path):
    ds = make_tiny_dataset(n=48, seed=4)
    enc = make_tiny_encoder(ds)
    obj = ObjectiveConfig()
    config = make_tiny_train(epochs=4, checkpoint_every=2, seed=7)

    lines_a: list[str] = []
    a = pretrain(ds, enc, obj, config, log=lines_a.append, checkpoint_dir=tmp_path / "run")
    b = pretrain(ds, enc, obj, config)
    bit_identical = np.array_equal(a.params_flat, b.params_flat) and np.array_equal(
        a.opt_m_flat, b.opt_m_flat
    )

    half = load_checkpoint(tmp_path / "run" / "epoch_0002")
    lines_r: list[str] = []
    resumed = pretrain(ds, enc, obj, config, log=lines_r.append, resume_from=half)
    resume_ok = (
        np.array_equal(resumed.params_flat, a.params_flat) and lines_r == lines_a[2:]
    )

    save_dataset(ds, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    ds_ok = (
        np.array_equal(loaded.signals, ds.signals)
        and np.array_equal(loaded.labels, ds.labels)
        and all(np.array_equal(x, y) for x, y in zip(loaded.reports, ds.reports))
    )

    pooled, _ = embed_dataset(a, ds)
    export_embeddings(tmp_path / "emb", pooled, a.layout_hash)
    emb_back, hash_back = load_embeddings(tmp_path / "emb")
    emb_ok = np.array_equal(emb_back, pooled) and hash_back == a.layout_hash

    ok = bit_identical and resume_ok and ds_ok and emb_ok
    report(
        "criterion-4 determinism-persistence",
        ok,
        f"bit-identical={bit_identical} resume={resume_ok} dataset={ds_ok} embeddings={emb_ok}",
    )


# ---------------------------------------------------------------------------
# criterion 5 — the trade-off experiment


@pytest.fixture(scope="session")
def tradeoff(tmp_path_factory):
    cache = os.environ.get("ECGTEXT_ACCEPT_CACHE") or str(
        tmp_path_factory.mktemp("tradeoff_cache")
    )
    spec = default_spec()
    t0 = time.time()
    results = run_tradeoff(
        seeds=(0, 1, 2), spec=spec, cache_dir=cache, progress=lambda m: print(f"  {m}")
    )
    print(f"  trade-off experiment finished in {time.time() - t0:.0f}s")
    for arm in ("mse", "cma", "mib", "merit"):
        row = {
            k: round(seed_mean(results, arm, k), 4)
            for k in (
                "probe_semantic_auc",
                "probe_structural_auc",
                "zeroshot_auc",
                "mi_proxy",
                "paired_cosine",
            )
            if not math.isnan(seed_mean(results, arm, k))
        }
        print(f"  {arm:8s} {row}")
    print(
        "  untrained"
        f" zeroshot {seed_mean(results, 'untrained', 'zeroshot_auc'):.4f}"
        f" mi {seed_mean(results, 'untrained', 'mi_proxy'):.4f}"
    )
    return results


def test_criterion_5a_structure_preserved(tradeoff):
    merit = seed_mean(tradeoff, "merit", "probe_structural_auc")
    cma = seed_mean(tradeoff, "cma", "probe_structural_auc")
    report(
        "criterion-5a structural-probe-margin",
        merit >= cma + 0.05,
        f"merit {merit:.4f} vs cma {cma:.4f} (+0.05 required)",
    )


def test_criterion_5b_semantics_kept(tradeoff):
    merit = seed_mean(tradeoff, "merit", "probe_semantic_auc")
    cma = seed_mean(tradeoff, "cma", "probe_semantic_auc")
    report(
        "criterion-5b semantic-probe-no-loss",
        merit >= cma - 0.02,
        f"merit {merit:.4f} vs cma {cma:.4f} (-0.02 allowed)",
    )


def test_criterion_5c_bottleneck_compresses(tradeoff):
    mib = seed_mean(tradeoff, "mib", "probe_structural_auc")
    cma = seed_mean(tradeoff, "cma", "probe_structural_auc")
    report(
        "criterion-5c bottleneck-compression",
        mib <= cma,
        f"mib {mib:.4f} <= cma {cma:.4f}",
    )


def test_criterion_5d_zero_shot(tradeoff):
    merit = seed_mean(tradeoff, "merit", "zeroshot_auc")
    null = seed_mean(tradeoff, "untrained", "zeroshot_auc")
    ok = merit >= 0.75 and 0.43 <= null <= 0.57
    report(
        "criterion-5d zero-shot",
        ok,
        f"merit {merit:.4f} (>=0.75), untrained {null:.4f} (in [0.43, 0.57])",
    )


def test_criterion_5e_mi_diagnostics(tradeoff):
    merit = seed_mean(tradeoff, "merit", "mi_proxy")
    mse = seed_mean(tradeoff, "mse", "mi_proxy")
    null = seed_mean(tradeoff, "untrained", "mi_proxy")
    ok = merit >= mse + 0.5 and -0.1 <= null <= 0.1
    report(
        "criterion-5e mi-diagnostics",
        ok,
        f"merit {merit:.4f} vs mse {mse:.4f} (+0.5 nat), untrained {null:.4f}",
    )


# ---------------------------------------------------------------------------
# criterion 6 — ablation-arm hygiene at the full default architecture


def test_criterion_6_arm_hygiene():
    ds = generate_corpus(
        GeneratorConfig(n=64, c=12, t=1000, k_s=4, k_m=2, prevalence=(0.3,) * 4), seed=6
    )
    enc = encoder_config_for(ds)
    names = models.param_names(enc)
    init_flat = models.flatten_params(models.init_params(enc, seed=0), enc).astype(np.float32)

    def slices():
        out, offset = {}, 0
        for name, shape in models.param_shapes(enc):
            size = int(np.prod(shape))
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    sl = slices()

    def unchanged(flat, prefix):
        return all(
            np.array_equal(flat[sl[n]], init_flat[sl[n]])
            for n in names
            if n.startswith(prefix)
        )

    def changed(flat, prefix):
        return any(
            not np.array_equal(flat[sl[n]], init_flat[sl[n]])
            for n in names
            if n.startswith(prefix)
        )

    one_epoch = lambda arm: pretrain(
        ds,
        enc,
        ObjectiveConfig(),
        TrainConfig(objective=arm, epochs=1, batch_size=32, mask_ratio=0.75, seed=0),
    ).params_flat

    cma_flat = one_epoch("cma")
    cma_ok = unchanged(cma_flat, "dec.") and changed(cma_flat, "ecg.")
    mse_flat = one_epoch("mse")
    mse_ok = (
        unchanged(mse_flat, "text.")
        and unchanged(mse_flat, "proj.")
        and changed(mse_flat, "dec.")
    )
    report(
        "criterion-6 arm-hygiene",
        cma_ok and mse_ok,
        f"cma leaves decoder untouched: {cma_ok}; mse leaves text+projections untouched: {mse_ok}",
    )


# ---------------------------------------------------------------------------
# criterion 7 — invariant property battery


def _suite_ad_primitives(rng):
    cases = 0
    fns = [
        ("tanh", ad.tanh, False),
        ("gelu", ad.gelu, False),
        ("exp", ad.exp, False),
        ("log", ad.log, True),
        ("relu", ad.relu, False),
        ("softmax", lambda t: ad.softmax(t, axis=-1), False),
        ("log_softmax", lambda t: ad.log_softmax(t, axis=-1), False),
        ("mean", lambda t: ad.tmean(t, axis=0), False),
        ("sum", lambda t: ad.tsum(t, axis=-1), False),
        ("l2_normalize", lambda t: ad.l2_normalize(t, axis=-1), False),
    ]
    for name, fn, positive in fns:
        for _ in range(10):
            x = rng.normal(size=(3, 4))
            if positive:
                x = np.abs(x) + 0.5
            params = {"x": Tensor(x, requires_grad=True)}

            def builder(p):
                out = fn(p["x"])
                return ad.tsum(ad.mul(out, Tensor(np.full(out.shape, 0.6))))

            _, grads = ad.forward_backward(builder, params)
            fd = ad.finite_diff_grad(builder, params)
            err = np.max(np.abs(grads["x"] - fd["x"]) / np.maximum(np.abs(fd["x"]), 1e-3))
            assert err <= 1e-5, (name, err)
            cases += 1
    # pairwise ops and matmul/layer_norm
    for _ in range(40):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
        params = {
            "a": Tensor(a, requires_grad=True),
            "b": Tensor(b, requires_grad=True),
            "g": Tensor(rng.normal(size=4), requires_grad=True),
            "c": Tensor(rng.normal(size=4), requires_grad=True),
        }

        def builder(p):
            mm = ad.matmul(p["a"], p["b"])
            ln = ad.layer_norm(ad.matmul(p["b"], p["a"]), p["g"], p["c"])
            return ad.add(ad.tsum(ad.tanh(mm)), ad.tsum(ad.square(ln)))

        _, grads = ad.forward_backward(builder, params)
        fd = ad.finite_diff_grad(builder, params)
        for key in params:
            err = np.max(
                np.abs(grads[key] - fd[key]) / np.maximum(np.abs(fd[key]), 1e-3)
            )
            assert err <= 1e-5, ("pair", key, err)
        cases += 1
    # shared-subexpression accumulation
    for _ in range(100):
        x = float(rng.normal())
        params = {"x": Tensor(x, requires_grad=True)}

        def twice(p):
            y = ad.mul(p["x"], p["x"])
            return ad.add(y, y)

        _, grads = ad.forward_backward(twice, params)
        assert abs(float(grads["x"]) - 4.0 * x) <= 1e-9
        cases += 1
    # log_softmax exp round trip
    for _ in range(100):
        x = rng.normal(scale=4.0, size=(3, 7))
        s = np.exp(ad.log_softmax(Tensor(x), axis=-1).data).sum(axis=-1)
        assert np.allclose(s, 1.0, atol=1e-6)
        cases += 1
    return cases


def _suite_signal_data(rng):
    cases = 0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        plan = sample_mask(n, float(rng.uniform(0, 0.999)), int(rng.integers(0, 2**31)))
        assert np.array_equal(np.sort(np.concatenate([plan.masked, plan.visible])), np.arange(n))
        cases += 1
    for _ in range(100):
        c = int(rng.integers(1, 13))
        per = int(rng.integers(1, 12))
        p = int(rng.integers(2, 30))
        x = rng.normal(size=(c, per * p)).astype(np.float32)
        assert np.array_equal(unpatchify(patchify(x, p)), x)
        cases += 1
    for _ in range(100):
        x = preprocess(rng.normal(size=(2, 80)))
        again = preprocess(x)
        assert np.allclose(again, x, atol=1e-6)
        cases += 1
    return cases


def _suite_encoders(rng):
    # full dual-branch forward stays finite for 10^4 random inputs at the
    # default architecture
    ds = generate_corpus(
        GeneratorConfig(n=32, c=12, t=1000, k_s=4, k_m=2, prevalence=(0.3,) * 4), seed=77
    )
    enc = encoder_config_for(ds)
    params = models.init_params(enc, seed=0)
    lead = np.repeat(np.arange(enc.n_leads), enc.patches_per_lead)
    time_idx = np.tile(np.arange(enc.patches_per_lead), enc.n_leads)
    n = enc.n_patches
    checked = 0
    batch = 250
    for chunk in range(40):
        patches = rng.normal(size=(batch, n, enc.p)).astype(np.float32)
        visible = np.stack([np.sort(rng.permutation(n)[: n // 4]) for _ in range(batch)])
        masked = np.stack([np.setdiff1d(np.arange(n), visible[i]) for i in range(batch)])
        tokens = models.embed_patches(Tensor(patches), lead, time_idx, params)
        z_vis = models.ecg_encode(ad.take_along_rows(tokens, visible), params, enc)
        z_proj = models.project(models.pool_mean(z_vis), params, "ecg")
        z_full = models.insert_mask_tokens(z_vis, visible, masked, lead, time_idx, params, n)
        x_hat = models.decode(z_full, params, enc)
        ids = rng.integers(0, enc.vocab_size, size=(batch, 5))
        states = models.text_encode(ids, np.ones_like(ids, dtype=float), params, enc)
        r_proj = models.project(models.pool_mean(states), params, "text")
        for arr in (z_proj.data, x_hat.data, r_proj.data):
            assert np.all(np.isfinite(arr))
        checked += batch
    assert checked == 10_000

    flat = models.flatten_params(params, enc)
    back = models.unflatten_params(flat, enc)
    assert all(np.array_equal(back[k].data, params[k].data) for k in params)

    for _ in range(100):
        v = rng.normal(size=(2, enc.d_model)).astype(np.float32)
        c = float(rng.uniform(0.1, 10.0))
        a = models.project(Tensor(v), params, "ecg").data
        b = models.project(Tensor(v * c), params, "ecg").data
        assert np.allclose(a, b, atol=1e-6)
        checked += 1
    return checked


def _suite_objectives(rng):
    cases = 0
    for _ in range(100):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        z, r = unit_rows(rng, b, d), unit_rows(rng, b, d)
        tau = float(rng.uniform(0.05, 1.5))
        val = loss_cma(Tensor(z), Tensor(r), tau).item()
        assert val >= 0.0
        perm = rng.permutation(b)
        assert abs(loss_cma(Tensor(z[perm]), Tensor(r[perm]), tau).item() - val) <= 1e-8
        assert 0.0 <= loss_ib(Tensor(z), Tensor(r)).item() <= 2.0
        if b >= 4:
            assert mi_proxy(z[:2], r[:2], tau) <= math.log(2) + 1e-12
        cases += 1
    return cases


def _suite_training(rng):
    cases = 0
    for _ in range(100):
        p0 = float(rng.uniform(0.5, 3.0))
        lr = float(rng.uniform(1e-4, 0.3))
        wd = float(rng.uniform(1e-4, 0.2))
        steps = int(rng.integers(1, 8))
        params = {"p": Tensor(np.asarray(p0), requires_grad=True)}
        state = AdamState.for_params(params)
        for _ in range(steps):
            adamw_step(params, {"p": np.asarray(0.0)}, state, lr, wd)
        assert abs(float(params["p"].data) - p0 * (1 - lr * wd) ** steps) <= 1e-10 * max(1, p0)
        cases += 1
    for _ in range(100):
        total = int(rng.integers(1, 500))
        lr_max = float(rng.uniform(1e-4, 1.0))
        lr_min = float(rng.uniform(0, lr_max))
        values = [cosine_lr(s, total, lr_max, lr_min) for s in range(total + 1)]
        assert all(x >= y - 1e-15 for x, y in zip(values, values[1:]))
        assert abs(values[0] - lr_max) < 1e-12 and abs(values[-1] - lr_min) < 1e-12
        cases += 1
    return cases


def _suite_eval(rng):
    cases = 0
    for _ in range(100):
        n = int(rng.integers(4, 120))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.normal(size=n)
        base = auroc(scores, labels)
        assert abs(auroc(3.0 * scores + 1.0, labels) - base) <= 1e-12
        assert abs(auroc(np.tanh(scores), labels) - base) <= 1e-12
        cases += 1
    for _ in range(100):
        scores = rng.random((40, 3))
        labels = rng.integers(0, 2, size=(40, 3))
        labels[0], labels[1] = 0, 1
        macro, per_class = macro_auroc(scores, labels)
        assert abs(macro - np.mean([v for v in per_class if v is not None])) <= 1e-12
        macro_f1, acc, per_f1, per_acc = f1_accuracy(scores, labels, [0.5] * 3)
        assert abs(macro_f1 - np.mean(per_f1)) <= 1e-12
        assert abs(acc - np.mean(per_acc)) <= 1e-12
        cases += 1
    # leakage canary: shuffled labels stay at chance
    emb = rng.normal(size=(400, 8))
    aucs = []
    for seed in range(5):
        labels = np.random.default_rng(seed).integers(0, 2, size=(400, 2))
        rep = linear_probe(emb, labels, ProbeConfig(epochs=30, n_folds=3, seed=seed))
        aucs.append(rep.macro_auc)
    assert abs(float(np.mean(aucs)) - 0.5) <= 0.06, aucs
    cases += 5
    return cases


def test_criterion_7_invariant_suites():
    rng = np.random.default_rng(7)
    t0 = time.time()
    totals = {}
    for name, suite in [
        ("ad-core", _suite_ad_primitives),
        ("signal-data", _suite_signal_data),
        ("encoders", _suite_encoders),
        ("objectives", _suite_objectives),
        ("training", _suite_training),
        ("eval", _suite_eval),
    ]:
        t_suite = time.time()
        totals[name] = suite(rng)
        print(f"  invariants {name:12s} {totals[name]:5d} cases in {time.time() - t_suite:.1f}s")
    elapsed = time.time() - t0
    ok = min(totals.values()) >= 100 and elapsed <= 600.0
    report(
        "criterion-7 invariant-suites",
        ok,
        f"{sum(totals.values())} cases across {len(totals)} modules in {elapsed:.0f}s",
    )
