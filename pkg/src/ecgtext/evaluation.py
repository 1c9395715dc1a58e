"""Downstream evaluation on frozen checkpoints: embedding extraction,
cross-validated linear probing, zero-shot scoring against embedded class
descriptions, and alignment diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ecgtext import models
from ecgtext.autodiff import Tape, Tensor
from ecgtext import autodiff as ad
from ecgtext.datasets import Dataset
from ecgtext.exceptions import ConfigError, IncompatibleCheckpointError
from ecgtext.metrics import f1_accuracy, macro_auroc
from ecgtext.objectives import mi_proxy
from ecgtext.preprocessing import mask_seed, patchify_batch, preprocess_batch, sample_mask
from ecgtext.training import AdamState, Checkpoint, adamw_step, normalize_objective

__all__ = [
    "ProbeConfig",
    "EvalReport",
    "embed_dataset",
    "embed_class_descriptions",
    "linear_probe",
    "zero_shot",
    "diagnostics",
    "export_embeddings",
    "load_embeddings",
]

_STREAM_FOLDS = 4
_STREAM_PROBE = 5
_STREAM_DIAG = 6


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 100
    n_folds: int = 5
    seed: int = 0
    target: str = "semantic"

    def validate(self) -> "ProbeConfig":
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size, and epochs must be positive")
        if self.target not in ("semantic", "structural"):
            raise ConfigError("target must be 'semantic' or 'structural'")
        return self


@dataclass
class EvalReport:
    """Metric bundle for one task; macros are unweighted means of the
    per-class values (None entries excluded)."""

    task: str
    macro_auc: float
    macro_f1: float
    accuracy: float
    per_class_auc: list
    per_class_f1: list
    per_class_accuracy: list
    thresholds: list
    fold_mean: dict | None = None
    fold_std: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_tsv(self) -> str:
        lines = [f"task\tmacro_auc\tmacro_f1\taccuracy"]
        lines.append(
            f"{self.task}\t{self.macro_auc:.4f}\t{self.macro_f1:.4f}\t{self.accuracy:.4f}"
        )
        return "\n".join(lines)


def _macro_from_per_class(values: list) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


# ---------------------------------------------------------------------------
# embedding extraction


def _check_compat(ckpt: Checkpoint, dataset: Dataset) -> None:
    enc = ckpt.encoder_config
    if (
        dataset.manifest.c != enc.n_leads
        or dataset.manifest.t != enc.p * enc.patches_per_lead
        or len(dataset.manifest.vocab) != enc.vocab_size
    ):
        raise IncompatibleCheckpointError(
            "incompatible checkpoint/dataset: grid or vocabulary differs"
        )


def embed_dataset(
    ckpt: Checkpoint,
    dataset: Dataset,
    mask_ratio: float = 0.0,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-encoder embeddings for every record.

    With the default ``mask_ratio=0`` the full token grid is visible.
    Returns (pooled [N, d_model], projected [N, d_proj]); rows only depend
    on their own record.
    """
    _check_compat(ckpt, dataset)
    enc = ckpt.encoder_config
    params = ckpt.params()
    n = len(dataset)
    pooled = np.zeros((n, enc.d_model), dtype=np.float32)
    projected = np.zeros((n, enc.d_proj), dtype=np.float32)
    if n == 0:
        return pooled, projected
    clean = preprocess_batch(dataset.signals).astype(np.float32)
    patches, lead, time = patchify_batch(clean, enc.p)
    for start in range(0, n, batch_size):
        ids = np.arange(start, min(start + batch_size, n))
        tokens = models.embed_patches(Tensor(patches[ids]), lead, time, params)
        if mask_ratio > 0.0:
            visible = np.stack(
                [
                    sample_mask(enc.n_patches, mask_ratio, mask_seed(seed, int(r), 0)).visible
                    for r in ids
                ]
            )
            tokens = ad.take_along_rows(tokens, visible)
        z = models.ecg_encode(tokens, params, enc)
        pool = models.pool_mean(z)
        pooled[ids] = pool.data
        projected[ids] = models.project(pool, params, "ecg").data
    return pooled, projected


def embed_reports(
    ckpt: Checkpoint, reports: list[np.ndarray], batch_size: int = 256
) -> np.ndarray:
    """Projected text embeddings [len(reports), d_proj]."""
    enc = ckpt.encoder_config
    params = ckpt.params()
    out = np.zeros((len(reports), enc.d_proj), dtype=np.float32)
    for start in range(0, len(reports), batch_size):
        chunk = reports[start : start + batch_size]
        ids, mask = models.pad_reports(chunk, enc.max_report_len, enc.vocab_size)
        states = models.text_encode(ids, mask, params, enc)
        pool = models.pool_mean_padded(states, mask)
        out[start : start + len(chunk)] = models.project(pool, params, "text").data
    return out


def embed_class_descriptions(ckpt: Checkpoint, descriptions: list[list[int]]) -> np.ndarray:
    return embed_reports(ckpt, [np.asarray(d, dtype=np.uint32) for d in descriptions])


# ---------------------------------------------------------------------------
# linear probing


def _stratified_folds(labels: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Fold ids balanced on the rarest positive label column."""
    n = labels.shape[0]
    counts = labels.sum(axis=0)
    positive_cols = np.flatnonzero(counts > 0)
    rng = np.random.default_rng((seed, _STREAM_FOLDS))
    fold = np.zeros(n, dtype=np.int64)
    if positive_cols.size == 0:
        order = rng.permutation(n)
        fold[order] = np.arange(n) % n_folds
        return fold
    rarest = positive_cols[np.argmin(counts[positive_cols])]
    pos = rng.permutation(np.flatnonzero(labels[:, rarest] == 1))
    neg = rng.permutation(np.flatnonzero(labels[:, rarest] == 0))
    fold[pos] = np.arange(pos.size) % n_folds
    fold[neg] = np.arange(neg.size) % n_folds
    return fold


def fit_linear_head(
    x: np.ndarray,
    y: np.ndarray,
    lr: float = 0.001,
    batch_size: int = 64,
    epochs: int = 100,
    seed: int = 0,
    fold: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid + binary cross-entropy on frozen features, fixed-lr AdamW.

    Returns the trained (weights [d, k], bias [k])."""
    d, k = x.shape[1], y.shape[1]
    params = {
        "w": Tensor(np.zeros((d, k), dtype=np.float32), requires_grad=True),
        "b": Tensor(np.zeros(k, dtype=np.float32), requires_grad=True),
    }
    opt = AdamState.for_params(params)
    x = np.asarray(x, dtype=np.float32)
    y32 = np.asarray(y, dtype=np.float32)
    for epoch in range(epochs):
        order = np.random.default_rng(
            (seed, _STREAM_PROBE, fold, epoch)
        ).permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            ids = order[start : start + batch_size]
            xb, yb = Tensor(x[ids]), Tensor(y32[ids])
            for p in params.values():
                p.grad = None
            tape = Tape()
            with tape:
                logits = ad.add(ad.matmul(xb, params["w"]), params["b"])
                # mean of softplus(logit) - y * logit == sigmoid cross-entropy
                loss = ad.tmean(ad.sub(ad.softplus(logits), ad.mul(yb, logits)))
            tape.backward(loss)
            grads = {name: p.grad for name, p in params.items()}
            adamw_step(params, grads, opt, lr, weight_decay=0.0)
    return params["w"].data, params["b"].data


def linear_probe(
    embeddings: np.ndarray, labels: np.ndarray, config: ProbeConfig
) -> EvalReport:
    """Cross-validated linear readout of frozen embeddings."""
    config = config.validate()
    x = np.asarray(embeddings, dtype=np.float32)
    y = np.atleast_2d(np.asarray(labels)).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels disagree on the record count")
    n, k = y.shape
    fold_of = _stratified_folds(y, config.n_folds, config.seed)
    per_class_auc = np.full((config.n_folds, k), np.nan)
    per_class_f1 = np.zeros((config.n_folds, k))
    per_class_acc = np.zeros((config.n_folds, k))
    fold_macros = {"auc": [], "f1": [], "accuracy": []}
    for fold in range(config.n_folds):
        test = fold_of == fold
        train = ~test
        w, b = fit_linear_head(
            x[train],
            y[train],
            lr=config.lr,
            batch_size=config.batch_size,
            epochs=config.epochs,
            seed=config.seed,
            fold=fold,
        )
        logits = x[test] @ w + b
        scores = 1.0 / (1.0 + np.exp(-logits))
        macro_auc, aucs = macro_auroc(scores, y[test])
        f1_macro, acc_mean, f1s, accs = f1_accuracy(scores, y[test], [0.5] * k)
        for j in range(k):
            if aucs[j] is not None:
                per_class_auc[fold, j] = aucs[j]
        per_class_f1[fold] = f1s
        per_class_acc[fold] = accs
        fold_macros["auc"].append(macro_auc)
        fold_macros["f1"].append(f1_macro)
        fold_macros["accuracy"].append(acc_mean)
    with np.errstate(invalid="ignore"):
        auc_means = np.nanmean(per_class_auc, axis=0)
    class_auc = [None if np.isnan(v) else float(v) for v in auc_means]
    class_f1 = per_class_f1.mean(axis=0).tolist()
    class_acc = per_class_acc.mean(axis=0).tolist()
    return EvalReport(
        task=f"linear_probe/{config.target}",
        macro_auc=_macro_from_per_class(class_auc),
        macro_f1=float(np.mean(class_f1)),
        accuracy=float(np.mean(class_acc)),
        per_class_auc=class_auc,
        per_class_f1=class_f1,
        per_class_accuracy=class_acc,
        thresholds=[0.5] * k,
        fold_mean={m: float(np.mean(v)) for m, v in fold_macros.items()},
        fold_std={m: float(np.std(v)) for m, v in fold_macros.items()},
    )


def probe_checkpoint(
    ckpt: Checkpoint, dataset: Dataset, config: ProbeConfig
) -> EvalReport:
    pooled, _ = embed_dataset(ckpt, dataset)
    labels = (
        dataset.semantic_labels if config.target == "semantic" else dataset.structural_labels
    )
    return linear_probe(pooled, labels, config)


# ---------------------------------------------------------------------------
# zero-shot


def zero_shot(
    ckpt: Checkpoint, dataset: Dataset, class_descriptions: list[list[int]] | None = None
) -> EvalReport:
    """Score records against embedded class descriptions, no training.

    AUC uses the raw cosine scores; F1/accuracy threshold each class at its
    mean score over the evaluation set.
    """
    if normalize_objective(ckpt.train_config.objective) == "mse":
        raise IncompatibleCheckpointError(
            "checkpoint has no text branch trained; zero-shot unavailable"
        )
    descriptions = (
        dataset.manifest.class_descriptions if class_descriptions is None else class_descriptions
    )
    if len(descriptions) != dataset.manifest.k_s:
        raise ConfigError(
            f"need one class description per semantic class "
            f"({dataset.manifest.k_s}), got {len(descriptions)}"
        )
    _, projected = embed_dataset(ckpt, dataset)
    class_emb = embed_class_descriptions(ckpt, descriptions)
    scores = projected @ class_emb.T
    labels = dataset.semantic_labels
    macro_auc, aucs = macro_auroc(scores, labels)
    thresholds = scores.mean(axis=0)
    macro_f1, acc, f1s, accs = f1_accuracy(scores, labels, thresholds)
    return EvalReport(
        task="zero_shot/semantic",
        macro_auc=macro_auc,
        macro_f1=macro_f1,
        accuracy=acc,
        per_class_auc=aucs,
        per_class_f1=f1s,
        per_class_accuracy=accs,
        thresholds=[float(t) for t in thresholds],
    )


# ---------------------------------------------------------------------------
# diagnostics


def diagnostics(
    ckpt: Checkpoint,
    dataset: Dataset,
    batch_size: int = 32,
    tau: float = 1.0,
    seed: int = 0,
) -> dict:
    """Held-out alignment diagnostics: batched contrastive MI estimate,
    mean paired cosine, and embedding norm summaries."""
    if len(dataset) < 2 * batch_size:
        raise ConfigError("diagnostics need at least two batches of paired records")
    pooled, projected = embed_dataset(ckpt, dataset)
    report_emb = embed_reports(ckpt, dataset.reports)
    order = np.random.default_rng((seed, _STREAM_DIAG)).permutation(len(dataset))
    n_batches = len(dataset) // batch_size
    values = []
    for b in range(n_batches):
        ids = order[b * batch_size : (b + 1) * batch_size]
        values.append(mi_proxy(projected[ids], report_emb[ids], tau))
    cosine = float(np.mean(np.sum(projected * report_emb, axis=1)))
    return {
        "mi_proxy": float(np.mean(values)),
        "mi_proxy_std": float(np.std(values)),
        "mi_batches": n_batches,
        "mi_batch_size": batch_size,
        "mi_tau": tau,
        "mean_paired_cosine": cosine,
        "signal_embedding_norm_mean": float(np.linalg.norm(pooled, axis=1).mean()),
        "signal_embedding_norm_std": float(np.linalg.norm(pooled, axis=1).std()),
    }


# ---------------------------------------------------------------------------
# embedding export
#
#   emb.json   header: {"n", "d", "checkpoint_hash"}
#   emb.f32    little-endian float32, row-major [n, d]


def export_embeddings(path, embeddings: np.ndarray, checkpoint_hash: str) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arr = np.atleast_2d(np.asarray(embeddings, dtype=np.float32))
    header = {"n": int(arr.shape[0]), "d": int(arr.shape[1]), "checkpoint_hash": checkpoint_hash}
    (out / "emb.json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    (out / "emb.f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path) -> tuple[np.ndarray, str]:
    root = Path(path)
    header = json.loads((root / "emb.json").read_text(encoding="utf-8"))
    raw = (root / "emb.f32").read_bytes()
    n, d = int(header["n"]), int(header["d"])
    if len(raw) != 4 * n * d:
        raise ConfigError(
            f"payload size mismatch in emb.f32: expected {4 * n * d} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(n, d).copy(), str(header["checkpoint_hash"])
