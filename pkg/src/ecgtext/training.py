"""Pretraining loop: decoupled-weight-decay adaptive updates on a cosine
schedule, deterministic seeding, per-epoch logging, and checkpoint files.

Every source of randomness is derived counter-style from
``(seed, stream, ...)`` tuples, so a fixed seed reproduces the run
bit-for-bit and resuming from a checkpoint continues the exact trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ecgtext import autodiff as ad
from ecgtext import models
from ecgtext.autodiff import NonFiniteLossError, Tape, Tensor
from ecgtext.datasets import Dataset
from ecgtext.exceptions import ConfigError, IncompatibleCheckpointError
from ecgtext.models import EncoderConfig
from ecgtext.objectives import (
    ObjectiveConfig,
    loss_cma,
    loss_merit,
    loss_mib,
    loss_rec,
)
from ecgtext.preprocessing import mask_seed, patchify_batch, preprocess_batch, sample_mask

__all__ = [
    "TrainConfig",
    "AdamState",
    "adamw_step",
    "cosine_lr",
    "Checkpoint",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "encoder_config_for",
    "OBJECTIVES",
]

OBJECTIVES = ("merit", "cma", "mse", "mib")
_OBJECTIVE_ALIASES = {"cma_only": "cma", "mse_only": "mse"}

_STREAM_SHUFFLE = 3


def normalize_objective(name: str) -> str:
    canon = _OBJECTIVE_ALIASES.get(name, name)
    if canon not in OBJECTIVES:
        raise ConfigError(f"unknown objective {name!r}; expected one of {OBJECTIVES}")
    return canon


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "merit"
    epochs: int = 20
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_ratio: float = 0.75
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    checkpoint_every: int = 0  # also write every k epochs; 0 = final only

    def validate(self) -> "TrainConfig":
        normalize_objective(self.objective)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_min < 0 or self.lr_min > self.lr_max or self.lr_max <= 0:
            raise ConfigError("need 0 <= lr_min <= lr_max with lr_max > 0")
        for beta in (self.beta1, self.beta2):
            if not 0.0 <= beta < 1.0:
                raise ConfigError("betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")
        return self


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_names: set[str] | None = None,
) -> None:
    """One decoupled-weight-decay adaptive update, in place.

    Only parameters present in ``grads`` are touched.  ``decay_names``
    restricts which of them also receive the decay term (all, by default).
    """
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for parameter '{name}'")
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and (decay_names is None or name in decay_names):
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine from lr_max at step 0 down to lr_min at total_steps."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# trainable subsets per objective arm

_ARM_PREFIXES = {
    "merit": ("ecg.", "text.", "dec.", "proj."),
    "cma": ("ecg.", "text.", "proj."),
    "mib": ("ecg.", "text.", "proj."),
    "mse": ("ecg.", "dec."),
}


def trainable_names(objective: str, names: list[str]) -> list[str]:
    prefixes = _ARM_PREFIXES[normalize_objective(objective)]
    return [n for n in names if n.startswith(prefixes)]


def decay_param_names(params: dict[str, Tensor]) -> set[str]:
    """Weight matrices and embedding tables decay; biases, norm scales, and
    the mask token (all rank < 2) do not."""
    return {name for name, p in params.items() if p.data.ndim >= 2}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    objective_config: ObjectiveConfig
    train_config: TrainConfig
    step: int
    epoch: int  # completed epochs
    params_flat: np.ndarray
    opt_m_flat: np.ndarray
    opt_v_flat: np.ndarray
    layout_hash: str

    def params(self, dtype=np.float32) -> dict[str, Tensor]:
        return models.unflatten_params(self.params_flat, self.encoder_config, dtype)


def _config_snapshot(ckpt: Checkpoint) -> dict:
    return {
        "encoder": asdict(ckpt.encoder_config),
        "objective": asdict(ckpt.objective_config),
        "train": asdict(ckpt.train_config),
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "config": _config_snapshot(ckpt),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "layout_hash": ckpt.layout_hash,
        "rng_state": {"seed": ckpt.train_config.seed, "epoch": ckpt.epoch, "step": ckpt.step},
        "n_params": int(ckpt.params_flat.size),
    }
    (out / "ckpt.json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    for name, vec in (
        ("params.f32", ckpt.params_flat),
        ("opt_m.f32", ckpt.opt_m_flat),
        ("opt_v.f32", ckpt.opt_v_flat),
    ):
        (out / name).write_bytes(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    header_path = root / "ckpt.json"
    if not header_path.exists():
        raise IncompatibleCheckpointError(f"no checkpoint at {root}: missing ckpt.json")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    config = header["config"]
    enc = EncoderConfig(**config["encoder"]).validate()
    obj = ObjectiveConfig(**config["objective"]).validate()
    train = TrainConfig(**config["train"]).validate()
    expected_hash = models.param_layout_hash(enc)
    if header["layout_hash"] != expected_hash:
        raise IncompatibleCheckpointError(
            "incompatible checkpoint: parameter layout hash "
            f"{header['layout_hash']} != {expected_hash} derived from its config"
        )
    n_params = int(header["n_params"])
    vectors = {}
    for name in ("params.f32", "opt_m.f32", "opt_v.f32"):
        raw = (root / name).read_bytes()
        if len(raw) != 4 * n_params:
            raise IncompatibleCheckpointError(
                f"incompatible checkpoint: {name} holds {len(raw)} bytes, expected {4 * n_params}"
            )
        vectors[name] = np.frombuffer(raw, dtype="<f4").copy()
    return Checkpoint(
        encoder_config=enc,
        objective_config=obj,
        train_config=train,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        params_flat=vectors["params.f32"],
        opt_m_flat=vectors["opt_m.f32"],
        opt_v_flat=vectors["opt_v.f32"],
        layout_hash=header["layout_hash"],
    )


def initial_checkpoint(
    enc_cfg: EncoderConfig, obj_cfg: ObjectiveConfig, train_cfg: TrainConfig
) -> Checkpoint:
    """Freshly initialized, untrained state: the null baseline."""
    params = models.init_params(enc_cfg.validate(), train_cfg.seed)
    flat = models.flatten_params(params, enc_cfg).astype(np.float32)
    zeros = np.zeros_like(flat)
    return Checkpoint(
        encoder_config=enc_cfg,
        objective_config=obj_cfg,
        train_config=train_cfg,
        step=0,
        epoch=0,
        params_flat=flat,
        opt_m_flat=zeros,
        opt_v_flat=zeros.copy(),
        layout_hash=models.param_layout_hash(enc_cfg),
    )


# ---------------------------------------------------------------------------
# pretraining


def encoder_config_for(dataset: Dataset, **overrides) -> EncoderConfig:
    """Encoder config sized to a dataset's grid and vocabulary."""
    p = int(overrides.pop("p", 50))
    if dataset.manifest.t % p != 0:
        raise ConfigError(f"invalid patch length {p} for t={dataset.manifest.t}")
    return EncoderConfig(
        vocab_size=len(dataset.manifest.vocab),
        max_report_len=max(dataset.max_report_len, 1),
        n_leads=dataset.manifest.c,
        patches_per_lead=dataset.manifest.t // p,
        p=p,
        **overrides,
    ).validate()


class _BatchForward:
    """Shared forward pass for every objective arm; reused by evaluation."""

    def __init__(self, dataset: Dataset, enc: EncoderConfig):
        if len(dataset.manifest.vocab) != enc.vocab_size:
            raise ConfigError("encoder vocab_size does not match the dataset")
        if dataset.manifest.c != enc.n_leads or dataset.manifest.t != enc.p * enc.patches_per_lead:
            raise ConfigError("encoder grid does not match the dataset")
        if dataset.max_report_len > enc.max_report_len:
            raise ConfigError("a report exceeds the encoder's max_report_len")
        clean = preprocess_batch(dataset.signals).astype(np.float32)
        self.patches, self.lead, self.time = patchify_batch(clean, enc.p)
        self.reports = dataset.reports
        self.enc = enc

    def visible_forward(self, params, ids: np.ndarray, visible: np.ndarray):
        patches = Tensor(self.patches[ids])
        tokens = models.embed_patches(patches, self.lead, self.time, params)
        vis_tokens = ad.take_along_rows(tokens, visible)
        return patches, models.ecg_encode(vis_tokens, params, self.enc)

    def text_forward(self, params, ids: np.ndarray):
        ids_pad, pad_mask = models.pad_reports(
            [self.reports[i] for i in ids], self.enc.max_report_len, self.enc.vocab_size
        )
        states = models.text_encode(ids_pad, pad_mask, params, self.enc)
        return models.pool_mean_padded(states, pad_mask)


def _batch_mask_indices(
    record_ids: np.ndarray, n_patches: int, ratio: float, seed: int, epoch: int
) -> tuple[np.ndarray, np.ndarray]:
    visible, masked = [], []
    for rid in record_ids:
        plan = sample_mask(n_patches, ratio, mask_seed(seed, int(rid), epoch))
        visible.append(plan.visible)
        masked.append(plan.masked)
    return np.stack(visible), np.stack(masked)


def _objective_loss(objective, fwd: _BatchForward, params, ids, visible, masked, obj_cfg):
    """Returns (total, alignment part, reconstruction-or-bottleneck part)."""
    patches, z_vis = fwd.visible_forward(params, ids, visible)
    zero = Tensor(np.asarray(0.0, dtype=z_vis.dtype))
    if objective == "mse":
        z_full = models.insert_mask_tokens(
            z_vis, visible, masked, fwd.lead, fwd.time, params, fwd.enc.n_patches
        )
        x_hat = models.decode(z_full, params, fwd.enc)
        rec = loss_rec(patches, x_hat, masked, obj_cfg.rec_scope)
        return rec, zero, rec
    z_pool = models.pool_mean(z_vis)
    r_pool = fwd.text_forward(params, ids)
    z_proj = models.project(z_pool, params, "ecg")
    r_proj = models.project(r_pool, params, "text")
    if objective == "cma":
        cma = loss_cma(z_proj, r_proj, obj_cfg.tau)
        return cma, cma, zero
    if objective == "mib":
        # bottleneck penalty on the pooled embeddings (normalized inside the
        # cosine), the space downstream probes read
        return loss_mib(
            z_proj,
            r_proj,
            obj_cfg,
            z_ib=ad.l2_normalize(z_pool),
            r_ib=ad.l2_normalize(r_pool),
        )
    z_full = models.insert_mask_tokens(
        z_vis, visible, masked, fwd.lead, fwd.time, params, fwd.enc.n_patches
    )
    x_hat = models.decode(z_full, params, fwd.enc)
    return loss_merit(z_proj, r_proj, patches, x_hat, masked, obj_cfg)


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale


def pretrain(
    dataset: Dataset,
    enc_cfg: EncoderConfig,
    obj_cfg: ObjectiveConfig,
    train_cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
    checkpoint_dir=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Run the full pretraining schedule and return the final checkpoint.

    Deterministic for a fixed config: the epoch shuffle comes from
    ``(seed, epoch)`` and each record's mask from ``(seed, record, epoch)``.
    The last partial batch of an epoch is dropped so the in-batch negative
    count stays constant.
    """
    enc_cfg.validate()
    obj_cfg.validate()
    train_cfg = train_cfg.validate()
    objective = normalize_objective(train_cfg.objective)
    if objective in ("merit", "mse") and obj_cfg.rec_scope == "masked_only":
        expected = int(math.floor(train_cfg.mask_ratio * enc_cfg.n_patches + 0.5))
        if expected == 0:
            raise ConfigError(
                "masked_only reconstruction needs a mask ratio that masks at least one patch"
            )
    n = len(dataset)
    if n < train_cfg.batch_size:
        raise ConfigError(
            f"dataset has {n} records, smaller than batch_size={train_cfg.batch_size}"
        )

    fwd = _BatchForward(dataset, enc_cfg)
    steps_per_epoch = n // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs

    if resume_from is not None:
        if resume_from.layout_hash != models.param_layout_hash(enc_cfg):
            raise IncompatibleCheckpointError(
                "incompatible checkpoint: layout differs from the requested config"
            )
        if normalize_objective(resume_from.train_config.objective) != objective:
            raise IncompatibleCheckpointError(
                "incompatible checkpoint: trained with a different objective"
            )
        if resume_from.train_config != train_cfg:
            raise IncompatibleCheckpointError(
                "incompatible checkpoint: resume requires the identical training config"
            )
        if resume_from.epoch >= train_cfg.epochs:
            raise IncompatibleCheckpointError(
                f"incompatible checkpoint: already trained for {resume_from.epoch} epochs"
            )
        params = resume_from.params()
        state_flat_m, state_flat_v = resume_from.opt_m_flat, resume_from.opt_v_flat
        start_epoch, step = resume_from.epoch, resume_from.step
    else:
        params = models.init_params(enc_cfg, train_cfg.seed)
        state_flat_m = state_flat_v = None
        start_epoch, step = 0, 0

    names = trainable_names(objective, models.param_names(enc_cfg))
    trainable = {name: params[name] for name in names}
    opt = AdamState.for_params(trainable)
    opt.step = step
    if state_flat_m is not None:
        m_all = models.unflatten_params(state_flat_m, enc_cfg)
        v_all = models.unflatten_params(state_flat_v, enc_cfg)
        opt.m = {name: m_all[name].data for name in names}
        opt.v = {name: v_all[name].data for name in names}
    decay = decay_param_names(trainable)

    def snapshot(epoch: int, at_step: int) -> Checkpoint:
        m_full = {name: np.zeros_like(params[name].data) for name in params}
        v_full = {name: np.zeros_like(params[name].data) for name in params}
        m_full.update(opt.m)
        v_full.update(opt.v)

        def wrap(arrays):
            return {k: Tensor(v) for k, v in arrays.items()}

        return Checkpoint(
            encoder_config=enc_cfg,
            objective_config=obj_cfg,
            train_config=train_cfg,
            step=at_step,
            epoch=epoch,
            params_flat=models.flatten_params(params, enc_cfg).astype(np.float32),
            opt_m_flat=models.flatten_params(wrap(m_full), enc_cfg).astype(np.float32),
            opt_v_flat=models.flatten_params(wrap(v_full), enc_cfg).astype(np.float32),
            layout_hash=models.param_layout_hash(enc_cfg),
        )

    for epoch in range(start_epoch, train_cfg.epochs):
        order = np.random.default_rng(
            (train_cfg.seed, _STREAM_SHUFFLE, epoch)
        ).permutation(n)
        sums = np.zeros(3)
        lr = train_cfg.lr_max
        for b in range(steps_per_epoch):
            ids = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            visible, masked = _batch_mask_indices(
                ids, enc_cfg.n_patches, train_cfg.mask_ratio, train_cfg.seed, epoch
            )
            for p in trainable.values():
                p.grad = None
            tape = Tape()
            with tape:
                total, part_a, part_b = _objective_loss(
                    objective, fwd, params, ids, visible, masked, obj_cfg
                )
            if not np.isfinite(total.data):
                culprit = tape.first_nonfinite_op() or "<input>"
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}: first bad primitive '{culprit}'"
                )
            tape.backward(total)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in trainable.items()
            }
            if train_cfg.grad_clip > 0:
                _clip_grads(grads, train_cfg.grad_clip)
            lr = cosine_lr(step, total_steps, train_cfg.lr_max, train_cfg.lr_min)
            adamw_step(
                trainable,
                grads,
                opt,
                lr,
                train_cfg.weight_decay,
                (train_cfg.beta1, train_cfg.beta2),
                train_cfg.adam_eps,
                decay_names=decay,
            )
            step += 1
            sums += (total.item(), part_a.item(), part_b.item())
        means = sums / steps_per_epoch
        if log is not None:
            log(f"{epoch}\t{means[0]:.6f}\t{means[1]:.6f}\t{means[2]:.6f}\t{lr:.6g}")
        finished = epoch + 1
        if checkpoint_dir is not None:
            if finished == train_cfg.epochs:
                save_checkpoint(snapshot(finished, step), checkpoint_dir)
            elif train_cfg.checkpoint_every and finished % train_cfg.checkpoint_every == 0:
                save_checkpoint(
                    snapshot(finished, step),
                    Path(checkpoint_dir) / f"epoch_{finished:04d}",
                )
    return snapshot(train_cfg.epochs, step)
