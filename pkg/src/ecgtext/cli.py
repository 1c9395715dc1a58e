"""Command-line front end.

One subcommand per pipeline stage: data generation, pretraining under any
objective arm, linear probing, zero-shot classification, diagnostics,
embedding export, and gradient checking.  Every run is a pure function of
(config file, flags, seed, input files); each command that writes outputs
also writes the fully resolved config (defaults included) next to them.

Exit codes: 0 success, 2 usage, 3 config error, 4 incompatible checkpoint,
5 data error, 6 non-finite loss, 1 anything else.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import sys
from pathlib import Path

from ecgtext.autodiff import NonFiniteLossError
from ecgtext.datasets import GeneratorConfig, generate_corpus, load_dataset, save_dataset
from ecgtext.evaluation import (
    ProbeConfig,
    diagnostics,
    embed_dataset,
    export_embeddings,
    probe_checkpoint,
    zero_shot,
)
from ecgtext.exceptions import ConfigError, DataError, IncompatibleCheckpointError
from ecgtext.gradcheck import run_gradcheck
from ecgtext.objectives import ObjectiveConfig
from ecgtext.training import (
    TrainConfig,
    encoder_config_for,
    load_checkpoint,
    pretrain,
)

__all__ = ["main", "load_config", "serialize_config"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5
EXIT_NONFINITE = 6
EXIT_OTHER = 1

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {
        "n": 1024,
        "c": 12,
        "t": 1000,
        "k_s": 4,
        "k_m": 2,
        "prevalence": "0.3,0.3,0.3,0.3",
        "noise_sigma": 0.25,
        "seed": 0,
    },
    "model": {
        "patch_len": 50,
        "d_model": 64,
        "n_heads": 4,
        "depth_ecg": 2,
        "depth_text": 2,
        "depth_dec": 1,
        "d_proj": 32,
        "activation": "gelu",
    },
    "objective": {
        "tau": 0.07,
        "lambda_ib": 0.1,
        "rec_scope": "masked_only",
        "sigma2": 1.0,
    },
    "train": {
        "objective": "merit",
        "epochs": 20,
        "batch_size": 128,
        "lr_max": 1e-3,
        "lr_min": 0.0,
        "weight_decay": 1e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "seed": 0,
        "mask_ratio": 0.75,
        "grad_clip": 0.0,
        "checkpoint_every": 0,
    },
    "eval": {
        "probe_lr": 0.001,
        "probe_batch_size": 64,
        "probe_epochs": 100,
        "n_folds": 5,
        "seed": 0,
        "mi_batch_size": 32,
        "mi_tau": 1.0,
    },
}


def load_config(path: str | None) -> dict[str, dict[str, object]]:
    """Defaults overlaid with the file's ``[section] key = value`` entries.

    Unknown sections or keys are rejected; every value is coerced to its
    default's type."""
    resolved = {section: dict(values) for section, values in DEFAULTS.items()}
    if path is None:
        return resolved
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in resolved:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in resolved[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            default = DEFAULTS[section][key]
            try:
                if isinstance(default, int):
                    resolved[section][key] = int(raw)
                elif isinstance(default, float):
                    resolved[section][key] = float(raw)
                else:
                    resolved[section][key] = raw
            except ValueError as err:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r}") from err
    return resolved


def serialize_config(config: dict[str, dict[str, object]]) -> str:
    parser = configparser.ConfigParser()
    for section in DEFAULTS:
        parser[section] = {key: str(v) for key, v in config[section].items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def _write_resolved(config: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(serialize_config(config), encoding="utf-8")


def _prevalence_tuple(raw: str, k_s: int) -> tuple[float, ...]:
    parts = [p for p in str(raw).split(",") if p.strip()]
    values = tuple(float(p) for p in parts)
    if len(values) == 1:
        values = values * k_s
    return values


def _generator_config(config: dict) -> GeneratorConfig:
    data = config["data"]
    return GeneratorConfig(
        n=int(data["n"]),
        c=int(data["c"]),
        t=int(data["t"]),
        k_s=int(data["k_s"]),
        k_m=int(data["k_m"]),
        prevalence=_prevalence_tuple(data["prevalence"], int(data["k_s"])),
        noise_sigma=float(data["noise_sigma"]),
    ).validate()


def _objective_config(config: dict) -> ObjectiveConfig:
    obj = config["objective"]
    return ObjectiveConfig(
        tau=float(obj["tau"]),
        lambda_ib=float(obj["lambda_ib"]),
        rec_scope=str(obj["rec_scope"]),
        sigma2=float(obj["sigma2"]),
    ).validate()


def _train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        objective=str(t["objective"]),
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr_max=float(t["lr_max"]),
        lr_min=float(t["lr_min"]),
        weight_decay=float(t["weight_decay"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        adam_eps=float(t["adam_eps"]),
        seed=int(t["seed"]),
        mask_ratio=float(t["mask_ratio"]),
        grad_clip=float(t["grad_clip"]),
        checkpoint_every=int(t["checkpoint_every"]),
    ).validate()


def _probe_config(config: dict, target: str) -> ProbeConfig:
    e = config["eval"]
    return ProbeConfig(
        lr=float(e["probe_lr"]),
        batch_size=int(e["probe_batch_size"]),
        epochs=int(e["probe_epochs"]),
        n_folds=int(e["n_folds"]),
        seed=int(e["seed"]),
        target=target,
    ).validate()


def _encoder_config(config: dict, dataset):
    m = config["model"]
    return encoder_config_for(
        dataset,
        p=int(m["patch_len"]),
        d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]),
        depth_ecg=int(m["depth_ecg"]),
        depth_text=int(m["depth_text"]),
        depth_dec=int(m["depth_dec"]),
        d_proj=int(m["d_proj"]),
        activation=str(m["activation"]),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["data"]["seed"] = args.seed
    dataset = generate_corpus(_generator_config(config), seed=int(config["data"]["seed"]))
    out = Path(args.out)
    save_dataset(dataset, out)
    _write_resolved(config, out)
    print(f"wrote {len(dataset)} records to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    if args.objective is not None:
        config["train"]["objective"] = args.objective
    if args.seed is not None:
        config["train"]["seed"] = args.seed
    dataset = load_dataset(args.data)
    enc = _encoder_config(config, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(config, out)
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        print(line)

    pretrain(
        dataset,
        enc,
        _objective_config(config),
        _train_config(config),
        log=log,
        checkpoint_dir=out,
    )
    (out / "train.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_probe(args) -> int:
    config = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = probe_checkpoint(ckpt, dataset, _probe_config(config, args.target))
    out = Path(args.out)
    _write_resolved(config, out)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.summary_tsv())
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    config = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = zero_shot(ckpt, dataset)
    out = Path(args.out)
    _write_resolved(config, out)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.summary_tsv())
    return EXIT_OK


def cmd_diag(args) -> int:
    config = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    e = config["eval"]
    out_data = diagnostics(
        ckpt,
        dataset,
        batch_size=int(e["mi_batch_size"]),
        tau=float(e["mi_tau"]),
        seed=int(e["seed"]),
    )
    out = Path(args.out)
    _write_resolved(config, out)
    text = json.dumps(out_data, indent=2, sort_keys=True)
    (out / "diagnostics.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_export_emb(args) -> int:
    config = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    pooled, projected = embed_dataset(ckpt, dataset)
    out = Path(args.out)
    _write_resolved(config, out)
    export_embeddings(out, pooled, ckpt.layout_hash)
    export_embeddings(out / "projected", projected, ckpt.layout_hash)
    print(f"exported {pooled.shape[0]} embeddings of width {pooled.shape[1]} to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    print("check\tmax_rel_err\ttolerance\tstatus")
    for row in rows:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"{row['name']}\t{row['max_rel_err']:.3e}\t{row['tolerance']:.0e}\t{status}")
    return EXIT_OK if all(row["passed"] for row in rows) else EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgtext",
        description="paired signal/report representation learning lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic paired corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain under one objective arm")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=("merit", "cma", "mse", "mib"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probing of a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", choices=("semantic", "structural"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("zeroshot", help="zero-shot classification")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("diag", help="alignment diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("export-emb", help="export frozen embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_export_emb)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _fail(code: int, kind: str, err: Exception) -> int:
    message = " ".join(str(err).split())
    print(f"error\t{code}\t{kind}\t{message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else 0
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config-error", err)
    except IncompatibleCheckpointError as err:
        return _fail(EXIT_CHECKPOINT, "incompatible-checkpoint", err)
    except DataError as err:
        return _fail(EXIT_DATA, "data-error", err)
    except NonFiniteLossError as err:
        return _fail(EXIT_NONFINITE, "non-finite", err)
    except FileNotFoundError as err:
        return _fail(EXIT_DATA, "missing-file", err)
    except Exception as err:  # pragma: no cover - catch-all for the CLI boundary
        return _fail(EXIT_OTHER, "error", err)


if __name__ == "__main__":
    sys.exit(main())
