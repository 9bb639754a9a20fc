"""Command-line entry point: ``gmae <command> [flags]``.

Every command writes ``manifest.json`` into its output directory.  The
manifest holds every resolved flag, so ``gmae rerun --manifest PATH``
repeats the run and reproduces its CSV files exactly.

Exit codes: 0 success, 2 bad arguments or configuration, 3 bad input data,
4 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError, GmaeError, NumericError, StateError
from .evaluate import (
    embed_dataset,
    kfold_evaluate,
    mae_metric,
    read_embeddings_csv,
    svm_classifier,
    write_embeddings_csv,
)
from .graph import CLASSIFICATION, REGRESSION, load_dataset
from .memory import memory_profile, write_profile_csv
from .model import GmaeConfig
from .train import (
    Pretrainer,
    TrainConfig,
    finetune,
    finetune_checkpoint,
    params_from_checkpoint,
    predict,
    write_history_csv,
)

log = logging.getLogger("gmae")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
MANIFEST_VERSION = 1


class ArgumentError(GmaeError):
    """A flag value that parses but is unusable."""


# ---------------------------------------------------------------------------
# parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--mask-ratio", type=float, default=0.5)
    g.add_argument("--enc-layers", type=int, default=12)
    g.add_argument("--dec-layers", type=int, default=2)
    g.add_argument("--hidden", type=int, default=80)
    g.add_argument("--heads", type=int, default=8)
    g.add_argument("--max-spd", type=int, default=20)
    g.add_argument("--max-degree", type=int, default=64)


def _train_flags(p: argparse.ArgumentParser, epochs: int = 100) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--peak-lr", type=float, default=1e-4)
    g.add_argument("--end-lr", type=float, default=1e-9)
    g.add_argument("--warmup", type=int, default=40000)
    g.add_argument("--total-steps", type=int, default=None)
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--patience", type=int, default=50)
    g.add_argument("--batch-size", type=int, default=32)


def _data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--format", choices=["tu", "jsonl"], default="tu")
    g.add_argument("--data", required=required)
    g.add_argument("--name", default=None)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="gmae_out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmae", description="Masked graph autoencoder experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)
    _common_flags(p)

    p = sub.add_parser("finetune", help="fine-tune a pretrained encoder with a task head")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--freeze-encoder", action="store_true")
    _common_flags(p)

    p = sub.add_parser("embed", help="export pooled graph embeddings as CSV")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    _common_flags(p)

    p = sub.add_parser("eval", help="k-fold linear-probe accuracy of an embeddings CSV")
    p.add_argument("--embeddings", required=True)
    _data_flags(p, required=False)
    _eval_flags(p)
    _common_flags(p)

    for name, helptext in (("sweep-mask", "pretrain+evaluate across mask ratios"),
                           ("sweep-decoder", "pretrain+evaluate across decoder depths")):  # fmt: skip
        p = sub.add_parser(name, help=helptext)
        _data_flags(p)
        _model_flags(p)
        _train_flags(p)
        _eval_flags(p)
        p.add_argument("--finetune-epochs", type=int, default=300)
        if name == "sweep-mask":
            p.add_argument("--ratios", type=_float_list, default=[round(0.1 * i, 1) for i in range(1, 10)])
        else:
            p.add_argument("--depths", type=_int_list, default=[1, 2, 3, 4, 6, 8])
        _common_flags(p)

    p = sub.add_parser("memprofile", help="estimated and measured peak floats, masked vs full")
    _model_flags(p)
    p.set_defaults(mask_ratio=0.7)
    p.add_argument("--sizes", type=_int_list, default=[32, 64, 128, 256])
    _common_flags(p)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _gmae_config(a, **over) -> GmaeConfig:
    if not 0.0 < a.mask_ratio < 1.0:
        raise ArgumentError(f"--mask-ratio must lie strictly between 0 and 1, got {a.mask_ratio}")
    kw = dict(
        enc_layers=a.enc_layers, dec_layers=a.dec_layers, hidden=a.hidden, heads=a.heads,
        mask_ratio=a.mask_ratio, max_spd=a.max_spd, max_degree=a.max_degree,
    )  # fmt: skip
    kw.update(over)
    return GmaeConfig(**kw)


def _train_config(a, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        peak_lr=a.peak_lr, end_lr=a.end_lr, warmup_steps=a.warmup, total_steps=a.total_steps,
        batch_size=a.batch_size, max_epochs=a.epochs, early_stop_patience=a.patience,
        seed=a.seed if seed is None else seed,
    )  # fmt: skip


def _load(a):
    path = Path(a.data)
    if not path.exists():
        raise DataError(f"--data {a.data}: no such file or directory")
    return load_dataset(a.format, path, a.name)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise ArgumentError(f"--checkpoint {path}: no such file")
    return load_checkpoint(path)


def _out(a) -> Path:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])  # shortest exact form


_PATH_FLAGS = ("data", "checkpoint", "embeddings", "out")


def write_manifest(a, out: Path, extra: dict | None = None) -> None:
    args = {k: v for k, v in vars(a).items() if k not in ("verbose",)}
    for k in _PATH_FLAGS:
        if args.get(k) is not None:
            args[k] = os.path.abspath(args[k])
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": a.command,
        "args": args,
        "created_unix": time.time(),
        **(extra or {}),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(a) -> int:
    gcfg = _gmae_config(a)
    tcfg = _train_config(a)
    dataset = _load(a)
    out = _out(a)
    trainer = Pretrainer(dataset, gcfg, tcfg)
    write_manifest(a, out, {"gmae_config": gcfg.to_dict(), "train_config": trainer.cfg.to_dict()})
    trainer.run(on_epoch=lambda r: log.info("epoch %d loss %.6f", r["epoch"], r["loss"]))
    save_checkpoint(out / "checkpoint.gmae", trainer.checkpoint())
    write_history_csv(out / "history.csv", trainer.history)
    best = trainer.stopper.best
    print(f"pretrained {len(trainer.history)} epochs, best loss {best:.6g}; wrote {out / 'checkpoint.gmae'}")
    return EXIT_OK


def _split(n: int, frac: float, seed: int):
    if not 0.0 <= frac < 1.0:
        raise ArgumentError(f"--val-fraction must lie in [0, 1), got {frac}")
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(frac * n))
    return np.sort(order[k:]), np.sort(order[:k])


def cmd_finetune(a) -> int:
    ckpt = _load_ckpt(a.checkpoint)
    dataset = _load(a)
    out = _out(a)
    params = params_from_checkpoint(ckpt)
    if dataset.target_kind not in (REGRESSION, CLASSIFICATION):
        raise ConfigError(f"dataset {dataset.name!r} has no graph targets to fine-tune on")
    train_idx, val_idx = _split(len(dataset), a.val_fraction, a.seed)
    train, val = dataset.subset(train_idx), dataset.subset(val_idx) if len(val_idx) else None
    write_manifest(a, out)
    params, head, history = finetune(
        params, train, epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, seed=a.seed,
        freeze_encoder=a.freeze_encoder, val_dataset=val,
        on_epoch=lambda r: log.info("epoch %d loss %.6f", r["epoch"], r["loss"]),
    )  # fmt: skip
    save_checkpoint(out / "finetuned.gmae", finetune_checkpoint(params, head, history))
    metric = "mae" if head.kind == REGRESSION else "accuracy"
    rows = [(r["epoch"], r["loss"], r["train_metric"], r.get("val_metric", "")) for r in history]
    _write_csv(out / "metrics.csv", ["epoch", "loss", f"train_{metric}", f"val_{metric}"], rows)
    last = history[-1]
    print(f"train_{metric}={last['train_metric']:.6g}" + (f" val_{metric}={last['val_metric']:.6g}" if val else ""))
    return EXIT_OK


def cmd_embed(a) -> int:
    ckpt = _load_ckpt(a.checkpoint)
    dataset = _load(a)
    out = _out(a)
    params = params_from_checkpoint(ckpt)
    write_manifest(a, out)
    table = embed_dataset(dataset, params, {"checkpoint": os.path.abspath(a.checkpoint)})
    write_embeddings_csv(table, out / "embeddings.csv")
    print(f"wrote {len(table)} embeddings to {out / 'embeddings.csv'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    table = read_embeddings_csv(a.embeddings)
    if a.data is not None:
        dataset = _load(a)
        if len(dataset) != len(table):
            raise DataError(f"{len(table)} embedding rows but {len(dataset)} graphs in {a.data}")
        table.targets = dataset.targets()
    out = _out(a)
    write_manifest(a, out)
    res = kfold_evaluate(table, a.folds, a.repeats, a.seed)
    _write_csv(out / "eval.csv", ["metric", "mean", "std"], [("accuracy", res.mean, res.std)])
    print(f"accuracy,{res.mean:.17g},{res.std:.17g}")
    return EXIT_OK


def run_point(args: dict, gmae_over: dict, seed: int) -> tuple[float, float]:
    """Pretrain with one hyperparameter overridden, then score the encoder.

    Classification datasets use the repeated k-fold linear probe; regression
    datasets fine-tune on a 90/10 split per repeat and report test MAE.
    """
    a = argparse.Namespace(**args)
    dataset = _load(a)
    gcfg = _gmae_config(a, **gmae_over)
    params, _ = Pretrainer(dataset, gcfg, _train_config(a, seed)).run()
    if dataset.target_kind == REGRESSION:
        maes = []
        for r in range(a.repeats):
            tr, te = _split(len(dataset), 0.1, seed + r)
            p, head, _ = finetune(params, dataset.subset(tr), epochs=a.finetune_epochs, seed=seed + r)
            test = dataset.subset(te)
            maes.append(mae_metric(predict(p, head, test), test.targets()))
        return float(np.mean(maes)), float(np.std(maes))
    res = kfold_evaluate(embed_dataset(dataset, params), a.folds, a.repeats, seed, svm_classifier())
    return res.mean, res.std


def _sweep(a, key: str, values, column: str) -> int:
    out = _out(a)
    write_manifest(a, out)
    values = sorted(values)
    args = {k: v for k, v in vars(a).items() if k != "verbose"}
    jobs = [(args, {key: v}, a.seed + i) for i, v in enumerate(values)]
    if a.jobs > 1:
        with ProcessPoolExecutor(max_workers=a.jobs) as pool:
            results = list(pool.map(run_point, *zip(*jobs)))
    else:
        results = [run_point(*j) for j in jobs]
    rows = [(v, m, s) for v, (m, s) in zip(values, results)]
    _write_csv(out / f"sweep_{column}.csv", [column, "metric_mean", "metric_std"], rows)
    for r in rows:
        print(f"{r[0]},{r[1]:.6g},{r[2]:.6g}")
    return EXIT_OK


def cmd_sweep_mask(a) -> int:
    for r in a.ratios:
        if not 0.0 < r < 1.0:
            raise ArgumentError(f"--ratios: {r} is not strictly between 0 and 1")
    _gmae_config(a)
    return _sweep(a, "mask_ratio", a.ratios, "ratio")


def cmd_sweep_decoder(a) -> int:
    if any(d < 1 for d in a.depths):
        raise ArgumentError(f"--depths must all be >= 1, got {a.depths}")
    _gmae_config(a)
    return _sweep(a, "dec_layers", a.depths, "depth")


def cmd_memprofile(a) -> int:
    if any(n < 2 for n in a.sizes):
        raise ArgumentError(f"--sizes must all be >= 2, got {a.sizes}")
    cfg = _gmae_config(a)
    out = _out(a)
    write_manifest(a, out, {"gmae_config": cfg.to_dict()})
    rows = memory_profile(a.sizes, cfg, a.seed)
    write_profile_csv(rows, out / "memprofile.csv")
    for r in rows:
        print(f"{r['n']},{r['mode']},{r['estimated_floats']},{r['measured_floats']}")
    return EXIT_OK


def cmd_rerun(a) -> int:
    try:
        manifest = json.loads(Path(a.manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"--manifest {a.manifest}: {e}") from e
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ArgumentError(f"--manifest {a.manifest}: unsupported manifest version")
    args = dict(manifest["args"])
    if a.out is not None:
        args["out"] = os.path.abspath(a.out)
    ns = argparse.Namespace(**args, verbose=a.verbose)
    return COMMANDS[ns.command](ns)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "sweep-mask": cmd_sweep_mask,
    "sweep-decoder": cmd_sweep_decoder,
    "memprofile": cmd_memprofile,
    "rerun": cmd_rerun,
}


def _thread_limit():
    raw = os.environ.get("GMAE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"GMAE_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if a.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if getattr(a, "jobs", 1) < 1:
            raise ArgumentError(f"--jobs must be >= 1, got {a.jobs}")
        with _thread_limit():
            return COMMANDS[a.command](a)
    except (ArgumentError, ConfigError) as e:
        print(f"gmae {a.command}: error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, FileNotFoundError) as e:
        print(f"gmae {a.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, NumericError, StateError, FloatingPointError, GmaeError, ValueError, RuntimeError) as e:
        print(f"gmae {a.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
