"""Command-line entry point: fetch, build-dataset, synth, search, train, evaluate, price.

Exit codes: 0 success, 2 usage error, 3 input-data error, 4 numerical failure,
5 I/O error. Failures print one line to stderr::

    b3pricing: error code=3 type=DataError message="..."
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, dataset, evaluate, ingest, net, train
from .pricing import bs_call_price

logger = logging.getLogger("b3pricing")

BASE_URL_ENV = "B3_BASE_URL"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- manifest


class RunManifest:
    """Reproducibility record written next to every command's outputs."""

    def __init__(self, command: str, config: dict, seeds: Optional[dict] = None):
        self.data = {
            "command": command,
            "version": __version__,
            "config": config,
            "seeds": seeds or {},
            "inputs": {},
            "outputs": [],
            "started": dt.datetime.now(dt.timezone.utc).isoformat(),
        }

    def write(self, path: Path, outputs: Sequence[Path] = (), **extra) -> None:
        self.data["outputs"] = [str(p) for p in outputs]
        self.data.update(extra)
        self.data["finished"] = dt.datetime.now(dt.timezone.utc).isoformat()
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {s!r}") from None


def _jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ------------------------------------------------------------------- commands


def cmd_fetch(args) -> int:
    out = Path(args.out)
    base_url = os.environ.get(BASE_URL_ENV, ingest.DEFAULT_BASE_URL)
    man = RunManifest(
        "fetch",
        {"from": args.start, "to": args.end, "concurrency": args.concurrency, "base_url": base_url,
         "retries": args.retries, "skip_weekends": args.skip_weekends},
    )  # fmt: skip
    fm = ingest.fetch_archives(
        args.start, args.end, out, args.concurrency, base_url=base_url,
        retries=args.retries, backoff=args.backoff, skip_weekends=args.skip_weekends,
    )  # fmt: skip
    written: list[Path] = []
    failed_extract = {}
    for d, path in sorted(fm.paths.items()):
        written.append(path)
        try:
            files = ingest.extract_archive(path.read_bytes(), path.name)
        except ingest.ExtractionError as exc:
            failed_extract[d.isoformat()] = str(exc)
            logger.warning("%s", exc)
            continue
        written += ingest.write_extracted(files, out / "txt")
    status_path = out / "fetch_status.json"
    status = dict(fm.to_dict(), extraction_errors=failed_extract)
    status_path.write_text(json.dumps(status, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    man.write(out / "manifest.json", [status_path, *written])
    n_ok = len(fm.succeeded)
    print(f"fetched {n_ok}/{len(fm.status)} dates into {out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    out = Path(args.out)
    man = RunManifest("build-dataset", {"options_dir": args.options_dir, "stock": args.stock, "selic": args.selic})
    rows, report = dataset.build_dataset(args.options_dir, args.stock, args.selic, out)
    issues = out.with_name(out.name + ".parse_issues.jsonl")
    _jsonl(issues, [vars(i) for i in report.parse.issues])
    man.write(_manifest_path(out), [out, issues], report=report.to_dict())
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    man = RunManifest("synth", {"n": args.n, "noise_sd": args.noise_sd}, {"seed": args.seed})
    rows = dataset.generate_synthetic(args.n, args.seed, args.noise_sd)
    dataset.write_dataset_csv(rows, out)
    man.write(_manifest_path(out), [out])
    print(f"wrote {len(rows)} synthetic rows to {out}")
    return EXIT_OK


def _resolved_train_config(args) -> train.TrainConfig:
    overrides = train.load_config_file(args.config) if args.config else {}
    flags = {
        "lr": args.lr, "weight_decay": args.weight_decay, "batch_size": args.batch_size,
        "max_epochs": args.epochs, "early_stop_patience": args.patience,
        "hidden_size": args.hidden_size, "dropout_p": args.dropout,
    }  # fmt: skip
    overrides.update({k: v for k, v in flags.items() if v is not None})
    overrides.setdefault("shuffle_seed", args.seed)
    return train.make_config(overrides)


def _splits(args):
    rows = dataset.read_dataset_csv(args.data)
    split_spec = dataset.SplitSpec(args.cutoff, shuffle_seed=args.seed)
    return dataset.split_dataset(rows, split_spec), split_spec


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolved_train_config(args)
    (tr, va, te), split_spec = _splits(args)
    man = RunManifest("train", dict(cfg.to_dict(), cutoff=split_spec.train_val_cutoff, val_fraction=split_spec.val_fraction), {"seed": args.seed})
    man.data["inputs"] = {"data": args.data, "config": args.config}
    model, report = train.train(tr, va, cfg, seed=args.seed)
    model_path, report_path = out / "model.b3net", out / "train_report.jsonl"
    net.save_artifact(model, model_path)
    _jsonl(report_path, report.records())
    man.write(out / "manifest.json", [model_path, report_path],
              split_sizes={"train": len(tr), "val": len(va), "test": len(te)}, wall_seconds=report.wall_seconds)  # fmt: skip
    print(f"best epoch {report.best_epoch} val loss {report.best_val_loss:.6g}; model saved to {model_path}")
    return EXIT_OK


def cmd_search(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = _resolved_train_config(args)
    space = train.SearchSpace(trials=args.trials, epochs_per_trial=args.epochs_per_trial)
    (tr, va, _), split_spec = _splits(args)
    man = RunManifest("search", dict(base.to_dict(), trials=args.trials, epochs_per_trial=args.epochs_per_trial,
                                     cutoff=split_spec.train_val_cutoff), {"seed": args.seed})  # fmt: skip
    best, trials = train.hyperparameter_search(space, tr, va, seed=args.seed, base=base, workers=args.workers)
    trials_path, best_path = out / "trials.jsonl", out / "best_config.txt"
    _jsonl(trials_path, [t.to_dict() for t in trials])
    keys = ("lr", "hidden_size", "dropout_p", "weight_decay", "batch_size", "max_epochs", "early_stop_patience")
    best_dict = best.to_dict()
    best_path.write_text("".join(f"{k} = {best_dict[k]!r}\n" for k in keys), encoding="utf-8")
    man.write(out / "manifest.json", [trials_path, best_path])
    print(f"best of {len(trials)} trials written to {best_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (tr, va, te), split_spec = _splits(args)
    rows = te if args.split == "test" else va
    if not rows:
        raise dataset.DataError(f"{args.split} split is empty")
    if args.model == "bs":
        preds = np.array([r.bs_price for r in rows])
    else:
        preds = net.predict(net.load_artifact(args.model), dataset.feature_matrix(rows))
    man = RunManifest("evaluate", {"split": args.split, "cutoff": split_spec.train_val_cutoff, "model": args.model}, {"seed": args.seed})
    rep = evaluate.evaluate(rows, preds, k=args.top_k)
    paths = evaluate.write_report(rep, out)
    man.write(out / "manifest.json", paths)
    o = rep.overall
    print(f"{args.split}: n={o.count} MAE model={o.model:.6f} bs={o.bs:.6f}")
    return EXIT_OK


def cmd_price(args) -> int:
    print(f"{bs_call_price(args.spot, args.strike, args.rate, args.sigma, args.tte):.6f}")
    return EXIT_OK


# --------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="canonical dataset CSV")
    p.add_argument("--cutoff", type=_date, default=dataset.SplitSpec().train_val_cutoff, help="last train/val trade date")
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="b3pricing", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download and extract daily B3 option archives")
    p.add_argument("--from", dest="start", type=_date, required=True)
    p.add_argument("--to", dest="end", type=_date, required=True)
    p.add_argument("--concurrency", type=int, default=ingest.DEFAULT_CONCURRENCY)
    p.add_argument("--out", required=True, help="output directory (raw/ and txt/ are created)")
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--backoff", type=float, default=0.5, help="seconds before the first retry")
    p.add_argument("--skip-weekends", action="store_true")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("build-dataset", help="join option files with stock and SELIC series")
    p.add_argument("--options-dir", required=True, help="directory of yyyy-mm-dd_*.txt files")
    p.add_argument("--stock", required=True, help="CSV of date,close")
    p.add_argument("--selic", required=True, help="CSV of date,annual_rate_percent")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("synth", help="generate a Black-Scholes synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.05)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("search", help="random hyperparameter search")
    _add_train_flags(p)
    p.add_argument("--trials", type=int, default=train.SearchSpace().trials)
    p.add_argument("--epochs-per-trial", type=int, default=train.SearchSpace().epochs_per_trial)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train the residual network with early stopping")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAE breakdowns on the val or test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model artifact path, or 'bs' to score Black-Scholes itself")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--cutoff", type=_date, default=dataset.SplitSpec().train_val_cutoff)
    p.add_argument("--seed", type=int, default=0, help="split seed used at training time")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("price", help="Black-Scholes call price")
    p.add_argument("--spot", type=float, required=True)
    p.add_argument("--strike", type=float, required=True)
    p.add_argument("--rate", type=float, required=True, help="annual rate as a fraction")
    p.add_argument("--sigma", type=float, required=True, help="annual volatility as a fraction")
    p.add_argument("--tte", type=float, required=True, help="years to expiry")
    p.set_defaults(func=cmd_price)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    print(f'b3pricing: error code={code} type={type(exc).__name__} message="{msg}"', file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except train.NonFiniteLossError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except (ValueError, KeyError, ingest.ExtractionError, net.ArtifactError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
