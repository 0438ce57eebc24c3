"""Command line entry point: preprocess, train, evaluate and sweep.

Settings come from built-in defaults, then an optional flat YAML file given
with ``--config``, then command line flags, later sources winning.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .evaluation import DEFAULT_BUCKETS, DEFAULT_CUTOFFS, MetricsReport, aggregate_seeds, evaluate
from .model import ModelConfig, load_checkpoint, parse_intent_mode, read_checkpoint
from .sessions import (
    DataError,
    chronological_split,
    corpus_fingerprint,
    load_corpus,
    load_events,
    preprocess,
    save_corpus,
)
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("miasrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
TRAIN_KEYS = ["lr", "batch_size", "max_epochs", "patience", "dtype"]

DEFAULTS: dict = {
    # data
    "raw_log": None,
    "corpus_dir": "corpus",
    "checkpoint_dir": "checkpoints",
    "report_dir": "reports",
    "session_col": 0,
    "item_col": 1,
    "time_col": 2,
    "delimiter": None,
    "header": False,
    "min_item_support": 5,
    "min_session_len": 2,
    "fixed_point": False,
    "split_ratios": [8, 1, 1],
    "eval_split": "test",
    # model
    **ModelConfig().to_dict(),
    # training
    "seeds": [0, 1, 2],
    "lr": 1e-3,
    "batch_size": 1024,
    "max_epochs": 200,
    "patience": 3,
    "dtype": "float32",
    # evaluation
    "cutoffs": list(DEFAULT_CUTOFFS),
    "buckets": list(DEFAULT_BUCKETS),
    # sweep grids
    "sweep_beta": [round(0.1 * i, 1) for i in range(11)],
    "sweep_tau": [0.01, 0.05, 0.07, 0.1, 0.5, 1.0],
    "sweep_dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _intent_mode(text: str) -> str:
    try:
        parse_intent_mode(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat YAML file of settings")
    common.add_argument("--seed", type=_int_list, dest="seeds", help="seed or comma-separated seed list")
    common.add_argument("--beta", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--dropout", type=float)
    common.add_argument("--no-position-embedding", dest="use_position_embedding", action="store_const", const=False)
    common.add_argument("--no-frequency-embedding", dest="use_frequency_embedding", action="store_const", const=False)
    common.add_argument("--intent-mode", type=_intent_mode, metavar="{entmax|mean|last:k}")
    common.add_argument("--cutoffs", type=_int_list, help="e.g. 5,10,20")
    common.add_argument("--buckets", type=_int_list, help="lower bounds of the length groups, e.g. 1,2,3,5,7,10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="miasrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="filter a raw log and write train/val/test corpora")
    p.add_argument("--input", dest="raw_log", type=Path)
    p.add_argument("--out", dest="corpus_dir", type=Path)
    p.add_argument("--header", action="store_const", const=True)
    p.add_argument("--delimiter")

    p = sub.add_parser("train", parents=[common], help="train one model per seed")
    p.add_argument("--corpus", dest="corpus_dir", type=Path)
    p.add_argument("--out", dest="checkpoint_dir", type=Path)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from each seed's last saved state")
    p.add_argument("--stop-after", type=int, metavar="N", help="run at most N epochs in this invocation")

    p = sub.add_parser("evaluate", parents=[common], help="score each seed's best checkpoint")
    p.add_argument("--corpus", dest="corpus_dir", type=Path)
    p.add_argument("--checkpoints", dest="checkpoint_dir", type=Path)
    p.add_argument("--out", dest="report_dir", type=Path)
    p.add_argument("--split", dest="eval_split", choices=["train", "val", "test"])

    p = sub.add_parser("sweep", parents=[common], help="grid search over beta, tau and dropout on validation MRR@20")
    p.add_argument("--corpus", dest="corpus_dir", type=Path)
    p.add_argument("--out", dest="report_dir", type=Path)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--grid-beta", dest="sweep_beta", type=_float_list)
    p.add_argument("--grid-tau", dest="sweep_tau", type=_float_list)
    p.add_argument("--grid-dropout", dest="sweep_dropout", type=_float_list)
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping of settings")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown settings {', '.join(unknown)}")
    return doc


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    for key in ("corpus_dir", "checkpoint_dir", "report_dir", "raw_log"):
        if cfg[key] is not None:
            cfg[key] = str(cfg[key])
    if isinstance(cfg["seeds"], int):
        cfg["seeds"] = [cfg["seeds"]]
    if not cfg["seeds"]:
        raise ConfigError("seed list is empty")
    try:
        model_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["cutoffs"] or min(cfg["cutoffs"]) < 1:
        raise ConfigError("cutoffs must be positive integers")
    if not cfg["buckets"] or cfg["buckets"][0] != 1 or sorted(set(cfg["buckets"])) != list(cfg["buckets"]):
        raise ConfigError("buckets must be increasing lower bounds starting at 1")
    return cfg


def model_config(cfg: dict, **overrides) -> ModelConfig:
    values = {k: cfg[k] for k in MODEL_KEYS}
    values.update(overrides)
    return ModelConfig(**values)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})


def _corpus_path(cfg: dict, split: str) -> Path:
    return Path(cfg["corpus_dir"]) / f"{split}.json"


def _load_split(cfg: dict, split: str):
    path = _corpus_path(cfg, split)
    if not path.exists():
        raise DataError(f"missing corpus file {path}; run 'miasrec preprocess' first")
    return load_corpus(path)


def _load_training_splits(cfg: dict):
    train_corpus, val_corpus = _load_split(cfg, "train"), _load_split(cfg, "val")
    for name, corpus in (("train", train_corpus), ("val", val_corpus)):
        if len(corpus) == 0:
            raise DataError(f"{_corpus_path(cfg, name)} holds no sessions")
    return train_corpus, val_corpus


def _seed_dir(cfg: dict, seed: int) -> Path:
    return Path(cfg["checkpoint_dir"]) / f"seed{seed}"


def _stats_table(rows: list[tuple[str, dict]]) -> str:
    lines = [f"{'split':<8}{'#interactions':>15}{'#sessions':>11}{'#items':>9}{'AvgLen':>9}"]
    for name, s in rows:
        lines.append(f"{name:<8}{s['interactions']:>15}{s['sessions']:>11}{s['items']:>9}{s['avg_len']:>9.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: dict) -> int:
    if not cfg["raw_log"]:
        raise ConfigError("no raw log given (use --input or raw_log in the config)")
    log_ = load_events(
        cfg["raw_log"],
        session_col=cfg["session_col"],
        item_col=cfg["item_col"],
        time_col=cfg["time_col"],
        delimiter=cfg["delimiter"],
        header=cfg["header"],
    )
    corpus = preprocess(log_, cfg["min_item_support"], cfg["min_session_len"], cfg["fixed_point"])
    parts = chronological_split(corpus, cfg["split_ratios"], min_session_len=cfg["min_session_len"])
    out = Path(cfg["corpus_dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: cfg[k] for k in ("raw_log", "session_col", "item_col", "time_col", "delimiter", "header",
                                "min_item_support", "min_session_len", "fixed_point", "split_ratios")}
    for name, part in zip(("train", "val", "test"), parts):
        save_corpus(part, out / f"{name}.json", echo)
    print(_stats_table([("all", corpus.statistics())] + list(zip(("train", "val", "test"), (p.statistics() for p in parts)))))
    return EXIT_OK


def cmd_train(cfg: dict, resume: bool = False, stop_after: int | None = None) -> int:
    train_corpus, val_corpus = _load_training_splits(cfg)
    fingerprint = corpus_fingerprint(train_corpus)
    mc, tc = model_config(cfg), train_config(cfg)
    interrupted = False
    for seed in cfg["seeds"]:
        run_dir = _seed_dir(cfg, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        state, history = run_dir / "last.pt", run_dir / "history.jsonl"
        if not resume:
            state.unlink(missing_ok=True)
            history.unlink(missing_ok=True)
        result = train(
            train_corpus,
            val_corpus,
            mc,
            seed=seed,
            train_config=tc,
            state_path=state,
            best_path=run_dir / "best.pt",
            history_path=history,
            resume=resume,
            epoch_budget=stop_after,
            extra={"run_config": cfg, "corpus_fingerprint": fingerprint},
        )
        last = result.history[-1] if result.history else None
        status = "done" if result.completed else "interrupted"
        print(
            f"seed {seed}: {status} after {last.epoch if last else 0} epochs, best epoch {result.best_epoch}"
            + (f", val MRR@20 {max(r.val_mrr20 for r in result.history):.4f}" if result.history else "")
        )
        interrupted |= not result.completed
    if interrupted:
        print("some runs were interrupted; rerun with --resume to continue")
    return EXIT_OK


def _summary(report: MetricsReport) -> str:
    parts = [f"R@{k} {report.recall(k):.4f}  M@{k} {report.mrr(k):.4f}" for k in report.cutoffs]
    return "  ".join(parts)


def cmd_evaluate(cfg: dict, beta_override: float | None = None) -> int:
    split = cfg["eval_split"]
    corpus = _load_split(cfg, split)
    out = Path(cfg["report_dir"])
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in cfg["seeds"]:
        path = _seed_dir(cfg, seed) / "best.pt"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run 'miasrec train' first")
        n_ckpt = read_checkpoint(path)["n_items"]
        if n_ckpt != corpus.n_items:
            raise DataError(
                f"{path} was trained on {n_ckpt} items but {_corpus_path(cfg, split)} has {corpus.n_items} items"
            )
        network, doc = load_checkpoint(path)
        report = evaluate(
            network, corpus, cfg["cutoffs"], cfg["buckets"], beta=beta_override, max_len=network.config.max_len
        )
        report.seeds = [seed]
        report.meta = {
            "split": split,
            "checkpoint": str(path),
            "corpus_fingerprint": corpus_fingerprint(corpus),
            "model_config": doc["config"],
            "beta": network.config.beta if beta_override is None else beta_override,
            "run_config": doc["extra"].get("run_config", {}),
        }
        (out / f"seed{seed}.json").write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"seed {seed}: {_summary(report)}")
        reports.append(report)
    agg = aggregate_seeds(reports, seeds=cfg["seeds"])
    agg.meta = {k: v for k, v in reports[0].meta.items() if k != "checkpoint"}
    (out / "metrics.json").write_text(agg.to_json() + "\n", encoding="utf-8")
    print(f"mean over {len(reports)} seed(s): {_summary(agg)}")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    betas, taus, drops = cfg["sweep_beta"], cfg["sweep_tau"], cfg["sweep_dropout"]
    if not (betas and taus and drops):
        raise ConfigError("sweep grid is empty")
    train_corpus, val_corpus = _load_training_splits(cfg)
    seed = cfg["seeds"][0]
    rows = []
    for tau in taus:
        for drop in drops:
            try:
                mc = model_config(cfg, tau=tau, dropout=drop)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            result = train(train_corpus, val_corpus, mc, seed=seed, train_config=train_config(cfg))
            # beta only mixes the decoded distributions, so one network serves the whole beta axis
            for beta in betas:
                report = evaluate(result.network, val_corpus, cutoffs=(20,), buckets=(1,), beta=beta, max_len=mc.max_len)
                rows.append({"beta": beta, "tau": tau, "dropout": drop, "val_mrr20": report.mrr(20), "val_r20": report.recall(20)})
    best = max(rows, key=lambda r: r["val_mrr20"])  # first row wins ties
    out = Path(cfg["report_dir"])
    out.mkdir(parents=True, exist_ok=True)
    header = ["beta", "tau", "dropout", "val_mrr20", "val_r20"]
    table = ["\t".join(header)] + ["\t".join(f"{r[h]:g}" if h in ("beta", "tau", "dropout") else repr(r[h]) for h in header) for r in rows]
    (out / "sweep.tsv").write_text("\n".join(table) + "\n", encoding="utf-8")
    (out / "sweep_best.json").write_text(
        json.dumps({"version": 1, "best": best, "seed": seed, "corpus_fingerprint": corpus_fingerprint(train_corpus), "run_config": cfg}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    print("\n".join(table))
    print(f"best: beta={best['beta']:g} tau={best['tau']:g} dropout={best['dropout']:g} val MRR@20 {best['val_mrr20']:.4f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = resolve(args)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume, stop_after=args.stop_after)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, beta_override=args.beta)
        if args.command == "sweep":
            return cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"miasrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"miasrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"miasrec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
