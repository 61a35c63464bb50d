"""Command-line surface: data generation, training, evaluation, ablations.

Subcommands: gen-data, train, eval, ablate, report.
Exit codes: 0 success, 2 config error, 3 missing input, 4 numeric failure,
1 anything else. Outputs are byte-identical across reruns with the same
inputs; timestamps only ever land in the `run_meta.json` sidecar.
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
from dataclasses import dataclass
from pathlib import Path

from . import dataio, retrieval, trainer
from .errors import (
    CompatibilityError,
    ConfigError,
    NumericError,
    SchemaError,
    XmzsrError,
)

log = logging.getLogger("xmzsr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

ABLATION_ROWS: list[tuple[str, frozenset]] = [
    ("W/o L_comp", frozenset({"comp"})),
    ("W/o Wasserstein Distance", frozenset({"wass"})),
    ("W/o L_dom", frozenset({"dom"})),
    ("W/o L_cls", frozenset({"cls"})),
    ("W/o Attention", frozenset({"attention"})),
    ("W/o Graph Transformer", frozenset({"gt"})),
    ("Only GCN and L_comp", frozenset({"gcn_only"})),
    ("Full Model", frozenset()),
]


@dataclass
class RunConfig:
    data_seed: int
    synthetic: dataio.SyntheticConfig
    split_n_unseen: int
    split_seed: int
    train: trainer.TrainConfig
    feature_path: str | None = None
    embedding_path: str | None = None


_TOP_KEYS = {"data_seed", "synthetic", "split", "train", "data"}


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    syn_raw = raw.get("synthetic", {})
    _check_keys(syn_raw, dataio.SyntheticConfig.__dataclass_fields__, "config.synthetic")
    synthetic = dataio.SyntheticConfig(**syn_raw)
    split_raw = raw.get("split", {})
    _check_keys(split_raw, {"n_unseen", "seed"}, "config.split")
    train_raw = raw.get("train", {})
    _check_keys(
        train_raw,
        set(trainer.TrainConfig.__dataclass_fields__) | {"weights"},
        "config.train",
    )
    if "weights" in train_raw:
        _check_keys(
            train_raw["weights"],
            {"lambda1", "lambda2", "lambda3", "lambda4", "t"},
            "config.train.weights",
        )
    data_raw = raw.get("data", {})
    _check_keys(data_raw, {"features", "embeddings"}, "config.data")
    try:
        train_cfg = trainer.TrainConfig.from_dict(train_raw)
    except TypeError as e:
        raise ConfigError(f"config.train: {e}") from e
    return RunConfig(
        data_seed=int(raw.get("data_seed", 0)),
        synthetic=synthetic,
        split_n_unseen=int(split_raw.get("n_unseen", 4)),
        split_seed=int(split_raw.get("seed", 0)),
        train=train_cfg,
        feature_path=data_raw.get("features"),
        embedding_path=data_raw.get("embeddings"),
    )


def _apply_set(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not an object")
    node[parts[-1]] = parsed


def load_run_config(path: str | None, sets, seed: int | None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    for assignment in sets or ():
        _apply_set(raw, assignment)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    return parse_run_config(raw)


def build_dataset(cfg: RunConfig) -> dataio.Dataset:
    if cfg.feature_path or cfg.embedding_path:
        if not (cfg.feature_path and cfg.embedding_path):
            raise ConfigError("config.data needs both 'features' and 'embeddings'")
        samples = dataio.load_feature_table(cfg.feature_path)
        embeddings = dataio.load_class_embeddings(cfg.embedding_path)
        dataset = dataio.Dataset(samples=samples, embeddings=embeddings)
    else:
        dataset = dataio.generate_synthetic(cfg.synthetic, cfg.data_seed)
    dataset.split = dataio.build_split(dataset, cfg.split_n_unseen, cfg.split_seed)
    return dataset


def _write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "W", "comp", "dom", "cls", "sem", "total"])
        for i, r in enumerate(history):
            writer.writerow(
                [
                    i,
                    repr(r.wasserstein),
                    repr(r.compatibility),
                    repr(r.domain),
                    repr(r.classification),
                    repr(r.semantic),
                    repr(r.total),
                ]
            )


def _write_sidecar(out: Path, command: str) -> None:
    (out / "run_meta.json").write_text(
        json.dumps({"command": command, "finished_at": time.time()}, indent=2)
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataio.generate_synthetic(cfg.synthetic, cfg.data_seed)
    dataio.save_feature_table(out / "features.csv", dataset.samples)
    dataio.save_class_embeddings(out / "embeddings.csv", dataset.embeddings)
    _write_sidecar(out, "gen-data")
    log.info("wrote %d samples, %d classes to %s", len(dataset.samples), len(dataset.embeddings), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    ckpt = trainer.fit(dataset, cfg.train)
    trainer.save_checkpoint(ckpt, out / "checkpoint.gtz")
    _write_history_csv(out / "history.csv", ckpt.history)
    _write_sidecar(out, "train")
    log.info("trained %d epochs; checkpoint at %s", ckpt.epoch, out / "checkpoint.gtz")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    ckpt = trainer.load_checkpoint(args.checkpoint, dataset, cfg.train)
    protocols = args.protocol or [dataio.ZS, dataio.GZS]
    reports = []
    for protocol in protocols:
        report = retrieval.evaluate_checkpoint(dataset, ckpt.model, cfg.train, protocol)
        (out / f"report_{protocol}.json").write_text(report.to_json())
        reports.append(report)
        log.info("%s: map=%.4f over %d queries", protocol, report.map, report.query_count)
    retrieval.write_metric_csv(out / "metrics.csv", reports)
    _write_sidecar(out, "eval")
    return EXIT_OK


def _slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_")


def _run_ablation_row(payload) -> tuple[str, dict | None, str | None]:
    name, flags, cfg_dict, data_seed, syn_dict, n_unseen, split_seed, out_dir = payload
    try:
        syn = dataio.SyntheticConfig(**syn_dict)
        dataset = dataio.generate_synthetic(syn, data_seed)
        dataset.split = dataio.build_split(dataset, n_unseen, split_seed)
        base = trainer.TrainConfig.from_dict(cfg_dict)
        cfg = trainer.ablation_config(base, flags)
        ckpt = trainer.fit(dataset, cfg)
        row_out = Path(out_dir)
        row_out.mkdir(parents=True, exist_ok=True)
        _write_history_csv(row_out / "history.csv", ckpt.history)
        result = {}
        for protocol in (dataio.ZS, dataio.GZS):
            report = retrieval.evaluate_checkpoint(dataset, ckpt.model, cfg, protocol)
            (row_out / f"report_{protocol}.json").write_text(report.to_json())
            result[protocol] = {
                "map": report.map,
                "p_at_100": report.p_at_100,
                "p_at_200": report.p_at_200,
                "map_at_200": report.map_at_200,
            }
        return name, result, None
    except Exception as e:  # a failed row is recorded, not fatal
        return name, None, f"{type(e).__name__}: {e}"


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [
        (
            name,
            sorted(flags),
            cfg.train.to_dict(),
            cfg.data_seed,
            cfg.synthetic.__dict__,
            cfg.split_n_unseen,
            cfg.split_seed,
            str(out / "rows" / _slug(name)),
        )
        for name, flags in ABLATION_ROWS
    ]
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_ablation_row, payloads))
    else:
        results = [_run_ablation_row(p) for p in payloads]

    metrics = ("map", "p_at_100", "p_at_200", "map_at_200")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + [f"zs_{m}" for m in metrics] + [f"gzs_{m}" for m in metrics])
        for name, result, err in results:
            if result is None:
                writer.writerow([name] + ["failed"] * 8)
                log.error("ablation row %r failed: %s", name, err)
            else:
                writer.writerow(
                    [name]
                    + [repr(result[dataio.ZS][m]) for m in metrics]
                    + [repr(result[dataio.GZS][m]) for m in metrics]
                )
    with open(out / "ablation_long.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "protocol", "metric", "value"])
        for name, result, _ in results:
            if result is None:
                continue
            for protocol in (dataio.ZS, dataio.GZS):
                for m in metrics:
                    writer.writerow([name, protocol, m, repr(result[protocol][m])])
    _write_sidecar(out, "ablate")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for path in args.reports:
        reports.append(retrieval.RetrievalReport.from_json(Path(path).read_text()))
    retrieval.write_metric_csv(out / "metrics.csv", reports)
    _write_sidecar(out, "report")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmzsr",
        description="Cross-modal zero-shot sketch retrieval: synthetic data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config leaf")

    p = sub.add_parser("gen-data", help="write synthetic feature/embedding CSVs")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under ZS/GZS")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--protocol", action="append", choices=[dataio.ZS, dataio.GZS],
        help="repeatable; default runs both",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation matrix")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel row processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="collect report JSONs into a metrics CSV")
    p.add_argument("--out", required=True)
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("XMZSR_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        log.error("missing input: %s", e)
        return EXIT_MISSING
    except (ConfigError, SchemaError, json.JSONDecodeError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (CompatibilityError, XmzsrError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
