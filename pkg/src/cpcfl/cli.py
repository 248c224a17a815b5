"""Command-line front end: generate | pretrain | federate | experiment | report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Outputs land in ``--out``; without it, in ``$CPCFL_OUTPUT_ROOT/<command>``
(default root ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, dump_config, load_config
from .datagen import format_class_table, load_dataset, partition_manifest, save_dataset
from .federation import ClusteringFailure
from .nn import DimensionError, load_checkpoint, save_checkpoint

ENV_OUTPUT_ROOT = "CPCFL_OUTPUT_ROOT"

log = logging.getLogger("cpcfl")


class UsageError(Exception):
    pass


def _output_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs")) / command


def _load(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "trials", None) is not None:
        cfg.experiment.trials = args.trials
    return cfg.validate()


def _say(args, text: str):
    if not args.quiet:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _write_common(out: Path, cfg: RunConfig, seeds: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    (out / "seeds.json").write_text(pipeline.dumps(seeds))


def _trial_data(args, cfg: RunConfig) -> pipeline.TrialData:
    """Client data from a ``generate`` output directory, or synthesized in memory."""
    if getattr(args, "data", None):
        d = Path(args.data)
        if not (d / "labeled.bin").is_file() or not (d / "unlabeled.bin").is_file():
            raise UsageError(f"{d} is not a generate output directory")
        labeled, unlabeled = load_dataset(d / "labeled.bin"), load_dataset(d / "unlabeled.bin")
        if labeled.feature_dim != cfg.data.dim or labeled.num_classes != cfg.data.num_classes:
            raise ConfigError(f"{d}: data shape does not match config data.dim/num_classes")
        return pipeline.data_from_pool(cfg, labeled, unlabeled, cfg.seed)
    return pipeline.make_trial_data(cfg, cfg.seed)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = _output_dir(args, "generate")
    data = pipeline.make_trial_data(cfg, cfg.seed)
    _write_common(out, cfg, {"seed": cfg.seed, "geometry_seed": cfg.seed})
    save_dataset(data.labeled, out / "labeled.bin")
    save_dataset(data.unlabeled, out / "unlabeled.bin")
    (out / "partition.csv").write_text(partition_manifest(data.clients))
    clients_dir = out / "clients"
    clients_dir.mkdir(exist_ok=True)
    for c in data.clients:
        save_dataset(c.train, clients_dir / f"client_{c.client_id:03d}_train.bin")
        save_dataset(c.test, clients_dir / f"client_{c.client_id:03d}_test.bin")
    table = format_class_table(data.clients)
    (out / "class_table.txt").write_text(table + "\n")
    _say(args, table)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    out = _output_dir(args, "pretrain")
    data = _trial_data(args, cfg)
    result = pipeline.pretrain_stage(cfg, data, cfg.seed)
    _write_common(out, cfg, {"seed": cfg.seed})
    pipeline.write_pretrain(out, result)
    _say(args, pipeline.sweep_csv(result.sweep))
    return 0


def cmd_federate(args) -> int:
    cfg = _load(args)
    try:
        alg, init = pipeline.parse_method(args.method)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _output_dir(args, "federate")
    data = _trial_data(args, cfg)
    encoders = {}
    if args.encoder:
        if init in ("none", "fedavg"):
            raise UsageError(f"--encoder given but method {args.method} does not use a pre-trained encoder")
        enc = load_checkpoint(args.encoder)
        if not enc.has("encoder"):
            raise ConfigError(f"{args.encoder}: checkpoint has no encoder")
        expected = cfg.arch(cfg.seed)
        if enc.arch.input_dim != expected.input_dim or enc.arch.rep_dim != expected.rep_dim:
            raise ConfigError(
                f"{args.encoder}: encoder {enc.arch.input_dim}->{enc.arch.rep_dim} does not match "
                f"config {expected.input_dim}->{expected.rep_dim}"
            )
        encoders[init] = enc.subset(["encoder"])

    every = cfg.federation.checkpoint_every
    ckpt_dir = out / "checkpoints"

    def on_round(state, record):
        if every and (record["round"] + 1) % every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            for k, m in enumerate(state.pool.models):
                save_checkpoint(m, ckpt_dir / f"round_{record['round']:04d}_model_{k}.ckpt")

    result = pipeline.run_method(cfg, data, cfg.seed, args.method, encoders, on_round=on_round)
    _write_common(out, cfg, {"seed": cfg.seed, "method": args.method})
    pipeline.write_method(out, result, data.clients)
    s = result.summary
    _say(args, f"{args.method}: accuracy {s['scores']['accuracy']:.4f}, ARI {s['ari_final']:.3f}, "
               f"restarts {s['restarts']}, comm cost {s['comm_cost']['units']} units")
    if result.failure:
        print(f"clustering failure: restarts exhausted ({s['restarts']}); partial results in {out}", file=sys.stderr)
        return 1
    return 0


def cmd_experiment(args) -> int:
    cfg = _load(args)
    out = _output_dir(args, "experiment")
    jobs = args.jobs if args.jobs is not None else cfg.experiment.jobs
    rows = pipeline.run_experiment(cfg, out, jobs=jobs)
    _say(args, (out / "table.txt").read_text() if rows else "no rows")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    if (run / "results.csv").is_file():
        rows = pipeline.read_results((run / "results.csv").read_text())
        text = pipeline.format_table(pipeline.summarize(rows, args.metric), args.metric)
    elif (run / "summary.json").is_file():
        s = json.loads((run / "summary.json").read_text())
        lines = [f"method      {s['method']}", f"rounds      {s['rounds']}", f"clusters    {s['num_clusters']}",
                 f"restarts    {s['restarts']}", f"failure     {s['failure']}", f"ari_final   {s['ari_final']:.4f}",
                 f"comm cost   {s['comm_cost']['units']} units ({s['comm_cost']['parameters']} parameters)"]
        lines += [f"{k:<20}{v:.4f}" for k, v in s["scores"].items()]
        text = "\n".join(lines) + "\n"
    elif (run / "sweep.csv").is_file():
        text = (run / "sweep.csv").read_text()
    else:
        raise UsageError(f"{run}: no results.csv, summary.json or sweep.csv to report")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply to anything omitted)")
    common.add_argument("--seed", type=int, help="override the configured base seed")
    common.add_argument("--out", help=f"output directory (default: ${ENV_OUTPUT_ROOT}/<command>)")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")

    p = argparse.ArgumentParser(prog="cpcfl", description="Contrastive pre-training based clustered federated learning")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize and partition client data")
    g.set_defaults(func=cmd_generate)

    pr = sub.add_parser("pretrain", parents=[common], help="pre-train encoders and select by linear evaluation")
    pr.add_argument("--data", help="directory written by 'generate'")
    pr.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("federate", parents=[common], help="run one federated method")
    f.add_argument("--method", default="cpcfl(simclr)", help="algorithm(init), e.g. ifca(none)")
    f.add_argument("--data", help="directory written by 'generate'")
    f.add_argument("--encoder", help="encoder checkpoint written by 'pretrain'")
    f.set_defaults(func=cmd_federate)

    e = sub.add_parser("experiment", parents=[common], help="multi-trial method comparison")
    e.add_argument("--trials", type=int, help="override experiment.trials")
    e.add_argument("--jobs", type=int, help="trials to run in parallel")
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="print the table or summary stored in a run directory")
    r.add_argument("run", help="experiment, federate or pretrain output directory")
    r.add_argument("--metric", default="accuracy")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ClusteringFailure, DimensionError, FloatingPointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
