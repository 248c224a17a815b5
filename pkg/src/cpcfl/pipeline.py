"""Trial pipeline shared by the command line and the experiment runner.

A trial draws fresh client data from the fixed task distribution, pre-trains
whatever encoders its methods need, and runs each federated method.  Method
rows are written ``algorithm(init)``: ``fedavg(none)``, ``ifca(fedavg)``,
``cpcfl(simclr)`` and so on, where ``init`` is ``none`` (random models), a
pre-training method, or ``fedavg`` (the encoder of a FedAvg run in the same
trial).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .datagen import (
    ClientDataset,
    LabeledDataset,
    UnlabeledDataset,
    generate_synthetic,
    partition_clients,
)
from .federation import (
    ClusteringFailure,
    ClusterModelPool,
    comm_cost,
    model_size,
    pretrained_pool,
    random_pool,
    run_federation,
)
from .metrics import EvaluationReport, ClusterTrace, adjusted_rand_index, evaluate_pool, trial_statistics
from .nn import Model, build_model, save_checkpoint
from .pretrain import linear_evaluation, pretrain_encoder, supervised_pretrain

log = logging.getLogger(__name__)

METHOD_RE = re.compile(r"^(fedavg|ifca|cpcfl)\((none|simclr|byol|simsiam|supervised|fedavg)\)$")
PRETRAIN_METHODS = ("simclr", "byol", "simsiam", "supervised")


def parse_method(name: str) -> tuple[str, str]:
    m = METHOD_RE.match(name.replace(" ", ""))
    if not m:
        raise ValueError(f"method {name!r} must look like algorithm(init), e.g. cpcfl(simclr)")
    return m.group(1), m.group(2)


def method_slug(name: str) -> str:
    alg, init = parse_method(name)
    return f"{alg}-{init}"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- data


@dataclass
class TrialData:
    labeled: LabeledDataset
    unlabeled: UnlabeledDataset
    clients: list[ClientDataset]
    proxy_train: LabeledDataset
    proxy_test: LabeledDataset


def proxy_split(labeled: LabeledDataset, clients, per_class: int):
    """Alternate train/test split of up to ``per_class`` samples per class that no client holds."""
    used = np.zeros(len(labeled), dtype=bool)
    for c in clients:
        used[c.train_index] = True
        used[c.test_index] = True
    train_idx, test_idx = [], []
    for k in range(labeled.num_classes):
        free = np.flatnonzero((labeled.labels == k) & ~used)[: 2 * per_class]
        train_idx += free[0::2].tolist()
        test_idx += free[1::2].tolist()
    if not train_idx or not test_idx:
        raise ValueError("no labeled samples left over for the linear-evaluation proxy")
    return labeled.subset(np.array(train_idx)), labeled.subset(np.array(test_idx))


def make_trial_data(cfg: RunConfig, seed: int) -> TrialData:
    """Fresh samples for ``seed``; the class geometry stays pinned to ``cfg.seed``."""
    d = cfg.data
    labeled, unlabeled = generate_synthetic(
        d.num_classes, d.dim, d.per_class, d.separation, seed=seed,
        unlabeled_count=d.unlabeled, noise=d.noise, shift=d.shift, geometry_seed=cfg.seed,
        modes_per_class=d.modes_per_class, latent_dim=d.latent_dim,
    )
    return data_from_pool(cfg, labeled, unlabeled, seed)


def data_from_pool(cfg: RunConfig, labeled, unlabeled, seed: int) -> TrialData:
    clients = partition_clients(labeled, cfg.partition_spec(seed))
    ptrain, ptest = proxy_split(labeled, clients, cfg.data.proxy_per_class)
    return TrialData(labeled, unlabeled, clients, ptrain, ptest)


# ---------------------------------------------------------------- pre-training


@dataclass
class PretrainResult:
    encoder: Model
    losses: list[float]
    score: float
    sweep: list[dict] = field(default_factory=list)
    selected: int = 0


def pretrain_stage(cfg: RunConfig, data: TrialData, seed: int, method: str | None = None) -> PretrainResult:
    """Train every configured variant and keep the one with the best linear probe."""
    method = method or cfg.pretrain.method
    base = build_model(cfg.arch(seed))
    variants = cfg.pretrain.variants or [{}]
    results = []
    for i, overrides in enumerate(variants):
        if method == "supervised":
            sec = cfg.pretrain
            epochs, lr = overrides.get("epochs", sec.epochs), overrides.get("lr", sec.lr)
            encoder, losses = supervised_pretrain(base, data.proxy_train, epochs, lr, seed=seed), []
        else:
            model, losses = pretrain_encoder(base, data.unlabeled, cfg.pretrain_config(method, seed, overrides))
            encoder = model.subset(["encoder"])
        score = linear_evaluation(
            encoder, data.proxy_train, data.proxy_test,
            epochs=overrides.get("probe_epochs", cfg.pretrain.probe_epochs),
            lr=overrides.get("probe_lr", cfg.pretrain.probe_lr), seed=seed,
        )
        log.info("pretrain %s variant %d: linear eval %.4f", method, i, score)
        results.append((encoder, losses, score, overrides))
    best = max(range(len(results)), key=lambda i: (results[i][2], -i))
    sweep = [
        {"variant": i, "method": method, "overrides": json.dumps(ov, sort_keys=True),
         "final_loss": (ls[-1] if ls else None), "linear_eval": sc, "selected": i == best}
        for i, (_, ls, sc, ov) in enumerate(results)
    ]
    enc, losses, score, _ = results[best]
    return PretrainResult(enc, losses, score, sweep, best)


# ---------------------------------------------------------------- federation


@dataclass
class MethodResult:
    method: str
    pool: ClusterModelPool
    history: list[dict]
    report: EvaluationReport
    failure: bool
    summary: dict


def _final_report(history, pool, clients) -> EvaluationReport:
    last = history[-1]
    if last.get("metrics") is not None and not last.get("restarted"):
        return EvaluationReport(**last["metrics"])
    return evaluate_pool(pool, clients, round_index=last["round"])


def run_method(cfg: RunConfig, data: TrialData, seed: int, method: str, encoders: dict | None = None, *, on_round=None) -> MethodResult:
    """Run one ``algorithm(init)`` row.  ``encoders`` caches pre-trained
    encoders (and the FedAvg encoder) across rows of the same trial."""
    encoders = {} if encoders is None else encoders
    alg, init = parse_method(method)
    fcfg = cfg.federation_config(alg, seed)
    arch = cfg.arch(seed)
    if init == "none":
        pool = random_pool(arch, fcfg.num_clusters, seed)
    else:
        if init not in encoders:
            if init == "fedavg":
                donor = run_method(cfg, data, seed, "fedavg(none)", encoders)
                encoders["fedavg"] = donor.pool.models[0].subset(["encoder"])
            else:
                encoders[init] = pretrain_stage(cfg, data, seed, init)
        enc = encoders[init]
        enc = enc.encoder if isinstance(enc, PretrainResult) else enc
        pool = pretrained_pool(enc, fcfg.num_clusters, seed, arch)

    failure = False
    try:
        pool, history = run_federation(fcfg, data.clients, pool, on_round=on_round)
    except ClusteringFailure as exc:
        log.warning("%s: %s", method, exc)
        pool, history, failure = exc.pool, exc.history, True
    report = _final_report(history, pool, data.clients)
    if alg == "fedavg" and init == "none":
        encoders.setdefault("fedavg", pool.models[0].subset(["encoder"]))

    truth = [c.true_cluster for c in data.clients]
    trace = ClusterTrace.from_history(history, truth)
    size = model_size(pool.models[0])
    rounds = len(history)
    summary = {
        "method": method,
        "algorithm": alg,
        "init": init,
        "seed": seed,
        "rounds": rounds,
        "num_clusters": fcfg.num_clusters,
        "failure": failure,
        "restarts": history[-1]["restarts"],
        "ari_final": _ari(trace.assignments[-1], truth),
        "scores": {k: getattr(report, k) for k in EvaluationReport.SCORE_FIELDS},
        "client_accuracy": report.client_accuracy,
        "selections": report.selections,
        "comm_cost": {
            "units": comm_cost(rounds, fcfg.num_clusters, 1, alg),
            "model_size": size,
            "parameters": comm_cost(rounds, fcfg.num_clusters, size, alg),
        },
    }
    return MethodResult(method, pool, history, report, failure, summary)


def _ari(row, truth):
    row, truth = np.asarray(row), np.asarray(truth)
    seen = row >= 0
    return adjusted_rand_index(row[seen], truth[seen]) if seen.any() else float("nan")


# ---------------------------------------------------------------- files


def metrics_csv(history, truth) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(EvaluationReport.SCORE_FIELDS)
    w.writerow(["round", *cols, "ari", "mean_train_loss", "comm_cost"])
    for rec in history:
        m = rec.get("metrics")
        if m is None:
            continue
        w.writerow([rec["round"], *[repr(m[c]) for c in cols], repr(_ari(rec["assignments"], truth)),
                    repr(rec["mean_train_loss"]), repr(rec["comm_cost"])])
    return buf.getvalue()


def history_jsonl(history) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)


def write_method(out: Path, result: MethodResult, clients, *, checkpoints=True):
    out.mkdir(parents=True, exist_ok=True)
    truth = [c.true_cluster for c in clients]
    (out / "history.jsonl").write_text(history_jsonl(result.history))
    (out / "metrics.csv").write_text(metrics_csv(result.history, truth))
    (out / "cluster_trace.csv").write_text(ClusterTrace.from_history(result.history, truth).to_csv())
    (out / "comm_cost.json").write_text(dumps(result.summary["comm_cost"]))
    (out / "summary.json").write_text(dumps(result.summary))
    (out / "report.json").write_text(dumps(result.report.to_dict()))
    if checkpoints:
        for k, m in enumerate(result.pool.models):
            save_checkpoint(m, out / f"model_{k}.ckpt")


def losses_csv(losses) -> str:
    return "epoch,mean_loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["variant", "method", "overrides", "final_loss", "linear_eval", "selected"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_pretrain(out: Path, result: PretrainResult):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.encoder, out / "encoder.ckpt")
    (out / "losses.csv").write_text(losses_csv(result.losses))
    (out / "sweep.csv").write_text(sweep_csv(result.sweep))
    (out / "linear_eval.json").write_text(dumps({"linear_eval": result.score, "selected_variant": result.selected}))


# ---------------------------------------------------------------- experiments


def sweep_points(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Cartesian grid over ``experiment.sweep``; one unlabeled point when empty."""
    points = [("", cfg)]
    for key in sorted(cfg.experiment.sweep):
        points = [
            (f"{label} {key}={v}".strip(), c.with_override(key, v))
            for label, c in points
            for v in cfg.experiment.sweep[key]
        ]
    return points


def run_trial(cfg: RunConfig, trial: int, out: Path | None = None) -> list[dict]:
    """All sweep points and methods for one trial; returns one row per (point, method)."""
    seed = cfg.seed + trial
    rows = []
    for label, pcfg in sweep_points(cfg):
        data = make_trial_data(pcfg, seed)
        encoders: dict = {}
        base = None if out is None else out / f"trial_{trial:02d}" / _slug(label)
        for method in pcfg.experiment.methods:
            result = run_method(pcfg, data, seed, method, encoders)
            if base is not None:
                write_method(base / method_slug(method), result, data.clients, checkpoints=False)
            rows.append({"setting": label, "method": method, "trial": trial, "seed": seed,
                         "failure": result.failure, "ari_final": result.summary["ari_final"],
                         **result.summary["scores"]})
        if base is not None:
            for name, enc in encoders.items():
                if isinstance(enc, PretrainResult):
                    write_pretrain(base / f"pretrain-{name}", enc)
    return rows


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", label) or "base"


def _trial_job(args):
    cfg_dict, trial, out = args
    from .config import config_from_dict

    return run_trial(config_from_dict(cfg_dict), trial, None if out is None else Path(out))


def run_experiment(cfg: RunConfig, out: Path | None = None, *, jobs: int | None = None) -> list[dict]:
    """Trials ``0 .. trials-1`` with seeds ``cfg.seed + trial``.  Parallel runs
    produce exactly the serial rows since trials share no state."""
    jobs = jobs or cfg.experiment.jobs
    args = [(cfg.to_dict(), t, None if out is None else str(out)) for t in range(cfg.experiment.trials)]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_trial = list(ex.map(_trial_job, args))
    else:
        per_trial = [_trial_job(a) for a in args]
    rows = [r for trial_rows in per_trial for r in trial_rows]
    if out is not None:
        write_experiment(out, cfg, rows)
    return rows


RESULT_FIELDS = ["setting", "method", "trial", "seed", "failure", "ari_final", *EvaluationReport.SCORE_FIELDS]


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_results(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        row = dict(r)
        row["trial"], row["seed"] = int(row["trial"]), int(row["seed"])
        row["failure"] = row["failure"] == "True"
        for k in ["ari_final", *EvaluationReport.SCORE_FIELDS]:
            row[k] = float(row[k])
        rows.append(row)
    return rows


def summarize(rows, metric: str = "accuracy") -> list[dict]:
    """Per (setting, method): trial scores and population mean ± SD (SD None for one trial)."""
    keys = []
    for r in rows:
        if (r["setting"], r["method"]) not in keys:
            keys.append((r["setting"], r["method"]))
    out = []
    for setting, method in keys:
        scores = [r[metric] for r in sorted(rows, key=lambda r: r["trial"]) if (r["setting"], r["method"]) == (setting, method)]
        if len(scores) > 1:
            mean, sd = trial_statistics(scores)
        else:
            mean, sd = scores[0], None
        out.append({"setting": setting, "method": method, "trials": scores, "mean": mean, "sd": sd})
    return out


def format_table(summary, metric: str = "accuracy") -> str:
    """Fixed-width comparison table in percent, one row per method."""
    n = max(len(s["trials"]) for s in summary)
    head = ["setting", "method", *[f"trial {i + 1}" for i in range(n)], f"{metric} mean ± SD"]
    body = []
    for s in summary:
        cells = [f"{100 * v:.2f}" for v in s["trials"]] + [""] * (n - len(s["trials"]))
        sd = "n/a" if s["sd"] is None else f"{100 * s['sd']:.2f}"
        body.append([s["setting"] or "-", s["method"], *cells, f"{100 * s['mean']:.2f} ± {sd}"])
    widths = [max(len(str(r[i])) for r in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_experiment(out: Path, cfg: RunConfig, rows):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    (out / "results.csv").write_text(results_csv(rows))
    summary = summarize(rows)
    (out / "summary.json").write_text(dumps({"name": cfg.experiment.name, "metric": "accuracy", "rows": summary}))
    (out / "table.txt").write_text(format_table(summary))
