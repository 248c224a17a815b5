"""Simulated clustered federated learning: FedAvg, IFCA with restarts, and CP-CFL.

Cluster indices are 0-based throughout (``0 .. N-1``).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datagen import ClientDataset
from .metrics import evaluate_pool
from .nn import ArchConfig, Model, build_model, fresh_classifier
from .training import fit_classifier, mean_loss

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "ifca", "cpcfl")


class ClusteringFailure(RuntimeError):
    """IFCA exhausted its restarts while every client kept choosing one model."""

    def __init__(self, message, pool=None, history=None):
        super().__init__(message)
        self.pool = pool
        self.history = history


class ClientError(RuntimeError):
    pass


@dataclass
class FederationConfig:
    algorithm: str = "cpcfl"
    num_clusters: int = 3
    rounds: int = 100
    explore_rounds: int = 10
    local_epochs: int = 3
    # None: encoder trains in every local epoch
    encoder_epochs: int | None = None
    lr: float = 1e-3
    batch_size: int = 32
    participation: float = 1.0
    global_encoder: bool = False
    pretrained_encoder: str | None = None
    max_restarts: int = 3
    failure_window: int = 5
    eval_every: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.algorithm == "fedavg" and self.num_clusters != 1:
            raise ValueError("fedavg trains a single model: num_clusters must be 1")
        if self.rounds < 1 or self.local_epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("rounds, batch_size, lr must be positive and local_epochs >= 0")
        if self.algorithm == "cpcfl" and not 0 <= self.explore_rounds < self.rounds:
            raise ValueError("explore_rounds must satisfy 0 <= T_c < T")
        if self.encoder_epochs is not None and not 0 <= self.encoder_epochs <= self.local_epochs:
            raise ValueError("encoder_epochs must lie in [0, local_epochs]")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.failure_window < 1 or self.max_restarts < 0:
            raise ValueError("failure_window >= 1 and max_restarts >= 0 required")

    @property
    def exploration(self) -> int:
        return self.explore_rounds if self.algorithm == "cpcfl" else 0


@dataclass
class ClusterModelPool:
    models: list[Model]
    memberships: list[list[list[int]]] = field(default_factory=list)

    def __len__(self):
        return len(self.models)


@dataclass
class LocalUpdate:
    client_id: int
    params: Model
    cluster_identity: int
    sample_count: int
    steps: int = 0
    loss: float = float("nan")

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")


@dataclass
class FederationState:
    pool: ClusterModelPool
    history: list[dict] = field(default_factory=list)
    restarts: int = 0
    # first round of the current IFCA attempt
    epoch_start: int = 0


# ---------------------------------------------------------------- pools


def random_pool(arch: ArchConfig, n: int, seed: int) -> ClusterModelPool:
    """N independently initialized full models."""
    return ClusterModelPool([build_model(replace(arch, seed=int(s))) for s in _derived_seeds(seed, n)])


def pretrained_pool(encoder: Model, n: int, seed: int, arch: ArchConfig | None = None) -> ClusterModelPool:
    """The shared encoder joined with N independently initialized classifier heads."""
    arch = replace(arch or encoder.arch, ssl="none")
    models = []
    for s in _derived_seeds(seed, n):
        models.append(Model(arch, {
            "encoder": encoder.copy().components["encoder"],
            "classifier": fresh_classifier(arch, int(s)),
        }))
    return ClusterModelPool(models)


def _derived_seeds(seed, n):
    return np.random.default_rng([seed, 101]).integers(0, 2**31 - 1, size=n)


def client_rng(seed: int, t: int, client_id: int, stream: int = 0) -> np.random.Generator:
    """Per-client stream so serial and parallel schedules agree."""
    return np.random.default_rng([seed, t, client_id, stream])


def exploration_choice(seed: int, t: int, client_id: int, n: int) -> int:
    return int(client_rng(seed, t, client_id, 1).integers(0, n))


# ---------------------------------------------------------------- client side


def client_losses(client: ClientDataset, pool: ClusterModelPool) -> np.ndarray:
    return np.array([mean_loss(m, client.train.features, client.train.labels) for m in pool.models])


def select_model(client: ClientDataset, pool: ClusterModelPool) -> int:
    """Index of the pool model with the lowest full-batch train loss; ties go to the lowest index."""
    if not pool.models:
        raise ValueError("empty model pool")
    if len(pool.models) == 1:
        return 0
    return int(np.argmin(client_losses(client, pool)))


def local_update(
    client: ClientDataset,
    model: Model,
    cfg: FederationConfig,
    freeze_encoder: bool = False,
    *,
    cluster_identity: int = 0,
    rng: np.random.Generator | None = None,
) -> LocalUpdate:
    if len(client.train) == 0:
        raise ClientError(f"client {client.client_id} has no training data")
    if model.arch.input_dim != client.train.feature_dim or model.arch.num_classes != client.train.num_classes:
        raise ClientError(f"client {client.client_id}: model/data dimension mismatch")
    phi = model.copy()
    steps, loss = 0, float("nan")
    if cfg.local_epochs > 0:
        stats = fit_classifier(
            phi, client.train.features, client.train.labels,
            epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size,
            rng=rng if rng is not None else client_rng(cfg.seed, 0, client.client_id),
            encoder_epochs=0 if freeze_encoder else cfg.encoder_epochs,
        )
        steps, loss = stats.steps, stats.mean_loss
    return LocalUpdate(client.client_id, phi, cluster_identity, len(client.train), steps, loss)


# ---------------------------------------------------------------- server side


def aggregate(updates: list[LocalUpdate], components=None) -> Model:
    """Sample-count weighted average of the updates' parameters and buffers.

    ``components`` restricts averaging; the rest is copied from the first
    update.
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    out = updates[0].params.copy()
    if len(updates) == 1:
        return out
    total = float(sum(u.sample_count for u in updates))
    weights = [u.sample_count / total for u in updates]
    states = [u.params.state(components) for u in updates]
    merged = {}
    for name in states[0]:
        acc = weights[0] * states[0][name]
        for w, st in zip(weights[1:], states[1:]):
            acc = acc + w * st[name]
        merged[name] = acc
    out.load_state(merged)
    return out


def detect_clustering_failure(window: list[list[int]]) -> bool:
    """True iff every round in ``window`` has exactly one nonempty cluster.

    Each entry lists the cluster sizes of one selection round.
    """
    if not window:
        return False
    return all(sum(1 for s in sizes if s > 0) == 1 for sizes in window)


def comm_cost(rounds: int, num_clusters: int, model_size: float, algorithm: str) -> float:
    """Per-client communication units: 2ST for FedAvg, (N+1)ST for clustered methods."""
    if algorithm == "fedavg":
        return 2 * model_size * rounds
    if algorithm in ("ifca", "cpcfl"):
        return (num_clusters + 1) * model_size * rounds
    raise ValueError(f"unknown algorithm {algorithm!r}")


def model_size(model: Model) -> int:
    return int(sum(p.size for p in model.parameters().values()))


def _participants(clients, t, cfg):
    if cfg.participation >= 1.0:
        return list(clients)
    k = max(1, int(round(cfg.participation * len(clients))))
    idx = np.sort(np.random.default_rng([cfg.seed, t, 2**20]).choice(len(clients), size=k, replace=False))
    return [clients[i] for i in idx]


def run_round(state: FederationState, t: int, clients: list[ClientDataset], cfg: FederationConfig, *, evaluate=True) -> dict:
    """One server round; mutates ``state`` and returns the appended history record."""
    if t >= cfg.rounds:
        raise ValueError(f"round {t} outside budget T={cfg.rounds}")
    pool = state.pool
    n = len(pool)
    exploring = t < cfg.exploration
    participants = _participants(clients, t, cfg)
    updates: list[LocalUpdate] = []
    for client in participants:
        try:
            if exploring:
                choice = exploration_choice(cfg.seed, t, client.client_id, n)
            else:
                choice = select_model(client, pool)
            upd = local_update(
                client, pool.models[choice], cfg, freeze_encoder=exploring,
                cluster_identity=choice, rng=client_rng(cfg.seed, t, client.client_id),
            )
        except Exception as exc:
            raise ClientError(f"round {t}, client {client.client_id}: {exc}") from exc
        updates.append(upd)

    groups = [[u for u in updates if u.cluster_identity == k] for k in range(n)]
    components = ["classifier"] if exploring else None
    for k, members in enumerate(groups):
        # an empty cluster keeps its previous model
        if members:
            pool.models[k] = aggregate(members, components)
    if cfg.global_encoder and not exploring and updates:
        shared = aggregate(updates, ["encoder"])
        for m in pool.models:
            m.load_state(shared.state(["encoder"]))
    pool.memberships.append([[u.client_id for u in g] for g in groups])

    assignments = {u.client_id: u.cluster_identity for u in updates}
    record = {
        "round": t,
        "phase": "explore" if exploring else "select",
        "assignments": [assignments.get(c.client_id, -1) for c in clients],
        "cluster_sizes": [len(g) for g in groups],
        "mean_train_loss": float(np.mean([u.loss for u in updates])) if updates else None,
        "local_steps": int(sum(u.steps for u in updates)),
        "comm_cost": comm_cost(t + 1, n, 1, cfg.algorithm),
        "restarts": state.restarts,
        "metrics": None,
    }
    if evaluate and cfg.eval_every > 0 and ((t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1):
        record["metrics"] = evaluate_pool(pool, clients, round_index=t).to_dict()
    state.history.append(record)
    return record


def _restart(state: FederationState, arch: ArchConfig, cfg: FederationConfig, t: int):
    state.restarts += 1
    state.history[-1]["restarted"] = True
    fresh = random_pool(arch, len(state.pool), seed=int(_derived_seeds(cfg.seed, state.restarts + 1)[-1]))
    state.pool.models = fresh.models
    state.epoch_start = t + 1
    log.info("IFCA restart %d after round %d", state.restarts, t)


def run_federation(cfg: FederationConfig, clients: list[ClientDataset], initial_pool: ClusterModelPool, *, on_round=None):
    """Run ``cfg.rounds`` rounds; returns ``(pool, history)``.

    In IFCA mode a window of ``failure_window`` single-cluster rounds triggers
    a restart from freshly randomized models within the same round budget;
    exceeding ``max_restarts`` raises :class:`ClusteringFailure`.
    """
    cfg.validate()
    if len(initial_pool) != cfg.num_clusters:
        raise ValueError(f"pool has {len(initial_pool)} models, config expects {cfg.num_clusters}")
    pool = ClusterModelPool([m.copy() for m in initial_pool.models])
    state = FederationState(pool)
    arch = pool.models[0].arch
    for t in range(cfg.rounds):
        record = run_round(state, t, clients, cfg)
        if on_round is not None:
            on_round(state, record)
        if cfg.algorithm != "ifca" or cfg.num_clusters == 1:
            continue
        recent = [r["cluster_sizes"] for r in state.history[state.epoch_start :]]
        if len(recent) >= cfg.failure_window and detect_clustering_failure(recent[-cfg.failure_window :]):
            if state.restarts >= cfg.max_restarts:
                record["failure"] = True
                raise ClusteringFailure(
                    f"clustering failure persisted after {state.restarts} restarts (round {t})",
                    pool=pool, history=state.history,
                )
            if t < cfg.rounds - 1:
                _restart(state, arch, cfg, t)
    return pool, state.history


def config_dict(cfg: FederationConfig) -> dict:
    return asdict(cfg)
