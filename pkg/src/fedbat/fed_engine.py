"""Federated round loop: client sampling, local training, uplink, aggregation.

One round: the server samples K of N clients, each sampled client trains
locally from the current global model, its update is compressed by the
configured codec, and the server adds the weight-renormalized sum of the
decoded updates to the global model. Client sums run in ascending client-id
order so results do not depend on completion order.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import codecs, nn
from .binarizer import STOCHASTIC, BinarizerOps, StepSizeParam, init_step_size, with_alpha_e
from .codecs import BinarizedUpdate, CodecKind, ErrorFeedbackState
from .tensor import SeededRng, ordered_sum


class ConfigError(ValueError):
    pass


class AggregationError(ValueError):
    pass


class RoundError(RuntimeError):
    """Failure inside a round, annotated with the round and client."""

    def __init__(self, round_: int, client_id: int | None, cause: BaseException):
        where = f"round {round_}" + (f", client {client_id}" if client_id is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.round = round_
        self.client_id = client_id


@dataclass
class ClientState:
    client_id: int
    data: object
    weight: float
    ef_residual: ErrorFeedbackState | None = None


@dataclass(frozen=True)
class RoundPlan:
    round: int
    clients: tuple[int, ...]


@dataclass(frozen=True)
class LocalTrainConfig:
    tau: int
    algorithm: CodecKind
    phi: float = 0.5
    rho: float = 6.0
    eta: float | Callable[[int], float] = 0.1
    batch_size: int = 64

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError(f"tau must be at least 1, got {self.tau}")
        if not 0.0 <= self.phi <= 1.0:
            raise ConfigError(f"phi must lie in [0, 1], got {self.phi}")
        if self.rho < 0:
            raise ConfigError(f"rho must be nonnegative, got {self.rho}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.algorithm.name == "fedbat" and self.warmup_steps >= self.tau:
            raise ConfigError(
                f"phi={self.phi} with tau={self.tau} leaves no binarization-aware step"
            )

    @property
    def warmup_steps(self) -> int:
        return math.floor(self.phi * self.tau)

    def lr(self, step: int) -> float:
        return self.eta(step) if callable(self.eta) else float(self.eta)


@dataclass(frozen=True)
class StepEvent:
    kind: str  # "FP", "INIT" or "BAT"
    step: int
    alpha_prime: tuple[float, ...] | None = None
    m: tuple[np.ndarray, ...] | None = None


@dataclass
class RoundRecord:
    round: int
    algorithm: str
    train_loss: float
    test_accuracy: float
    uplink_bytes: int
    cum_uplink_bytes: int
    wall_seconds: float
    seed_fingerprint: str


def sample_clients(n: int, k: int, rng: SeededRng, round: int = 0) -> RoundPlan:
    """Uniform sample of ``k`` distinct client ids out of ``n``."""
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    chosen = rng.choice(n, k) if k < n else np.arange(n)
    return RoundPlan(round, tuple(sorted(int(c) for c in chosen)))


def local_train_fedbat(w_t: nn.GlobalModel, cfg: LocalTrainConfig, client: ClientState, rng: SeededRng,
                       *, step_offset: int = 0, trace: list | None = None,
                       ops: BinarizerOps = STOCHASTIC) -> tuple[BinarizedUpdate, float]:
    """Binarization-aware local training.

    The update ``m`` starts at zero and is trained at full precision for the
    first ``floor(phi * tau)`` steps. At that step index each layer's step
    size is initialized from the mean absolute update, and from there on
    ``m`` and ``alpha_e`` are trained through the binarizer. Returns the final
    per-layer signs and step sizes, and the mean training loss.
    """
    if cfg.algorithm.name != "fedbat":
        raise ConfigError("local_train_fedbat needs algorithm=fedbat")
    batches = w_t.arch.batches(client.data, cfg.batch_size, rng.split("batches"))
    brng = rng.split("binarize")
    m = [np.zeros_like(w) for w in w_t.layers]
    steps: list[StepSizeParam] | None = None
    k = cfg.warmup_steps
    losses = []
    for s in range(cfg.tau):
        eta = cfg.lr(step_offset + s)
        batch = next(batches)
        if s < k:
            loss, cache = nn.forward(w_t, nn.Shifted(m), batch)
            grads = nn.backward(cache)
            m = nn.sgd_step(m, grads.params, eta)
            if trace is not None:
                trace.append(StepEvent("FP", s))
            losses.append(loss)
            continue
        if s == k:
            steps = [init_step_size(ml, cfg.rho) for ml in m]
            if trace is not None:
                trace.append(StepEvent("INIT", s, tuple(st.alpha_prime for st in steps),
                                       tuple(ml.copy() for ml in m)))
        loss, cache = nn.forward(w_t, nn.Binarized(m, steps, brng, ops), batch)
        grads = nn.backward(cache)
        m = nn.sgd_step(m, grads.params, eta)
        steps = [with_alpha_e(st, st.alpha_e - eta * ga) for st, ga in zip(steps, grads.alpha_e)]
        if trace is not None:
            trace.append(StepEvent("BAT", s))
        losses.append(loss)
    signs, alphas = [], []
    for ml, st in zip(m, steps):
        mhat, _ = ops.forward(ml, st, brng)
        alpha = st.alpha
        signs.append(mhat / alpha)
        alphas.append(alpha)
    return BinarizedUpdate(signs, alphas), float(np.mean(losses))


def local_train_baseline(w_t: nn.GlobalModel, cfg: LocalTrainConfig, client: ClientState, rng: SeededRng,
                         *, step_offset: int = 0) -> tuple[list[np.ndarray], float]:
    """Plain local SGD; returns the update ``w_final - w_t`` and the mean loss."""
    if cfg.algorithm.name == "fedbat":
        raise ConfigError("local_train_baseline does not run fedbat")
    batches = w_t.arch.batches(client.data, cfg.batch_size, rng.split("batches"))
    w = w_t.copy()
    losses = []
    for s in range(cfg.tau):
        loss, cache = nn.forward(w, nn.Plain(), next(batches))
        w.layers = nn.sgd_step(w.layers, nn.backward(cache).params, cfg.lr(step_offset + s))
        losses.append(loss)
    return [a - b for a, b in zip(w.layers, w_t.layers)], float(np.mean(losses))


def renormalized_weights(plan: RoundPlan, weights) -> dict[int, float]:
    total = ordered_sum(np.array([weights[k] for k in plan.clients]))
    if not total > 0:
        raise AggregationError("sampled clients carry zero total weight")
    return {k: weights[k] / total for k in plan.clients}


def aggregate(w_t: nn.GlobalModel, messages, plan: RoundPlan, weights) -> nn.GlobalModel:
    """Weighted sum of decoded client updates added to the global model.

    ``weights[k]`` is client k's data share; it is renormalized over the
    sampled set.
    """
    by_id: dict[int, object] = {}
    for msg in messages:
        if msg.client_id in by_id:
            raise AggregationError(f"duplicate message from client {msg.client_id}")
        by_id[msg.client_id] = msg
    missing = set(plan.clients) - set(by_id)
    extra = set(by_id) - set(plan.clients)
    if missing:
        raise AggregationError(f"missing messages from clients {sorted(missing)}")
    if extra:
        raise AggregationError(f"messages from unsampled clients {sorted(extra)}")
    p = renormalized_weights(plan, weights)
    delta = [np.zeros_like(w) for w in w_t.layers]
    for k in plan.clients:
        decoded = by_id[k].decode()
        if len(decoded) != len(delta):
            raise AggregationError(f"client {k} sent {len(decoded)} layers, expected {len(delta)}")
        for l, v in enumerate(decoded):
            if v.shape != delta[l].shape:
                raise AggregationError(f"client {k} layer {l} has {v.size} values, expected {delta[l].size}")
            delta[l] += p[k] * v
    return nn.GlobalModel(w_t.arch, [w + d for w, d in zip(w_t.layers, delta)])


def _fingerprint(seed: int, round_: int) -> str:
    return hashlib.blake2b(f"{seed}:{round_}".encode(), digest_size=6).hexdigest()


@dataclass
class Federation:
    """Everything a run needs besides the loop itself."""

    model: nn.GlobalModel
    clients: list[ClientState]
    test_data: object
    kind: CodecKind
    local: LocalTrainConfig
    clients_per_round: int
    seed: int
    local_epochs: int | None = None  # if set, tau per client = epochs * batches in its shard

    def client_config(self, client: ClientState) -> LocalTrainConfig:
        if self.local_epochs is None:
            return self.local
        tau = self.local_epochs * math.ceil(len(client.data) / self.local.batch_size)
        return replace(self.local, tau=tau)


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    model: nn.GlobalModel


def run_rounds(fed: Federation, rounds: int, *, eval_every: int = 1, workers: int = 1,
               on_message: Callable | None = None) -> ExperimentResult:
    """Run ``rounds`` federated rounds from ``fed.model``."""
    root = SeededRng(fed.seed)
    model = fed.model.copy()
    weights = {c.client_id: c.weight for c in fed.clients}
    clients = {c.client_id: c for c in fed.clients}
    records: list[RoundRecord] = []
    cum = 0
    step_offset = 0

    def train_one(t: int, k: int, w_t: nn.GlobalModel):
        client = clients[k]
        cfg = fed.client_config(client)
        crng = root.split(("client", t, k))
        try:
            if fed.kind.name == "fedbat":
                update, loss = local_train_fedbat(w_t, cfg, client, crng, step_offset=step_offset)
            else:
                update, loss = local_train_baseline(w_t, cfg, client, crng, step_offset=step_offset)
            msg, new_state = codecs.compress(fed.kind, update, client.ef_residual,
                                             root.split(("codec", t, k)), round=t, client_id=k)
        except Exception as exc:
            raise RoundError(t, k, exc) from exc
        return msg, new_state, loss

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(rounds):
            start = time.perf_counter()
            plan = sample_clients(len(fed.clients), fed.clients_per_round, root.split(("sample", t)), t)
            w_t = model.copy()
            if pool is None:
                results = [train_one(t, k, w_t) for k in plan.clients]
            else:
                results = list(pool.map(lambda k: train_one(t, k, w_t), plan.clients))
            messages = []
            for k, (msg, new_state, _) in zip(plan.clients, results):
                if fed.kind.stateful:
                    clients[k].ef_residual = new_state
                messages.append(msg)
                if on_message is not None:
                    on_message(msg)
            try:
                model = aggregate(model, messages, plan, weights)
            except Exception as exc:
                raise RoundError(t, None, exc) from exc
            p = renormalized_weights(plan, weights)
            train_loss = ordered_sum(np.array([p[k] * r[2] for k, r in zip(plan.clients, results)]))
            if (t + 1) % eval_every == 0 or t == rounds - 1:
                acc, _ = nn.evaluate(model, fed.test_data)
            else:
                acc = float("nan")
            sent = sum(codecs.uplink_bytes(m) for m in messages)
            cum += sent
            records.append(RoundRecord(
                round=t, algorithm=fed.kind.name, train_loss=train_loss, test_accuracy=acc,
                uplink_bytes=sent, cum_uplink_bytes=cum, wall_seconds=time.perf_counter() - start,
                seed_fingerprint=_fingerprint(fed.seed, t),
            ))
            step_offset += fed.local.tau
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(records, model)


def build_federation(model: nn.GlobalModel, shards, train_data, test_data, kind: CodecKind,
                     local: LocalTrainConfig, clients_per_round: int, seed: int,
                     local_epochs: int | None = None) -> Federation:
    """Clients weighted by shard size; EF clients start with a zero residual."""
    n = sum(len(s) for s in shards)
    clients = []
    for k, idx in enumerate(shards):
        ef = ErrorFeedbackState.zeros([w.size for w in model.layers]) if kind.stateful else None
        clients.append(ClientState(k, train_data.subset(idx), len(idx) / n, ef))
    return Federation(model, clients, test_data, kind, local, clients_per_round, seed, local_epochs)


def load_datasets(cfg):
    """Train and test datasets described by ``cfg.data``."""
    from .datasets import load_idx, synth_blobs

    d = cfg.data
    if d.source == "blobs":
        seed = cfg.experiment.seed
        train = synth_blobs(d.n, d.dim, d.classes, d.spread, seed)
        # test samples share the training centers but use their own noise stream
        test = synth_blobs(d.n_test, d.dim, d.classes, d.spread, seed + 1, center_seed=seed)
        return train, test
    train = load_idx(d.train_images, d.train_labels)
    test = load_idx(d.test_images, d.test_labels, num_classes=train.num_classes)
    return train, test


def setup_experiment(cfg) -> Federation:
    from .datasets import PartitionSpec, partition

    e, p, t = cfg.experiment, cfg.partition, cfg.training
    train, test = load_datasets(cfg)
    shards = partition(train, PartitionSpec(p.scheme, p.n_clients, e.seed, p.beta, p.labels_per_client))
    arch = nn.MLP([train.dim, *cfg.model.hidden, train.num_classes])
    model = nn.GlobalModel(arch, arch.init_params(SeededRng(e.seed).split("init")))
    local = LocalTrainConfig(
        tau=t.tau if t.tau is not None else 1,
        algorithm=cfg.codec_kind(), phi=t.phi, rho=t.rho, eta=t.lr, batch_size=t.batch_size,
    )
    return build_federation(model, shards, train, test, cfg.codec_kind(), local, t.clients_per_round,
                            e.seed, local_epochs=None if t.tau is not None else t.local_epochs)


def run_experiment(cfg, *, on_message: Callable | None = None) -> ExperimentResult:
    """Set up data, partition and model from a validated config and run all rounds."""
    fed = setup_experiment(cfg)
    return run_rounds(fed, cfg.experiment.rounds, eval_every=cfg.experiment.eval_every,
                      workers=cfg.experiment.workers, on_message=on_message)
