"""Round engines for the six federated protocols and the experiment loop.

Every engine mutates the client list in place and appends the messages it
would put on the wire to a :class:`TransmissionLedger`. The ledger is what
the communication-cost and head-privacy checks read.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from firma import nn, ring
from firma.data import LabeledDataset, PartitionSpec, partition, split_local, train_test_split
from firma.errors import ConfigError
from firma.metrics import METHODS, RoundRecord

log = logging.getLogger(__name__)

SERVER = -1
EVAL_SPLITS = ("partitioned", "global", "local")

_TWO_PHASE_DEFAULTS = {"fedrep": (2, 2), "fibfl": (1, 20), "fibfl+": (1, 20), "fibfl++": (1, 20)}


@dataclass
class ProtocolConfig:
    method: str
    n_clients: int = 5
    rounds: int = 10
    E_h: int | None = None
    E_e: int | None = None
    E: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    gamma: float = 0.5
    gamma_start: float = 0.4
    gamma_end: float = 0.05
    tau: float = 0.35
    eps: float = ring.GATE_EPS
    mix: float = 0.5
    k_g: int | None = None
    warmup: int | None = None
    batch_size: int = 64
    seed: int = 0  # model init; batch order too unless shuffle_seed is set
    shuffle_seed: int | None = None
    eval_split: str = "partitioned"  # "partitioned" | "global" | "local"
    test_frac: float = 0.2

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        eh, ee = _TWO_PHASE_DEFAULTS.get(self.method, (2, 2))
        self.E_h = eh if self.E_h is None else self.E_h
        self.E_e = ee if self.E_e is None else self.E_e
        if self.shuffle_seed is None:
            self.shuffle_seed = self.seed
        if self.k_g is None:
            self.k_g = ring.gossip_passes(self.n_clients)
        if self.warmup is None:
            self.warmup = ring.warmup_rounds(self.rounds)
        if self.method == "fibfl++" and self.rounds > 0 and self.warmup >= self.rounds:
            raise ConfigError(f"warmup W={self.warmup} must be < R={self.rounds}")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"eval_split must be one of {EVAL_SPLITS}, got {self.eval_split!r}")
        if self.batch_size < 1 or self.n_clients < 1:
            raise ConfigError("batch_size and n_clients must be positive")


@dataclass(frozen=True)
class Transmission:
    round: int
    sender: int
    receiver: int
    params: int
    includes_head: bool
    scalars: int = 0


@dataclass
class TransmissionLedger:
    entries: list = field(default_factory=list)
    # clients whose head changed during a communication stage, per round
    head_changes: dict = field(default_factory=dict)

    def send(self, round_idx, sender, receiver, params, includes_head, scalars=0):
        self.entries.append(Transmission(round_idx, sender, receiver, params, includes_head, scalars))

    def params_in_round(self, round_idx: int) -> int:
        return sum(e.params for e in self.entries if e.round == round_idx)

    def head_tx_in_round(self, round_idx: int) -> int:
        return sum(1 for e in self.entries if e.round == round_idx and e.includes_head)

    def scalars_in_round(self, round_idx: int) -> int:
        return sum(e.scalars for e in self.entries if e.round == round_idx)


# ----------------------------------------------------------------- helpers


def _head_hashes(clients):
    return [nn.param_hash(c.head.flat) for c in clients]


def _audit_heads(ledger, round_idx, clients, before):
    changed = [c.client_id for c, h in zip(clients, before) if nn.param_hash(c.head.flat) != h]
    ledger.head_changes[round_idx] = ledger.head_changes.get(round_idx, []) + changed


def size_weights(clients) -> np.ndarray:
    n = np.array([c.n_samples for c in clients], dtype=np.float64)
    if n.sum() == 0:
        return np.full(len(clients), 1.0 / len(clients))
    return n / n.sum()


def fedavg_aggregate(clients, include_head: bool = True) -> None:
    """Size-weighted average written back to every client."""
    w = size_weights(clients)
    ext = np.einsum("i,ij->j", w, np.stack([c.extractor.flat for c in clients]))
    head = np.einsum("i,ij->j", w, np.stack([c.head.flat for c in clients])) if include_head else None
    for c in clients:
        c.extractor.flat[...] = ext
        if include_head:
            c.head.flat[...] = head


def _server_round_ledger(ledger, round_idx, clients, params, includes_head):
    for c in clients:
        ledger.send(round_idx, c.client_id, SERVER, params, includes_head)
    for c in clients:
        ledger.send(round_idx, SERVER, c.client_id, params, includes_head)


def _ring_ledger(ledger, round_idx, sigma, params, includes_head, scalars=0):
    n = len(sigma)
    for p in range(n):
        i = sigma[p]
        ledger.send(round_idx, i, sigma[(p - 1) % n], params, includes_head, scalars)
        ledger.send(round_idx, i, sigma[(p + 1) % n], params, includes_head, scalars)


def _p(clients):
    c = clients[0]
    return len(c.extractor) + len(c.head), len(c.extractor)


# ----------------------------------------------------------------- engines


def round_fedavg(clients, config: ProtocolConfig, round_idx: int, ledger: TransmissionLedger):
    for c in clients:
        c.reset_velocity()
        nn.local_train_full(c, config.E, config.batch_size, config.shuffle_seed, round_idx,
                            "sgd", config.lr, config.momentum)
    fedavg_aggregate(clients)
    _server_round_ledger(ledger, round_idx, clients, _p(clients)[0], True)
    return clients


def round_fedrep(clients, config: ProtocolConfig, round_idx: int, ledger: TransmissionLedger):
    for c in clients:
        c.reset_velocity()
        nn.local_train_two_phase(c, config.E_h, config.E_e, config.batch_size, config.shuffle_seed,
                                 round_idx, "sgd", config.lr, config.momentum)
    before = _head_hashes(clients)
    fedavg_aggregate(clients, include_head=False)
    _audit_heads(ledger, round_idx, clients, before)
    _server_round_ledger(ledger, round_idx, clients, _p(clients)[1], False)
    return clients


def round_rdfl(clients, config: ProtocolConfig, round_idx: int, ledger: TransmissionLedger):
    for c in clients:
        c.reset_velocity()
        nn.local_train_full(c, config.E, config.batch_size, config.shuffle_seed, round_idx,
                            "sgd", config.lr, config.momentum)
    n_ext = len(clients[0].extractor)
    full = np.stack([np.concatenate([c.extractor.flat, c.head.flat]) for c in clients])
    sigma = list(range(len(clients)))
    new, _ = ring.gossip_pass(full, sigma, config.gamma, "uniform")
    for c, row in zip(clients, new):
        c.extractor.flat[...] = row[:n_ext]
        c.head.flat[...] = row[n_ext:]
    _ring_ledger(ledger, round_idx, sigma, _p(clients)[0], True)
    return clients


def _two_phase_adam(clients, config, round_idx):
    for c in clients:
        nn.local_train_two_phase(c, config.E_h, config.E_e, config.batch_size, config.shuffle_seed,
                                 round_idx, "adam")


def _extractor_gossip(clients, sigma, gamma, passes, weights, config, round_idx, ledger,
                      scalars=0):
    before = _head_hashes(clients)
    thetas = np.stack([nn.flatten_extractor(c.extractor) for c in clients])
    acc = [c.last_train_accuracy for c in clients]  # recorded once per round
    for _ in range(passes):
        thetas, _ = ring.gossip_pass(thetas, sigma, gamma, weights, acc, config.tau,
                                     config.eps, config.mix)
        _ring_ledger(ledger, round_idx, sigma, _p(clients)[1], False, scalars)
    for c, theta in zip(clients, thetas):
        nn.set_extractor(c, theta)
    _audit_heads(ledger, round_idx, clients, before)


def round_fibfl(clients, config: ProtocolConfig, round_idx: int, ledger: TransmissionLedger):
    _two_phase_adam(clients, config, round_idx)
    sigma = list(range(len(clients)))
    _extractor_gossip(clients, sigma, config.gamma, 1, "fib", config, round_idx, ledger)
    return clients


def round_fibflp(clients, config: ProtocolConfig, round_idx: int, ledger: TransmissionLedger):
    _two_phase_adam(clients, config, round_idx)
    sigma = list(range(len(clients)))
    _extractor_gossip(clients, sigma, config.gamma, 1, "gated", config, round_idx, ledger,
                      scalars=1)
    return clients


def round_fibflpp(clients, config: ProtocolConfig, ring_order, round_idx: int,
                  ledger: TransmissionLedger) -> float | None:
    """One FibFL++ round. Returns the round's retention ``gamma_r`` (None in warmup)."""
    if round_idx <= config.warmup:
        for c in clients:
            nn.local_train_full(c, max(config.E_h, config.E_e), config.batch_size, config.shuffle_seed,
                                round_idx, "adam")
        fedavg_aggregate(clients)
        _server_round_ledger(ledger, round_idx, clients, _p(clients)[0], True)
        return None
    sched = ring.GammaSchedule(config.gamma_start, config.gamma_end, config.warmup, config.rounds)
    gamma_r = ring.gamma_at_round(sched, round_idx)
    gamma_in = ring.calibrated_retention(gamma_r, config.k_g)
    _two_phase_adam(clients, config, round_idx)
    sigma = ring_order.sigma if hasattr(ring_order, "sigma") else list(ring_order)
    _extractor_gossip(clients, sigma, gamma_in, config.k_g, "gated", config, round_idx, ledger,
                      scalars=1)
    return gamma_r


# -------------------------------------------------------------- experiment


@dataclass
class ExperimentResult:
    records: list
    final_accuracies: np.ndarray
    clients: list
    ledger: TransmissionLedger
    shards: list
    ring_order: ring.RingOrder | None = None


def setup_clients(dataset: LabeledDataset, spec: PartitionSpec, config: ProtocolConfig):
    """Partition, build per-client train/test sets and identical initial models.

    Evaluation splits:

    * ``"partitioned"``: a global holdout is split across clients by the
      same scheme on an independent seed stream; a client whose test shard
      comes out empty is scored on the whole holdout.
    * ``"global"``: every client is scored on the whole holdout.
    * ``"local"``: each training shard keeps its own last ``test_frac``.

    Returns ``(clients, test_sets, shards, train_dataset)``; every method
    given the same dataset, spec and seed starts from the same state.
    """
    if spec.n_clients != config.n_clients:
        raise ConfigError(f"partition has N={spec.n_clients}, protocol N={config.n_clients}")
    if config.eval_split in ("global", "partitioned"):
        train, test = train_test_split(dataset, config.test_frac, spec.seed)
        shards = partition(train, spec)
        train_sets = [train.subset(s.indices) for s in shards]
        if config.eval_split == "global":
            test_sets = [test] * len(shards)
        else:
            test_seed = int(np.random.SeedSequence([spec.seed, 1]).generate_state(1, np.uint64)[0])
            test_shards = partition(test, replace(spec, seed=test_seed))
            test_sets = [test.subset(t.indices) if len(t) else test for t in test_shards]
    else:
        train = dataset
        shards = partition(dataset, spec)
        train_sets, test_sets = [], []
        for s in shards:
            tr, te = split_local(s, config.test_frac, spec.seed)
            train_sets.append(dataset.subset(tr))
            test_sets.append(dataset.subset(te))
    ext, head = nn.init_model(dataset.dim, config.seed, dataset.n_classes)
    clients = [nn.ClientState.create(i, ext, head, d, config.lr) for i, d in enumerate(train_sets)]
    return clients, test_sets, shards, train


def _evaluate_all(clients, test_sets) -> np.ndarray:
    return np.array([nn.evaluate(c, t) if len(t) else 0.0 for c, t in zip(clients, test_sets)])


def run_experiment(dataset: LabeledDataset, spec: PartitionSpec, config: ProtocolConfig) -> ExperimentResult:
    clients, test_sets, shards, train = setup_clients(dataset, spec, config)
    ledger = TransmissionLedger()
    order = None
    if config.method == "fibfl++":
        order = ring.two_opt(np.stack([s.class_histogram for s in shards]))
    engines = {
        "fedavg": round_fedavg, "fedrep": round_fedrep, "rdfl": round_rdfl,
        "fibfl": round_fibfl, "fibfl+": round_fibflp,
    }
    records = []
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        gamma_r = config.gamma if config.method in ("rdfl", "fibfl", "fibfl+") else None
        if config.method == "fibfl++":
            gamma_r = round_fibflpp(clients, config, order, r, ledger)
        else:
            engines[config.method](clients, config, r, ledger)
        acc = _evaluate_all(clients, test_sets)
        rec = RoundRecord.from_accuracies(
            r, acc, params_tx=ledger.params_in_round(r), head_tx_count=ledger.head_tx_in_round(r),
            gamma_r=gamma_r, wall_time=time.perf_counter() - t0,
            train_accuracies=np.array([c.last_train_accuracy for c in clients]),
        )
        records.append(rec)
        log.debug("%s round %d mean=%.4f gini=%.4f", config.method, r, rec.mean, rec.gini)
    return ExperimentResult(records, _evaluate_all(clients, test_sets), clients, ledger, shards, order)
