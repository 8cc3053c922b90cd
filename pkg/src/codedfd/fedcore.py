"""Federated rounds with coded dropout masks and FAVG / FedAdam aggregation."""

from __future__ import annotations

import enum
import logging
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .codegen import CodeStrategy, MaskMatrix, build_mask_matrix, keep_weight, DEFAULT_CWC_MAX_ITERS
from .data import ClientDataset
from .dropout import MaskAssignment, embed_update, extract_submodel, maskable_layers, merge_updates
from .errors import EmptyCohort, ModeMismatch

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
METRICS_HEADER = ("round", "eta", "strategy", "median_train_acc", "mean_train_acc", "test_acc",
                  "bytes_down", "bytes_up", "cumulative_bytes")


class Mode(str, enum.Enum):
    FAVG = "favg"
    FEDADAM = "fedadam"


@dataclass
class ServerOptimizerState:
    mode: Mode = Mode.FAVG
    eta: float = 1.0
    beta1: float = 0.90
    beta2: float = 0.99
    tau: float = 0.001
    momentum: list | None = None
    second_moment: list | None = None


@dataclass
class RoundConfig:
    clients_per_round: int = 35
    total_clients: int = 3400
    alpha: float = 0.5
    strategy: CodeStrategy = CodeStrategy.GOLD
    epochs: int = 1
    client_lr: float = 0.035
    batch_size: int = 10
    seed: int = 0
    cwc_max_iters: int = DEFAULT_CWC_MAX_ITERS

    def __post_init__(self):
        self.strategy = CodeStrategy.parse(self.strategy)
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ValueError(f"need 1 <= M <= T, got M={self.clients_per_round}, T={self.total_clients}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def dropout(self) -> bool:
        return self.alpha > 0.0

    @property
    def label(self) -> str:
        return self.strategy.value if self.dropout else "no_dropout"


@dataclass
class ClientUpdate:
    deltas: list
    bitmaps: list
    train_accuracy: float
    dataset_size: int
    kept_params: list[int]


@dataclass
class RoundMetrics:
    round: int
    eta: float
    strategy: str
    client_accuracies: list[float]
    bytes_down: int
    bytes_up: int
    cumulative_bytes: int
    kept_by_param: list[int] = field(default_factory=list)
    test_acc: float | None = None

    @property
    def median_train_acc(self) -> float:
        return float(statistics.median(self.client_accuracies))

    @property
    def mean_train_acc(self) -> float:
        return float(np.mean(self.client_accuracies))

    def csv_row(self) -> list[str]:
        test = "" if self.test_acc is None else f"{self.test_acc:.6f}"
        return [str(self.round), repr(float(self.eta)), self.strategy, f"{self.median_train_acc:.6f}",
                f"{self.mean_train_acc:.6f}", test, str(self.bytes_down), str(self.bytes_up),
                str(self.cumulative_bytes)]


def select_clients(t: int, config: RoundConfig) -> np.ndarray:
    """The M clients of round t, sampled without replacement; row j goes to entry j."""
    rng = np.random.default_rng([config.seed, 1, t])
    return rng.choice(config.total_clients, size=config.clients_per_round, replace=False)


def favg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise EmptyCohort("no clients to weight")
    if np.any(sizes <= 0):
        raise EmptyCohort("every client needs a positive dataset size")
    return sizes / sizes.sum()


def favg_step(state: ServerOptimizerState, weights, delta):
    if state.mode is not Mode.FAVG:
        raise ModeMismatch(f"favg_step called with a {state.mode.value} state")
    return [w + (state.eta * d).astype(w.dtype) for w, d in zip(weights, delta)]


def fedadam_step(state: ServerOptimizerState, weights, delta):
    """Adam-style server update; moments start at zero and are updated on every coordinate."""
    if state.mode is not Mode.FEDADAM:
        raise ModeMismatch(f"fedadam_step called with a {state.mode.value} state")
    m_prev = state.momentum or [np.zeros_like(d) for d in delta]
    v_prev = state.second_moment or [np.zeros_like(d) for d in delta]
    m = [state.beta1 * mp + (1 - state.beta1) * d for mp, d in zip(m_prev, delta)]
    v = [state.beta2 * vp + (1 - state.beta2) * mi * mi for vp, mi in zip(v_prev, m)]
    new = [w + (state.eta * mi / (np.sqrt(vi) + state.tau)).astype(w.dtype) for w, mi, vi in zip(weights, m, v)]
    return new, replace(state, momentum=m, second_moment=v)


def server_step(state: ServerOptimizerState, weights, delta):
    if state.mode is Mode.FAVG:
        return favg_step(state, weights, delta), state
    return fedadam_step(state, weights, delta)


def all_ones_matrix(width: int, clients: int) -> MaskMatrix:
    return MaskMatrix(np.ones((clients, width), dtype=np.uint8), width, width, clients, 0.0, "none")


class MaskSchedule:
    """Per-round mask matrices for every maskable layer.

    Random strategies draw fresh matrices each round. Gold and CWC matrices do
    not change between generations, so one base matrix per layer width is built
    once and its rows and columns are reshuffled every round.
    """

    _base_cache: dict = {}

    def __init__(self, spec: nn.ModelSpec, config: RoundConfig):
        self.spec = spec
        self.config = config
        self.layers = maskable_layers(spec)
        self.widths = [spec.layers[i].units for i in self.layers]
        if config.dropout:
            for w in self.widths:
                keep_weight(w, config.alpha)

    def _base(self, width: int) -> MaskMatrix:
        c = self.config
        key = (c.strategy, width, c.clients_per_round, c.alpha, c.seed, c.cwc_max_iters)
        if key not in self._base_cache:
            self._base_cache[key] = build_mask_matrix(c.strategy, width, c.clients_per_round, c.alpha,
                                                      seed=c.seed, max_iters=c.cwc_max_iters)
        return self._base_cache[key]

    def matrices(self, t: int) -> list[MaskMatrix]:
        c = self.config
        out = []
        for li, width in zip(self.layers, self.widths):
            if not c.dropout:
                out.append(all_ones_matrix(width, c.clients_per_round))
            elif c.strategy in (CodeStrategy.RANDOM_SAME, CodeStrategy.RANDOM_DISTINCT):
                seed = int(np.random.SeedSequence([c.seed, 2, t, li]).generate_state(1)[0])
                out.append(build_mask_matrix(c.strategy, width, c.clients_per_round, c.alpha, seed=seed))
            else:
                out.append(self._base(width).shuffled(np.random.default_rng([c.seed, 3, t, li])))
        return out


def client_update(spec: nn.ModelSpec, global_params, assignment: MaskAssignment, data: ClientDataset,
                  config: RoundConfig, rng: np.random.Generator, t: int = 0) -> ClientUpdate:
    sub = extract_submodel(spec, global_params, assignment, origin_round=t)
    trained = nn.sgd_local_train(sub.spec, sub.params, data.x, data.y, config.client_lr, config.epochs,
                                 config.batch_size, rng)
    acc = nn.training_accuracy(sub.spec, trained, data.x, data.y)
    delta = [a - b for a, b in zip(trained, sub.params)]
    deltas, bitmaps = embed_update(spec, delta, sub)
    return ClientUpdate(deltas, bitmaps, acc, len(data), [p.size for p in sub.params])


def run_round(t: int, spec: nn.ModelSpec, global_params, state: ServerOptimizerState, config: RoundConfig,
              masks: list[MaskMatrix], datasets: list[ClientDataset], cumulative_bytes: int = 0):
    """One FL round; returns (new global weights, new server state, metrics)."""
    clients = select_clients(t, config)
    layers = maskable_layers(spec)
    if len(masks) != len(layers):
        raise ValueError(f"{len(masks)} mask matrices for {len(layers)} maskable layers")
    for mm in masks:
        if len(mm) < len(clients):
            raise ValueError(f"mask matrix has {len(mm)} rows for {len(clients)} clients")
    updates = []
    for j, k in enumerate(clients):
        assignment = MaskAssignment({li: mm.row(j).astype(bool) for li, mm in zip(layers, masks)})
        rng = np.random.default_rng([config.seed, 4, t, int(k)])
        updates.append(client_update(spec, global_params, assignment, datasets[k], config, rng, t))
    p = favg_weights([u.dataset_size for u in updates])
    merged = merge_updates(global_params, [(u.deltas, u.bitmaps, pj) for u, pj in zip(updates, p)])
    new_params, new_state = server_step(state, global_params, merged)
    kept = [int(sum(col)) for col in zip(*(u.kept_params for u in updates))]
    sent = BYTES_PER_PARAM * sum(kept)
    metrics = RoundMetrics(t + 1, state.eta, config.label, [u.train_accuracy for u in updates],
                           sent, sent, cumulative_bytes + 2 * sent, kept)
    return new_params, new_state, metrics


class FederatedSession:
    """A stateful FL session advanced one round per ``step()``."""

    def __init__(self, spec: nn.ModelSpec, datasets: list[ClientDataset], config: RoundConfig,
                 state: ServerOptimizerState | None = None, init_params=None, test_set=None,
                 eval_every: int = 5, dtype=np.float32, init_seed: int | None = None):
        if len(datasets) != config.total_clients:
            raise ValueError(f"{len(datasets)} client datasets for T={config.total_clients}")
        self.spec = spec
        self.datasets = datasets
        self.config = config
        self.state = state or ServerOptimizerState()
        seed = config.seed if init_seed is None else init_seed
        self.params = init_params if init_params is not None else spec.init(seed, dtype)
        self.schedule = MaskSchedule(spec, config)
        self.test_set = test_set
        self.eval_every = eval_every
        self.t = 0
        self.cumulative_bytes = 0
        self.history: list[RoundMetrics] = []

    def evaluate(self) -> float | None:
        if self.test_set is None:
            return None
        x, y = self.test_set
        return nn.training_accuracy(self.spec, self.params, x, y)

    def step(self) -> RoundMetrics:
        masks = self.schedule.matrices(self.t)
        self.params, self.state, m = run_round(self.t, self.spec, self.params, self.state, self.config, masks,
                                               self.datasets, self.cumulative_bytes)
        self.cumulative_bytes = m.cumulative_bytes
        if self.eval_every and (self.t + 1) % self.eval_every == 0:
            m.test_acc = self.evaluate()
        self.history.append(m)
        self.t += 1
        log.debug("round %d median acc %.3f", m.round, m.median_train_acc)
        return m

    def run(self, rounds: int) -> list[RoundMetrics]:
        return [self.step() for _ in range(rounds)]
