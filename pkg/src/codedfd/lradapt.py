"""Fast server learning-rate search run as lockstep parallel FL sessions.

All learning-rate arithmetic happens in log10 space. The first step tries
{eta0 - d, eta0, eta0 + d}; each later step halves d and tries the two points
around the best value found so far. A session stops when the window-averaged
median client accuracy reaches the target, or when it has run as many rounds
as the current best. ``r`` always counts completed rounds.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .errors import EmptyHistory, NoCandidateReachedTarget

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "eta_log10", "round", "median_acc", "window_mean", "aborted", "reached")


class Session(Protocol):
    def step(self): ...


@dataclass
class AdaptationConfig:
    gamma_target: float = 20 / 62
    window: int = 10
    steps: int = 3
    eta0: float = 0.0
    delta_eta0: float = 1.0
    max_rounds: int = 500

    def __post_init__(self):
        if not 0.0 < self.gamma_target < 1.0:
            raise ValueError("gamma_target must lie in (0, 1)")
        if self.window < 1 or self.max_rounds < 1:
            raise ValueError("window and max_rounds must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class SessionResult:
    step: int
    eta_log10: float
    rounds_run: int = 0
    reached: bool = False
    medians: list[float] = field(default_factory=list)

    @property
    def eta(self) -> float:
        return 10.0**self.eta_log10


@dataclass
class AdaptationResult:
    eta_star_log10: float
    r_star: int
    r0_star: int
    step_r_stars: list[int]
    rounds_executed: int
    sessions: list[SessionResult]
    log_rows: list[tuple]

    @property
    def eta_star(self) -> float:
        return 10.0**self.eta_star_log10

    @property
    def candidates_tried(self) -> int:
        return len(self.sessions)

    @property
    def overhead(self) -> int:
        return overhead_rounds(self.r0_star, self.step_r_stars, self.r_star)

    @property
    def measured_overhead(self) -> int:
        """Rounds actually executed beyond the single session kept for training."""
        return self.rounds_executed - self.r_star

    def full_sessions_baseline(self, max_rounds: int) -> int:
        return (self.candidates_tried - 1) * max_rounds

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def median_window_accuracy(history: Sequence[Sequence[float]], q: int) -> float:
    """Mean over the last min(q, len(history)) rounds of the per-round median accuracy."""
    if not history:
        raise EmptyHistory("no rounds recorded yet")
    recent = history[-q:]
    return float(sum(statistics.median(r) for r in recent) / len(recent))


def overhead_rounds(r0_star: int, step_r_stars: Sequence[int], r_star: int) -> int:
    return 3 * r0_star + 2 * sum(step_r_stars) - r_star


def _client_accuracies(result) -> list[float]:
    return list(getattr(result, "client_accuracies", result))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for row in rows:
        step, eta, rnd, med, win, aborted, reached = row
        w.writerow([step, repr(float(eta)), rnd, _fmt(med), _fmt(win), int(aborted), int(reached)])
    return buf.getvalue()


def run_adaptation(factory: Callable[[float], Session], config: AdaptationConfig) -> AdaptationResult:
    """Search the server learning rate; ``factory(eta)`` returns a fresh session.

    Each session's ``step()`` runs one round and returns the per-client
    training accuracies (or an object with a ``client_accuracies`` attribute).
    Sessions reaching the target on the same round are tie-broken towards the
    smaller learning rate.
    """
    r_star = config.max_rounds
    eta_star: float | None = None
    delta = config.delta_eta0
    candidates = [config.eta0 - delta, config.eta0, config.eta0 + delta]
    r0_star = 0
    step_bests: list[int] = []
    results: list[SessionResult] = []
    rows: list[tuple] = []
    executed = 0

    for s in range(config.steps + 1):
        live = [(SessionResult(s, h), factory(10.0**h), []) for h in sorted(candidates)]
        results += [res for res, _, _ in live]
        last_row = {}
        r = 0
        while r < r_star:
            r += 1
            reached = []
            for res, session, history in live:
                history.append(_client_accuracies(session.step()))
                executed += 1
                res.rounds_run = r
                med = statistics.median(history[-1])
                res.medians.append(float(med))
                gbar = median_window_accuracy(history, config.window)
                hit = gbar >= config.gamma_target
                last_row[id(res)] = len(rows)
                rows.append([s, res.eta_log10, r, med, gbar, False, hit])
                if hit:
                    res.reached = True
                    reached.append(res.eta_log10)
            if reached:
                # every live session has now run r = r* rounds, so all stop here
                r_star, eta_star = r, min(reached)
                log.info("step %d: eta=10^%.4g reached the target in %d rounds", s, eta_star, r)
                break
        for res, _, _ in live:
            if not res.reached and id(res) in last_row:
                rows[last_row[id(res)]][5] = True
        if eta_star is None:
            raise NoCandidateReachedTarget(
                f"no learning rate in {sorted(candidates)} (log10) reached {config.gamma_target:.4f} "
                f"within {config.max_rounds} rounds", [tuple(r_) for r_ in rows])
        if s == 0:
            r0_star = r_star
        else:
            step_bests.append(r_star)
        delta /= 2
        candidates = [eta_star - delta, eta_star + delta]

    return AdaptationResult(eta_star, r_star, r0_star, step_bests, executed, results, [tuple(r_) for r_ in rows])


class QuadraticStubSession:
    """Deterministic stand-in session: accuracy jumps from 0 to 1 on a fixed round.

    The round is ``base + round(curvature * (log10 eta - center)^2)``; with a
    window of q rounds the target gamma is crossed once enough 1.0 rounds have
    accumulated. Used to test the search and the overhead accounting.
    """

    def __init__(self, eta: float, center: float = -1.75, curvature: float = 40.0, base: int = 20,
                 clients: int = 3):
        self.target_round = stub_rounds_to_jump(math.log10(eta), center, curvature, base)
        self.clients = clients
        self.rounds = 0

    def step(self) -> list[float]:
        self.rounds += 1
        value = 1.0 if self.rounds >= self.target_round else 0.0
        return [value] * self.clients


def stub_rounds_to_jump(eta_log10: float, center: float, curvature: float, base: int) -> int:
    return int(base + round(curvature * (eta_log10 - center) ** 2))
