"""Binary codeword matrices used as per-client dropout masks.

Four ways of building a layer's mask matrix are provided: one random codeword
shared by every client, independent random codewords, Gold sequences padded to
the layer width, and greedy lexicographic constant weight codes. Bit sequences
are plain ``numpy`` arrays of ``uint8`` holding 0/1.
"""

from __future__ import annotations

import enum
import functools
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegreeMismatch,
    Infeasible,
    LengthMismatch,
    NonPrimitivePolynomial,
    StrategyInfeasible,
    UnsupportedDegree,
)

# degree -> (taps of polynomial 1, taps of polynomial 2); taps are the nonzero
# exponents of 1 + sum(x^t).
PREFERRED_PAIRS: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {
    5: ((5, 2), (5, 4, 3, 2)),
    # the published degree-6 pair lists 1 + x^6, which is not primitive
    6: ((6, 1), (6, 5, 2, 1)),
    7: ((7, 3), (7, 3, 2, 1)),
    9: ((9, 4), (9, 6, 4, 3)),
    10: ((10, 3), (10, 8, 3, 2)),
    11: ((11, 8, 5, 2), (11, 2)),
}

DEFAULT_CWC_MAX_ITERS = 10**6


def as_bits(u) -> np.ndarray:
    """Coerce a sequence or a '0101' string into a 0/1 ``uint8`` vector."""
    if isinstance(u, str):
        u = [int(ch) for ch in u]
    arr = np.asarray(u, dtype=np.uint8).ravel()
    if arr.size and arr.max() > 1:
        raise ValueError("bit sequence must contain only 0 and 1")
    return arr


def hamming_weight(u) -> int:
    return int(as_bits(u).sum())


def hamming_distance(u1, u2) -> int:
    a, b = as_bits(u1), as_bits(u2)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    return int(np.count_nonzero(a ^ b))


def _bipolar(u: np.ndarray) -> np.ndarray:
    return 2 * u.astype(np.int64) - 1


def cross_correlation_unnormalized(u1, u2, shift: int) -> int:
    """Sum over j of u1_j * u2_{(j+shift) mod L} with bits mapped to -1/+1."""
    a, b = as_bits(u1), as_bits(u2)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    return int(np.dot(_bipolar(a), np.roll(_bipolar(b), -shift)))


def cross_correlation(u1, u2, shift: int) -> float:
    """Normalized correlation: the unnormalized sum divided by the length."""
    a = as_bits(u1)
    return cross_correlation_unnormalized(a, u2, shift) / a.size


def correlation_table(seqs: np.ndarray) -> np.ndarray:
    """All unnormalized cyclic correlations, shape (K, K, L).

    ``table[i, j, l]`` equals ``cross_correlation_unnormalized(seqs[i], seqs[j], l)``.
    Values are small integers, so the float64 matrix products are exact.
    """
    s = _bipolar(np.asarray(seqs)).astype(np.float64)
    k, length = s.shape
    out = np.empty((k, k, length), dtype=np.int64)
    for shift in range(length):
        out[:, :, shift] = np.rint(s @ np.roll(s, -shift, axis=1).T).astype(np.int64)
    return out


def max_pairwise_cross_correlation(seqs: np.ndarray) -> int:
    """Max over distinct pairs and all shifts of the unnormalized |R|."""
    table = np.abs(correlation_table(seqs))
    k = table.shape[0]
    table[np.arange(k), np.arange(k), :] = 0
    return int(table.max())


def min_pairwise_distance(rows: np.ndarray) -> int:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[0] < 2:
        return rows.shape[1]
    d = rows @ (1 - rows).T
    d = d + d.T
    np.fill_diagonal(d, rows.shape[1] + 1)
    return int(d.min())


def gold_correlation_bound(degree: int) -> int:
    return 2 ** ((degree + 2) // 2) + 1


@dataclass(frozen=True)
class LfsrSpec:
    degree: int
    taps: tuple[int, ...]
    initial_state: tuple[int, ...] = ()

    def __post_init__(self):
        taps = tuple(sorted({int(t) for t in self.taps}, reverse=True))
        if self.degree < 1 or not taps or taps[0] != self.degree or taps[-1] < 1:
            raise ValueError(f"taps {self.taps} do not describe a degree-{self.degree} polynomial")
        object.__setattr__(self, "taps", taps)
        state = tuple(self.initial_state) or (0,) * (self.degree - 1) + (1,)
        if len(state) != self.degree or any(b not in (0, 1) for b in state):
            raise ValueError("initial_state must be a 0/1 vector of length degree")
        object.__setattr__(self, "initial_state", state)

    @property
    def period(self) -> int:
        return 2**self.degree - 1


def lfsr_m_sequence(spec: LfsrSpec) -> np.ndarray:
    """One period of the sequence s_k = XOR_{t in taps} s_{k-t}.

    The first ``degree`` outputs are the initial state. Raises
    ``NonPrimitivePolynomial`` unless the state returns to its start after
    exactly 2^degree - 1 steps.
    """
    n = spec.degree
    if not any(spec.initial_state):
        raise NonPrimitivePolynomial("all-zero initial state is a fixed point of the LFSR")
    length = spec.period
    seq = list(spec.initial_state)
    start = tuple(spec.initial_state)
    period = None
    k = n
    while k < n + length:
        bit = 0
        for t in spec.taps:
            bit ^= seq[k - t]
        seq.append(bit)
        k += 1
        if tuple(seq[k - n : k]) == start:
            period = k - n
            break
    if period != length:
        raise NonPrimitivePolynomial(
            f"taps {spec.taps} give period {period or 'above ' + str(length)}, expected {length}"
        )
    return np.array(seq[:length], dtype=np.uint8)


def preferred_pair(degree: int) -> tuple[LfsrSpec, LfsrSpec]:
    if degree % 4 == 0:
        raise UnsupportedDegree(f"Gold sequences of degree {degree} (multiple of 4) are not supported")
    if degree not in PREFERRED_PAIRS:
        raise UnsupportedDegree(f"no preferred polynomial pair tabulated for degree {degree}")
    t1, t2 = PREFERRED_PAIRS[degree]
    return LfsrSpec(degree, t1), LfsrSpec(degree, t2)


def gold_family(poly1: LfsrSpec, poly2: LfsrSpec) -> np.ndarray:
    """The 2^n + 1 Gold sequences of length 2^n - 1, one per row.

    Rows 0 and 1 are the two m-sequences; row 2 + l is m1 XOR (m2 shifted left by l).
    """
    if poly1.degree != poly2.degree:
        raise DegreeMismatch(f"degrees differ: {poly1.degree} vs {poly2.degree}")
    if poly1.degree % 4 == 0:
        raise UnsupportedDegree(f"Gold sequences of degree {poly1.degree} (multiple of 4) are not supported")
    m1 = lfsr_m_sequence(poly1)
    m2 = lfsr_m_sequence(poly2)
    shifted = np.stack([np.roll(m2, -l) for l in range(m2.size)])
    return np.vstack([m1, m2, m1[None, :] ^ shifted])


@functools.lru_cache(maxsize=None)
def gold_family_for_degree(degree: int) -> np.ndarray:
    """The (read-only, cached) Gold family built from the tabulated preferred pair."""
    fam = gold_family(*preferred_pair(degree))
    fam.setflags(write=False)
    return fam


def pad_after_longest_zero_run(u, target_len: int) -> np.ndarray:
    """Insert zeros right after the longest run of zeros until ``target_len``.

    Runs are scanned left to right without wrap-around; the first of equally
    long runs wins. A sequence without zeros is padded at the end.
    """
    u = as_bits(u)
    if target_len < u.size:
        raise ValueError("target_len shorter than the sequence")
    extra = target_len - u.size
    if extra == 0:
        return u.copy()
    best_end, best_len, run = u.size, 0, 0
    for j, bit in enumerate(u):
        run = run + 1 if bit == 0 else 0
        if run > best_len:
            best_len, best_end = run, j + 1
    return np.concatenate([u[:best_end], np.zeros(extra, dtype=np.uint8), u[best_end:]])


class CodeStrategy(str, enum.Enum):
    RANDOM_SAME = "random_same"
    RANDOM_DISTINCT = "random_distinct"
    GOLD = "gold"
    CWC = "cwc"

    @classmethod
    def parse(cls, value) -> "CodeStrategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"same": "random_same", "fd": "random_same", "random": "random_distinct",
                   "distinct": "random_distinct"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown code strategy {value!r}") from None


def keep_weight(layer_width: int, alpha: float) -> int:
    w = layer_width * (1.0 - alpha)
    if abs(w - round(w)) > 1e-9:
        raise StrategyInfeasible(f"(1 - alpha) * N = {w} is not an integer for N={layer_width}, alpha={alpha}")
    return int(round(w))


@dataclass
class MaskMatrix:
    rows: np.ndarray
    layer_width: int
    keep_weight: int
    clients: int = 0
    alpha: float = 0.0
    strategy: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.uint8)
        if self.rows.ndim != 2:
            raise ValueError("mask rows must form a 2-D array")
        if not self.clients:
            self.clients = self.rows.shape[0]

    def __len__(self):
        return self.rows.shape[0]

    def row(self, k: int) -> np.ndarray:
        return self.rows[k]

    def check(self) -> None:
        """Raise ValueError if any of the three matrix properties is violated."""
        if self.rows.shape[1] != self.layer_width:
            raise ValueError(f"row length {self.rows.shape[1]} != layer width {self.layer_width}")
        weights = self.rows.sum(axis=1)
        if np.any(weights != self.keep_weight):
            raise ValueError(f"row weights {sorted(set(weights.tolist()))} != {self.keep_weight}")
        if self.rows.shape[0] < self.clients:
            raise ValueError(f"{self.rows.shape[0]} rows for {self.clients} clients")

    def shuffled(self, rng: np.random.Generator) -> "MaskMatrix":
        """Row- and column-permuted copy; weights and pairwise distances are unchanged."""
        rows = self.rows[rng.permutation(self.rows.shape[0])][:, rng.permutation(self.layer_width)]
        return MaskMatrix(rows, self.layer_width, self.keep_weight, self.clients, self.alpha,
                          self.strategy, self.seed, dict(self.meta))

    def to_text(self) -> str:
        lines = [f"{self.layer_width} {self.clients} {self.alpha!r} {self.strategy or '-'} {self.seed}"]
        lines += ["".join("1" if b else "0" for b in row) for row in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "MaskMatrix":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty mask matrix file")
        parts = lines[0].split()
        if len(parts) != 5:
            raise ValueError(f"bad header {lines[0]!r}, expected 'N_i M alpha strategy seed'")
        width, clients, alpha, strategy, seed = int(parts[0]), int(parts[1]), float(parts[2]), parts[3], int(parts[4])
        rows = np.array([as_bits(ln) for ln in lines[1:]], dtype=np.uint8).reshape(-1, width)
        mm = cls(rows, width, keep_weight(width, alpha), clients, alpha,
                 "" if strategy == "-" else strategy, seed)
        mm.check()
        return mm

    @classmethod
    def load(cls, path) -> "MaskMatrix":
        return cls.from_text(Path(path).read_text())


def _unrank_lex(n: int, w: int, rank: int) -> np.ndarray:
    """The ``rank``-th (0-based) length-n weight-w word in ascending lexicographic order."""
    out = np.zeros(n, dtype=np.uint8)
    for pos in range(n):
        if w == 0:
            break
        # words with a 0 here come first
        zeros_first = math.comb(n - pos - 1, w)
        if rank >= zeros_first:
            rank -= zeros_first
            out[pos] = 1
            w -= 1
    return out


class _BudgetExhausted(Exception):
    pass


def _suffix_ones(word) -> list[int]:
    out = [0] * (len(word) + 1)
    for p in range(len(word) - 1, -1, -1):
        out[p] = out[p + 1] + int(word[p])
    return out


def _greedy_lexicode_pass(n: int, w: int, count: int, d_min: int, start, budget: int) -> list[list[int]]:
    """One greedy pass over the weight-w words in ascending lexicographic order.

    A word is kept when its distance to every kept word is >= d_min. Subtrees
    whose best reachable distance to some kept word is below d_min are pruned.
    Raises ``_BudgetExhausted`` after ``budget`` search-tree node visits.
    """
    code = [[int(b) for b in start]]
    suffix = [_suffix_ones(code[0])]
    # dists[p][c]: distance between the current path prefix [0, p) and code[c]
    dists = [[0] for _ in range(n + 1)]
    path = [0] * n
    visits = 0

    def visit(pos: int, ones_left: int) -> bool:
        nonlocal visits
        visits += 1
        if visits > budget:
            raise _BudgetExhausted
        if pos == n:
            # the new word equals the current path, so its prefix distance is 0 everywhere
            code.append(path[:])
            suffix.append(_suffix_ones(path))
            for row in dists:
                row.append(0)
            return len(code) >= count
        m = n - pos - 1
        prev = dists[pos]
        for bit in (0, 1):
            left = ones_left - bit
            if left < 0 or left > m:
                continue
            path[pos] = bit
            nxt = []
            for c, word in enumerate(code):
                d = prev[c] + (word[pos] ^ bit)
                k = suffix[c][pos + 1]
                over = left - m + k
                if d + k + left - (2 * over if over > 0 else 0) < d_min:
                    break
                nxt.append(d)
            else:
                dists[pos + 1] = nxt
                if visit(pos + 1, left):
                    return True
        return False

    visit(0, w)
    return code


def distance_upper_bound(n: int, w: int, count: int) -> int:
    """Largest even d that ``count`` weight-w words of length n can all keep pairwise.

    Column j holding k_j ones contributes k_j * (count - k_j) to the sum of
    pairwise distances; the sum is largest when the count * w ones are spread
    evenly, and the minimum distance cannot exceed the average.
    """
    if count < 2:
        return n
    q, r = divmod(count * w, n)
    total = r * (q + 1) * (count - q - 1) + (n - r) * q * (count - q)
    d = total // math.comb(count, 2)
    return d - d % 2


def cwc_generate(layer_width: int, count: int, alpha: float, max_iters: int = DEFAULT_CWC_MAX_ITERS,
                 seed: int = 0) -> tuple[MaskMatrix, int]:
    """Constant weight code of ``count`` words, greedily maximizing the minimum distance.

    Starting at d_min = N, each pass seeds the code with a random weight-w word
    and adds the lexicographically first words meeting the distance floor. A
    pass that runs out of candidates, or spends ``max_iters`` search-tree visits
    without completing, lowers d_min by 2 and restarts. Passes whose floor is
    above ``distance_upper_bound`` cannot succeed and are skipped (their random
    start is still drawn, so results do not depend on the shortcut).

    Returns the matrix and the distance floor it was built with.
    """
    n = layer_width
    w = keep_weight(n, alpha)
    total = math.comb(n, w)
    if count < 1:
        raise Infeasible("count must be positive")
    if count > total:
        raise Infeasible(f"only {total} words of length {n} and weight {w} exist, {count} requested")
    rng = random.Random(seed)
    meta = {"total_words": total, "exhausted_passes": 0}
    if count == 1:
        rows = _unrank_lex(n, w, rng.randrange(total))[None, :]
        return MaskMatrix(rows, n, w, 1, alpha, CodeStrategy.CWC.value, seed, meta), n
    ceiling = distance_upper_bound(n, w, count)
    d_min = n
    while d_min > 0:
        start = _unrank_lex(n, w, rng.randrange(total))
        if d_min <= ceiling:
            try:
                code = _greedy_lexicode_pass(n, w, count, d_min, start, max_iters)
            except _BudgetExhausted:
                meta["exhausted_passes"] += 1
                code = []
            if len(code) >= count:
                rows = np.array(code[:count], dtype=np.uint8)
                return MaskMatrix(rows, n, w, count, alpha, CodeStrategy.CWC.value, seed, meta), d_min
        d_min -= 2
    raise Infeasible(f"no {count}-word code of length {n}, weight {w} found within {max_iters} visits per pass")


def gold_mask_rows(layer_width: int, clients: int, seed: int = 0) -> np.ndarray:
    """Balanced Gold sequences zero-padded to ``layer_width`` (= 2^n).

    Only members of weight 2^(n-1) are used. When fewer than ``clients`` are
    balanced, column-shuffled copies of the padded set are appended (rows kept
    distinct) until there are enough.
    """
    degree = layer_width.bit_length() - 1
    if layer_width < 2 or 2**degree != layer_width:
        raise StrategyInfeasible(f"Gold masks need a power-of-two layer width, got {layer_width}")
    try:
        family = gold_family_for_degree(degree)
    except UnsupportedDegree as exc:
        raise StrategyInfeasible(str(exc)) from exc
    balanced = family[family.sum(axis=1) == 2 ** (degree - 1)]
    base = np.array([pad_after_longest_zero_run(u, layer_width) for u in balanced])
    rows = [tuple(r) for r in base]
    seen = set(rows)
    rng = np.random.default_rng(seed)
    while len(rows) < clients:
        for r in base[:, rng.permutation(layer_width)]:
            key = tuple(r)
            if key not in seen:
                seen.add(key)
                rows.append(key)
    return np.array(rows, dtype=np.uint8)


def random_codeword(layer_width: int, weight: int, rng: np.random.Generator) -> np.ndarray:
    template = np.zeros(layer_width, dtype=np.uint8)
    template[:weight] = 1
    return rng.permutation(template)


def build_mask_matrix(strategy, layer_width: int, clients: int, alpha: float, seed: int = 0,
                      max_iters: int = DEFAULT_CWC_MAX_ITERS) -> MaskMatrix:
    """Mask matrix for one layer with at least ``clients`` rows of weight N(1 - alpha)."""
    strategy = CodeStrategy.parse(strategy)
    if clients < 1:
        raise StrategyInfeasible("at least one client is required")
    if not 0.0 <= alpha < 1.0:
        raise StrategyInfeasible(f"alpha must lie in [0, 1), got {alpha}")
    w = keep_weight(layer_width, alpha)
    if w == 0:
        raise StrategyInfeasible(f"alpha={alpha} keeps no unit of a {layer_width}-wide layer")
    meta: dict = {}
    if strategy is CodeStrategy.RANDOM_SAME:
        rng = np.random.default_rng(seed)
        rows = np.tile(random_codeword(layer_width, w, rng), (clients, 1))
    elif strategy is CodeStrategy.RANDOM_DISTINCT:
        rng = np.random.default_rng(seed)
        rows = np.stack([random_codeword(layer_width, w, rng) for _ in range(clients)])
    elif strategy is CodeStrategy.GOLD:
        if abs(alpha - 0.5) > 1e-12:
            raise StrategyInfeasible(f"Gold masks only support alpha = 0.5, got {alpha}")
        rows = gold_mask_rows(layer_width, clients, seed)
        meta["degree"] = layer_width.bit_length() - 1
    else:
        mm, d_min = cwc_generate(layer_width, clients, alpha, max_iters, seed)
        rows = mm.rows
        meta.update(mm.meta, d_min=d_min)
    mm = MaskMatrix(rows, layer_width, w, clients, alpha, strategy.value, seed, meta)
    mm.check()
    return mm
