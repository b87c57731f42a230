"""Total DFAs, interval labelling of the output space, and the inflated
successor-state sets used by the Bellman operators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sgsynth.errors import ConfigurationError, PartitionCoverageError

__all__ = [
    "Dfa",
    "LabelMap",
    "dfa_step",
    "label_of",
    "initial_product_state",
    "labels_within_ball",
    "q_eps_set",
]


@dataclass(frozen=True)
class Dfa:
    """A total deterministic finite automaton over a finite alphabet.

    States are indices 0..n_states-1; ``table[q, a]`` is the successor of
    state q on the symbol with alphabet index a. Totality is validated at
    construction, never auto-completed.
    """

    n_states: int
    initial: int
    alphabet: tuple[str, ...]
    table: np.ndarray  # (n_states, n_symbols) int
    accepting: frozenset[int]

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", table)
        if table.shape != (self.n_states, len(self.alphabet)):
            raise ConfigurationError(
                f"transition table shape {table.shape} does not match "
                f"{self.n_states} states x {len(self.alphabet)} symbols"
            )
        if np.any(table < 0) or np.any(table >= self.n_states):
            raise ConfigurationError("transition table contains an out-of-range state")
        if not (0 <= self.initial < self.n_states):
            raise ConfigurationError("initial state out of range")
        if not all(0 <= q < self.n_states for q in self.accepting):
            raise ConfigurationError("accepting set contains an out-of-range state")

    @property
    def symbol_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.alphabet)}

    def accepting_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.accepting)] = True
        return mask

    @classmethod
    def from_transitions(cls, n_states, initial, alphabet, transitions, accepting) -> "Dfa":
        """Build from explicit (q, symbol, q') triples; reject partial tables."""
        alphabet = tuple(alphabet)
        idx = {s: i for i, s in enumerate(alphabet)}
        table = np.full((n_states, len(alphabet)), -1, dtype=np.int64)
        for q, sym, q2 in transitions:
            if sym not in idx:
                raise ConfigurationError(f"transition uses unknown symbol {sym!r}")
            if table[q, idx[sym]] != -1 and table[q, idx[sym]] != q2:
                raise ConfigurationError(f"conflicting transitions for ({q}, {sym!r})")
            table[q, idx[sym]] = q2
        missing = np.argwhere(table < 0)
        if missing.size:
            q, a = missing[0]
            raise ConfigurationError(
                f"DFA is not total: no transition for state {q} on symbol {alphabet[a]!r}"
            )
        return cls(n_states, initial, alphabet, table, frozenset(accepting))


@dataclass(frozen=True)
class LabelMap:
    """Ordered axis-aligned box regions labelling the output space.

    Boxes are closed and may be unbounded; ties on shared boundaries resolve
    to the earliest region in the list. The absorbing output of a finite
    abstraction is not a numeric point and carries ``absorbing_symbol``.
    """

    box_lo: np.ndarray  # (n_regions, q)
    box_hi: np.ndarray  # (n_regions, q)
    symbols: tuple[str, ...]
    absorbing_symbol: str
    alphabet: tuple[str, ...] = field(default=())

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.box_lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.box_hi, dtype=float))
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)
        if lo.shape != hi.shape or lo.shape[0] != len(self.symbols):
            raise ConfigurationError("label regions malformed")
        if np.any(lo > hi):
            raise ConfigurationError("label region with lo > hi")
        if self.alphabet:
            known = set(self.alphabet)
            for s in (*self.symbols, self.absorbing_symbol):
                if s not in known:
                    raise ConfigurationError(f"label symbol {s!r} not in DFA alphabet")
        self._check_disjoint()

    @property
    def dim(self) -> int:
        return self.box_lo.shape[1]

    def _check_disjoint(self):
        # Overlapping interiors mean an ambiguous partition; shared faces are fine.
        n = len(self.symbols)
        for i in range(n):
            for j in range(i + 1, n):
                lo = np.maximum(self.box_lo[i], self.box_lo[j])
                hi = np.minimum(self.box_hi[i], self.box_hi[j])
                if np.all(lo < hi):
                    raise ConfigurationError(
                        f"label regions {i} ({self.symbols[i]!r}) and {j} "
                        f"({self.symbols[j]!r}) overlap with positive volume"
                    )

    def validate_coverage(self, lo, hi, points_per_dim=101):
        """Probe a grid over [lo, hi] and fail on the first uncovered point."""
        axes = [np.linspace(l, h, points_per_dim) for l, h in zip(np.atleast_1d(lo), np.atleast_1d(hi))]
        mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
        inside = np.zeros(mesh.shape[0], dtype=bool)
        for i in range(len(self.symbols)):
            inside |= np.all((mesh >= self.box_lo[i]) & (mesh <= self.box_hi[i]), axis=1)
        if not inside.all():
            y = mesh[~inside][0]
            raise PartitionCoverageError(f"output point {y} is not covered by any label region")


def dfa_step(dfa: Dfa, q: int, symbol: str) -> int:
    """Successor state of q on the given symbol."""
    try:
        a = dfa.symbol_index[symbol]
    except KeyError:
        raise ConfigurationError(f"unknown symbol {symbol!r}") from None
    return int(dfa.table[q, a])


def label_of(label_map: LabelMap, y) -> str:
    """Symbol of the first region containing the output point y.

    The absorbing output sentinel (y is None) maps to the absorbing symbol.
    """
    if y is None:
        return label_map.absorbing_symbol
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise ConfigurationError(f"non-finite output point {y}")
    hit = np.all((y >= label_map.box_lo) & (y <= label_map.box_hi), axis=1)
    idx = np.argmax(hit)
    if not hit[idx]:
        raise PartitionCoverageError(f"output point {y} is not covered by any label region")
    return label_map.symbols[idx]


def initial_product_state(dfa: Dfa, label_map: LabelMap, y0) -> int:
    """Monitor state after reading the label of the initial output."""
    return dfa_step(dfa, dfa.initial, label_of(label_map, y0))


def _box_distances(label_map: LabelMap, y: np.ndarray) -> np.ndarray:
    """Euclidean distance from y to each closed region box."""
    gap = np.maximum(label_map.box_lo - y, 0.0) + np.maximum(y - label_map.box_hi, 0.0)
    return np.sqrt((gap**2).sum(axis=1))


def labels_within_ball(label_map: LabelMap, y_hat, eps: float) -> frozenset[str]:
    """All symbols whose region intersects the closed eps-ball around y_hat.

    The sentinel (y_hat is None) yields the absorbing symbol alone: the
    absorbing output is not a point of the metric output space.
    """
    if eps < 0:
        raise ConfigurationError("eps must be nonnegative")
    if y_hat is None:
        return frozenset({label_map.absorbing_symbol})
    y = np.atleast_1d(np.asarray(y_hat, dtype=float))
    dist = _box_distances(label_map, y)
    out = {label_map.symbols[i] for i in np.nonzero(dist <= eps)[0]}
    if not out:
        raise PartitionCoverageError(f"no label region within {eps} of {y}")
    return frozenset(out)


def q_eps_set(dfa: Dfa, label_map: LabelMap, q: int, y_hat, eps: float) -> frozenset[int]:
    """Monitor successors reachable from q under any label near y_hat."""
    return frozenset(dfa_step(dfa, q, s) for s in labels_within_ball(label_map, y_hat, eps))
