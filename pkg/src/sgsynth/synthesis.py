"""Max-min / min-max value iteration over the abstraction-monitor product,
policy extraction, and guarantee evaluation at concrete initial states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from sgsynth._kernels import bellman_backup_dense, bellman_backup_sparse
from sgsynth.abstraction import FiniteAbstraction
from sgsynth.dfa import Dfa, LabelMap, initial_product_state, labels_within_ball, q_eps_set
from sgsynth.errors import ConfigurationError
from sgsynth.model import ReducedOrderGame
from sgsynth.relation import RelationCertificate, initial_abstract_state

__all__ = [
    "ValueTable",
    "PolicyTable",
    "SynthesisResult",
    "ProductGeometry",
    "successor_q_min",
    "successor_q_max",
    "bellman_sat_step",
    "bellman_vio_step",
    "synthesize",
    "evaluate_fixed_policy",
    "guarantee_at",
]

PROBLEMS = ("satisfaction", "violation")


@dataclass
class ValueTable:
    """Value over (abstract state, monitor state) after n sweeps."""

    values: np.ndarray  # (n_states, n_q)
    horizon: int

    def validate(self, accepting_mask):
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise ConfigurationError("value entries left [0, 1]")
        if self.horizon >= 0 and not np.allclose(self.values[:, accepting_mask], 1.0):
            raise ConfigurationError("accepting-state values must be pinned at 1")


@dataclass
class PolicyTable:
    """Time-indexed lookup table of synthesis-input choices.

    ``choices[k, x, q]`` indexes into the synthesis input subset; the optional
    adversary table records the worst-case response at the chosen input.
    """

    choices: np.ndarray  # (H, n_states, n_q) int64
    problem: str
    adversary: Optional[np.ndarray] = None  # (H, n_states, n_q) int64

    @property
    def horizon(self) -> int:
        return self.choices.shape[0]


@dataclass
class SynthesisResult:
    policy: PolicyTable
    final_values: ValueTable
    dfa: Dfa
    label_map: LabelMap
    eps: float
    problem: str
    output_matrix: np.ndarray  # concrete output map, for initial-state labels
    value_history: Optional[list] = None


@dataclass
class ProductGeometry:
    """Iteration-independent product data: the kernel restricted to the
    synthesis input subset and the candidate monitor-successor sets."""

    n_states: int
    n_u: int
    n_w: int
    accepting: np.ndarray  # (n_q,) bool
    cand_mask: np.ndarray  # (n_states, n_q, n_q) bool
    t_matrix: Optional[np.ndarray] = None
    indptr: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    data: Optional[np.ndarray] = None
    truncated: Optional[np.ndarray] = None

    @property
    def n_q(self) -> int:
        return self.accepting.shape[0]

    def backup(self, v, maximize_u, trunc_value):
        if self.t_matrix is not None:
            return bellman_backup_dense(self.t_matrix, v, self.n_states, self.n_u, self.n_w, maximize_u)
        return bellman_backup_sparse(
            self.indptr, self.indices, self.data, self.truncated, trunc_value,
            v, self.n_states, self.n_u, self.n_w, maximize_u,
        )

    def row_values(self, v, trunc_value) -> np.ndarray:
        """(n_states, n_u, n_w) expected next values, for fixed-policy sweeps."""
        if self.t_matrix is not None:
            y = self.t_matrix @ v
        else:
            prod = self.data * v[self.indices]
            y = np.add.reduceat(prod, self.indptr[:-1]) + self.truncated * trunc_value
        return y.reshape(self.n_states, self.n_u, self.n_w)


def build_geometry(
    abstraction: FiniteAbstraction,
    dfa: Dfa,
    label_map: LabelMap,
    eps: float,
) -> ProductGeometry:
    """Precompute the product structure once per synthesis run.

    Label sets use the eps-ball around each abstract output; the absorbing
    state contributes its designated symbol alone. The kernel's input axis is
    restricted to the synthesis subset so the backup extremes range over it.
    """
    kernel = abstraction.kernel
    if kernel is None:
        raise ConfigurationError("abstraction has no kernel; run the abstraction stage first")
    n_q = dfa.n_states
    n_states = abstraction.n_states
    centers = abstraction.state_centers()

    # Candidate monitor successors per (abstract state, monitor state).
    cand_mask = np.zeros((n_states, n_q, n_q), dtype=bool)
    sym_index = dfa.symbol_index
    for x in range(n_states):
        if x == abstraction.phi_index:
            symbols = frozenset({label_map.absorbing_symbol})
        else:
            symbols = labels_within_ball(label_map, abstraction.output_of(centers[x]), eps)
        for q in range(n_q):
            for sym in symbols:
                cand_mask[x, q, dfa.table[q, sym_index[sym]]] = True

    u_idx = abstraction.u_prime_indices()
    n_u, n_w = u_idx.shape[0], kernel.n_w
    geo = ProductGeometry(
        n_states=n_states,
        n_u=n_u,
        n_w=n_w,
        accepting=dfa.accepting_mask(),
        cand_mask=cand_mask,
    )
    if kernel.mode == "dense":
        geo.t_matrix = np.ascontiguousarray(
            kernel.dense[:, u_idx, :, :].reshape(n_states * n_u * n_w, n_states)
        )
    else:
        keep_rows = (
            (np.arange(n_states)[:, None, None] * kernel.n_u + u_idx[None, :, None]) * kernel.n_w
            + np.arange(n_w)[None, None, :]
        ).ravel()
        counts = np.diff(kernel.indptr)[keep_rows]
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        # Gather each kept row's entry span without a per-row Python loop.
        take = np.repeat(kernel.indptr[keep_rows] - indptr[:-1], counts) + np.arange(indptr[-1])
        geo.indptr = indptr
        geo.indices = kernel.indices[take]
        geo.data = kernel.data[take]
        geo.truncated = kernel.truncated[keep_rows]
    return geo


def _successor_q(dfa, label_map, values, y_hat, q, eps, minimize):
    candidates = sorted(q_eps_set(dfa, label_map, q, y_hat, eps))
    picks = np.array([values[c] for c in candidates])
    best = np.argmin(picks) if minimize else np.argmax(picks)
    return int(candidates[best])


def successor_q_min(dfa, label_map, values, y_hat, q, eps) -> int:
    """Monitor successor minimizing the value row over the inflated candidate
    set; ties break to the smallest state index. ``values`` is the row of the
    value table at the successor abstract state and ``y_hat`` its output."""
    return _successor_q(dfa, label_map, values, y_hat, q, eps, minimize=True)


def successor_q_max(dfa, label_map, values, y_hat, q, eps) -> int:
    """Maximizing counterpart of :func:`successor_q_min`."""
    return _successor_q(dfa, label_map, values, y_hat, q, eps, minimize=False)


def _relabel(geo: ProductGeometry, values: np.ndarray, minimize: bool) -> np.ndarray:
    """Per (state, source-q): extreme of V over the candidate successor set."""
    expanded = np.broadcast_to(values[:, None, :], geo.cand_mask.shape)
    if minimize:
        filled = np.where(geo.cand_mask, expanded, np.inf)
        return filled.min(axis=2)
    filled = np.where(geo.cand_mask, expanded, -np.inf)
    return filled.max(axis=2)


def _bellman_step(geo: ProductGeometry, delta: float, problem: str, values: np.ndarray):
    """One synchronous sweep; returns (V', input argext, adversary argext)."""
    sat = problem == "satisfaction"
    relabeled = _relabel(geo, values, minimize=sat)
    v_next = np.empty_like(values)
    u_star = np.zeros((geo.n_states, geo.n_q), dtype=np.int64)
    w_star = np.zeros((geo.n_states, geo.n_q, geo.n_u), dtype=np.int64)
    trunc_value = 0.0 if sat else 1.0
    for q in range(geo.n_q):
        if geo.accepting[q]:
            v_next[:, q] = 1.0
            continue
        val, us, ws = geo.backup(np.ascontiguousarray(relabeled[:, q]), sat, trunc_value)
        v_next[:, q] = (1.0 - delta) * val + (0.0 if sat else delta)
        u_star[:, q] = us
        w_star[:, q, :] = ws
    # Values live in [0, 1] exactly; clipping only removes accumulation dust.
    np.clip(v_next, 0.0, 1.0, out=v_next)
    return v_next, u_star, w_star


def initial_values(geo: ProductGeometry) -> np.ndarray:
    v0 = np.zeros((geo.n_states, geo.n_q))
    v0[:, geo.accepting] = 1.0
    return v0


def bellman_sat_step(abstraction, dfa, label_map, cert, values, geometry=None):
    """One satisfaction sweep: max over inputs of the adversary's min, scaled
    by the coupling success probability; accepting states stay at 1."""
    geo = geometry or build_geometry(abstraction, dfa, label_map, cert.eps)
    return _bellman_step(geo, cert.delta, "satisfaction", np.asarray(values, dtype=float))


def bellman_vio_step(abstraction, dfa, label_map, cert, values, geometry=None):
    """One violation sweep: min over inputs of the adversary's max, with the
    coupling slack added as unconditional violation mass."""
    geo = geometry or build_geometry(abstraction, dfa, label_map, cert.eps)
    return _bellman_step(geo, cert.delta, "violation", np.asarray(values, dtype=float))


def synthesize(
    abstraction: FiniteAbstraction,
    dfa: Dfa,
    label_map: LabelMap,
    cert: RelationCertificate,
    horizon: int,
    problem: str,
    keep_history: bool = False,
    output_matrix=None,
) -> SynthesisResult:
    """Run the full backward recursion and collect the policy tables.

    The sweep computing V_{n+1} from V_n yields the policy for time index
    H-n-1, so the table is filled back to front.
    """
    if problem not in PROBLEMS:
        raise ConfigurationError(f"problem must be one of {PROBLEMS}")
    geo = build_geometry(abstraction, dfa, label_map, cert.eps)
    values = initial_values(geo)
    choices = np.zeros((horizon, geo.n_states, geo.n_q), dtype=np.int64)
    adversary = np.zeros((horizon, geo.n_states, geo.n_q), dtype=np.int64)
    history = [values.copy()] if keep_history else None
    for n in range(horizon):
        values, u_star, w_star = _bellman_step(geo, cert.delta, problem, values)
        k = horizon - n - 1
        choices[k] = u_star
        adversary[k] = np.take_along_axis(w_star, u_star[:, :, None], axis=2)[:, :, 0]
        if keep_history:
            history.append(values.copy())
    table = ValueTable(values=values, horizon=horizon)
    table.validate(geo.accepting)
    policy = PolicyTable(choices=choices, problem=problem, adversary=adversary)
    return SynthesisResult(
        policy=policy,
        final_values=table,
        dfa=dfa,
        label_map=label_map,
        eps=cert.eps,
        problem=problem,
        output_matrix=None if output_matrix is None else np.atleast_2d(np.asarray(output_matrix, dtype=float)),
        value_history=history,
    )


def evaluate_fixed_policy(
    abstraction: FiniteAbstraction,
    dfa: Dfa,
    label_map: LabelMap,
    cert: RelationCertificate,
    policy: PolicyTable,
    horizon: int,
    problem: str,
) -> ValueTable:
    """Value of a given input policy against the per-step worst adversary."""
    if policy.horizon < horizon:
        raise ConfigurationError(f"policy covers {policy.horizon} steps, horizon is {horizon}")
    geo = build_geometry(abstraction, dfa, label_map, cert.eps)
    sat = problem == "satisfaction"
    trunc_value = 0.0 if sat else 1.0
    values = initial_values(geo)
    states = np.arange(geo.n_states)
    for n in range(horizon):
        relabeled = _relabel(geo, values, minimize=sat)
        v_next = np.empty_like(values)
        k = horizon - n - 1
        for q in range(geo.n_q):
            if geo.accepting[q]:
                v_next[:, q] = 1.0
                continue
            rows = geo.row_values(np.ascontiguousarray(relabeled[:, q]), trunc_value)
            picked = rows[states, policy.choices[k, :, q], :]
            inner = picked.min(axis=1) if sat else picked.max(axis=1)
            v_next[:, q] = (1.0 - cert.delta) * inner + (0.0 if sat else cert.delta)
        values = np.clip(v_next, 0.0, 1.0)
    table = ValueTable(values=values, horizon=horizon)
    table.validate(geo.accepting)
    return table


def guarantee_at(
    result: SynthesisResult,
    cert: RelationCertificate,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    x0,
) -> dict:
    """Certified probability bound at a concrete initial state.

    Lower bound on satisfaction for the satisfaction problem, upper bound on
    violation for the violation problem; the initial product state reads the
    concrete output's label.
    """
    if result.output_matrix is None:
        raise ConfigurationError("synthesis result lacks the concrete output matrix")
    x0 = np.asarray(x0, dtype=float).ravel()
    x_hat0 = initial_abstract_state(cert, red, abstraction, x0)
    q0 = initial_product_state(result.dfa, result.label_map, result.output_matrix @ x0)
    value = float(result.final_values.values[x_hat0, q0])
    kind = "satisfaction_lower" if result.problem == "satisfaction" else "violation_upper"
    return {"bound": value, "kind": kind, "abstract_state": int(x_hat0), "monitor_state": int(q0)}
