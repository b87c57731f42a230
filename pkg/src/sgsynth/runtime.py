"""Refined runtime controller (memory-state machine over the coupled models)
and the Monte Carlo closed-loop validation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from sgsynth.abstraction import FiniteAbstraction, project_w, rep_point
from sgsynth.dfa import Dfa, LabelMap, dfa_step, initial_product_state, label_of
from sgsynth.errors import ConfigurationError, HorizonExhausted, LiftingUnavailable
from sgsynth.model import ReducedOrderGame, StochasticGame, eval_dynamics
from sgsynth.relation import RelationCertificate, in_relation, initial_abstract_state, interface_input
from sgsynth.synthesis import SynthesisResult

__all__ = [
    "ControllerMemory",
    "SimulationReport",
    "RefinedController",
    "controller_init",
    "controller_output",
    "controller_update",
    "simulate_closed_loop",
    "trace_satisfied",
]


@dataclass(frozen=True)
class ControllerMemory:
    """Controller memory: concrete state, tracked abstract state, monitor
    state, the adversary's last move and its projection, and the time index."""

    x: np.ndarray
    x_hat: int
    q: int
    w_prev: Optional[np.ndarray]
    w_hat_prev: Optional[np.ndarray]
    k: int
    relation_violations: int = 0


@dataclass
class SimulationReport:
    runs: int
    satisfied: int
    rate: float
    ci_low: float
    ci_high: float
    acceptance_steps: list
    relation_violations: int
    seed: int
    adversary: dict
    horizon: int
    mean_step_ms: float = 0.0
    output_quantiles: Optional[dict] = None

    def deterministic_payload(self) -> dict:
        """Everything reproducible under a fixed seed; timing excluded."""
        return {
            "runs": self.runs,
            "satisfied": self.satisfied,
            "rate": self.rate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "acceptance_steps": self.acceptance_steps,
            "relation_violations": self.relation_violations,
            "seed": self.seed,
            "adversary": self.adversary,
            "horizon": self.horizon,
            "output_quantiles": self.output_quantiles,
        }


class RefinedController:
    """Definition-style refinement of a table policy to the concrete game.

    Tracks the abstract companion state by feeding the reduced model the same
    noise realization that drove the plant (supplied in simulation, recovered
    by pseudo-inverse in deployment).
    """

    def __init__(self, result: SynthesisResult, cert: RelationCertificate,
                 game: StochasticGame, red: ReducedOrderGame,
                 abstraction: FiniteAbstraction, dfa: Dfa, label_map: LabelMap):
        if red.R_r is None:
            raise ConfigurationError("reduced model lacks R_r; cannot track the abstract state")
        self.result = result
        self.cert = cert
        self.game = game
        self.red = red
        self.abstraction = abstraction
        self.dfa = dfa
        self.label_map = label_map
        self.u_prime = abstraction.u_prime_points()
        self._r_pinv = None
        d = game.R.shape[1]
        if np.linalg.matrix_rank(game.R) == d:
            self._r_pinv = np.linalg.pinv(game.R)

    def init(self, x0) -> ControllerMemory:
        x0 = np.asarray(x0, dtype=float).ravel()
        x_hat = initial_abstract_state(self.cert, self.red, self.abstraction, x0)
        q = initial_product_state(self.dfa, self.label_map, self.game.output(x0))
        return ControllerMemory(x=x0, x_hat=x_hat, q=q, w_prev=None, w_hat_prev=None, k=0)

    def abstract_input(self, mem: ControllerMemory) -> np.ndarray:
        if mem.k >= self.result.policy.horizon:
            raise HorizonExhausted(f"time index {mem.k} outside horizon {self.result.policy.horizon}")
        choice = int(self.result.policy.choices[mem.k, mem.x_hat, mem.q])
        return self.u_prime[choice]

    def output(self, mem: ControllerMemory) -> np.ndarray:
        u_hat = self.abstract_input(mem)
        x_hat_vec = self._center(mem.x_hat)
        u = interface_input(self.cert, self.game, self.red, mem.x, x_hat_vec, u_hat)
        return self._clamp_input(u)

    def _clamp_input(self, u: np.ndarray) -> np.ndarray:
        # The refinement theorem keeps u feasible while the relation holds;
        # after a relation break we still must hand the plant a legal input.
        ratios = (self.game.u_poly_A @ u) / self.game.u_poly_b
        worst = float(np.max(ratios))
        if worst <= 1.0 + 1e-12:
            return u
        return u / worst

    def update(self, mem: ControllerMemory, x_next, w_prev, noise=None) -> ControllerMemory:
        x_next = np.asarray(x_next, dtype=float).ravel()
        w_prev = np.asarray(w_prev, dtype=float).ravel()
        u_hat = self.abstract_input(mem)
        if noise is None:
            noise = self._recover_noise(mem, x_next, w_prev)
        else:
            noise = np.asarray(noise, dtype=float).ravel()
        w_hat = project_w(self.abstraction, w_prev)
        x_hat_vec = self._center(mem.x_hat)
        succ = (
            self.red.A_r @ x_hat_vec
            + (self.red.E_r @ self.red.phi(self.red.F_r @ x_hat_vec)).ravel()
            + (self.red.B_r @ u_hat).ravel()
            + (self.red.D_r @ w_hat).ravel()
            + (self.red.R_r @ noise).ravel()
        )
        x_hat_next = rep_point(self.abstraction, succ)
        violations = mem.relation_violations
        if x_hat_next == self.abstraction.phi_index:
            # Leaving the region breaks the relation (the value table already
            # charged for it); re-anchor so the loop can keep running.
            violations += 1
            x_hat_next = self._anchor(x_next)
        elif not in_relation(self.cert, self.red, x_next, self.abstraction.grid.center(x_hat_next)):
            violations += 1
        q_next = dfa_step(self.dfa, mem.q, label_of(self.label_map, self.game.output(x_next)))
        return ControllerMemory(
            x=x_next, x_hat=x_hat_next, q=q_next,
            w_prev=w_prev, w_hat_prev=w_hat, k=mem.k + 1,
            relation_violations=violations,
        )

    def _anchor(self, x) -> int:
        grid = self.abstraction.grid
        proj = np.linalg.solve(
            self.red.P.T @ self.cert.M @ self.red.P, self.red.P.T @ self.cert.M @ np.asarray(x, dtype=float).ravel()
        )
        clipped = np.clip(proj, grid.lo + grid.eta / 2, grid.hi - grid.eta / 2)
        return rep_point(self.abstraction, clipped)

    def _center(self, x_hat: int) -> np.ndarray:
        return self.abstraction.grid.center(x_hat)

    def _recover_noise(self, mem: ControllerMemory, x_next, w_prev) -> np.ndarray:
        if self._r_pinv is None:
            raise LiftingUnavailable(
                "noise recovery needs rank(R) = noise dimension; run in simulation mode"
            )
        u = self.output(mem)
        drift = (
            self.game.A @ mem.x
            + self.game.B @ u
            + (self.game.E @ self.game.phi(self.game.F @ mem.x)).ravel()
            + (self.game.D @ w_prev).ravel()
        )
        noise = self._r_pinv @ (x_next - drift)
        residual = x_next - drift - (self.game.R @ noise).ravel()
        if np.linalg.norm(residual) > 1e-6:
            logging.getLogger(__name__).warning(
                "state update is %.3e outside the noise range; model mismatch?",
                np.linalg.norm(residual),
            )
        return noise


def controller_init(result, cert, game, red, abstraction, dfa, label_map, x0) -> ControllerMemory:
    """Initial controller memory for a concrete initial state."""
    return RefinedController(result, cert, game, red, abstraction, dfa, label_map).init(x0)


def controller_output(mem, result, cert, game, red, abstraction, dfa, label_map) -> np.ndarray:
    """Concrete input for the current memory (policy lookup + interface)."""
    return RefinedController(result, cert, game, red, abstraction, dfa, label_map).output(mem)


def controller_update(mem, x_next, w_prev, result, cert, game, red, abstraction, dfa, label_map, noise=None):
    """Advance the memory after the plant moved; shares the plant's noise."""
    return RefinedController(result, cert, game, red, abstraction, dfa, label_map).update(mem, x_next, w_prev, noise)


def _adversary_move(spec: dict, rng, game: StochasticGame, k: int, x, u):
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return rng.uniform(game.w_lo, game.w_hi)
    if kind == "constant":
        return np.asarray(spec["value"], dtype=float).ravel()
    if kind == "scripted":
        table = spec["table"]
        return np.asarray(table[k % len(table)], dtype=float).ravel()
    raise ConfigurationError(f"unknown adversary kind {kind!r}")


def trace_satisfied(dfa: Dfa, label_map: LabelMap, outputs) -> tuple[bool, Optional[int]]:
    """Offline re-evaluation of an output trace: first step whose monitor
    state is accepting, scanning q after each label starting from the initial
    output."""
    q = dfa.initial
    for k, y in enumerate(outputs):
        q = dfa_step(dfa, q, label_of(label_map, y))
        if q in dfa.accepting:
            return True, k
    return False, None


def simulate_closed_loop(
    result: SynthesisResult,
    cert: RelationCertificate,
    game: StochasticGame,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    dfa: Dfa,
    label_map: LabelMap,
    x0,
    adversary: dict,
    runs: int,
    seed: int,
    horizon: Optional[int] = None,
    collect_outputs: bool = True,
    trajectory_sink=None,
    threads: int = 1,
) -> SimulationReport:
    """Monte Carlo closed-loop validation.

    Each run derives its own counter-based generator from (seed, run index),
    so results are independent of execution order; a run is satisfied when the
    monitor enters the accepting set at any step up to the horizon.
    """
    controller = RefinedController(result, cert, game, red, abstraction, dfa, label_map)
    H = result.policy.horizon if horizon is None else horizon
    x0 = np.asarray(x0, dtype=float).ravel()

    if threads > 1:
        return _simulate_parallel(controller, x0, adversary, runs, seed, H, collect_outputs, threads)

    satisfied = 0
    steps: list = []
    violations = 0
    outputs_acc = np.empty((runs, H + 1)) if collect_outputs and game.C.shape[0] == 1 else None
    step_time = 0.0
    step_calls = 0
    for run in range(runs):
        rng = np.random.default_rng(np.random.Philox(key=(seed, run)))
        ok, first, mem_viol, ys, t_acc, n_calls = _one_run(
            controller, x0, adversary, H, rng, trajectory_sink, run
        )
        satisfied += ok
        steps.append(first)
        violations += mem_viol
        step_time += t_acc
        step_calls += n_calls
        if outputs_acc is not None:
            outputs_acc[run] = ys
    rate = satisfied / runs if runs else 0.0
    se = float(np.sqrt(rate * (1.0 - rate) / runs)) if runs else 0.0
    quantiles = None
    if outputs_acc is not None:
        qs = np.quantile(outputs_acc, [0.05, 0.25, 0.5, 0.75, 0.95], axis=0)
        quantiles = {
            "q05": qs[0].tolist(), "q25": qs[1].tolist(), "q50": qs[2].tolist(),
            "q75": qs[3].tolist(), "q95": qs[4].tolist(),
        }
    return SimulationReport(
        runs=runs,
        satisfied=satisfied,
        rate=rate,
        ci_low=max(0.0, rate - 1.96 * se),
        ci_high=min(1.0, rate + 1.96 * se),
        acceptance_steps=steps,
        relation_violations=violations,
        seed=seed,
        adversary=adversary,
        horizon=H,
        mean_step_ms=(step_time / step_calls * 1e3) if step_calls else 0.0,
        output_quantiles=quantiles,
    )


def _one_run(controller: RefinedController, x0, adversary, H, rng, sink, run_idx):
    game = controller.game
    mem = controller.init(x0)
    scalar_out = game.C.shape[0] == 1
    ys = np.zeros(H + 1) if scalar_out else None
    y = game.output(mem.x)
    if ys is not None:
        ys[0] = y[0]
    accepted = mem.q in controller.dfa.accepting
    first = 0 if accepted else None
    t_acc = 0.0
    calls = 0
    for k in range(H):
        t0 = time.perf_counter()
        u = controller.output(mem)
        t_acc += time.perf_counter() - t0
        w = _adversary_move(adversary, rng, game, k, mem.x, u)
        noise = rng.standard_normal(game.R.shape[1])
        x_next = eval_dynamics(game, mem.x, u, w, noise)
        t0 = time.perf_counter()
        mem = controller.update(mem, x_next, w, noise)
        t_acc += time.perf_counter() - t0
        calls += 1
        y = game.output(mem.x)
        if ys is not None:
            ys[k + 1] = y[0]
        if sink is not None:
            in_rel = mem.x_hat != controller.abstraction.phi_index and in_relation(
                controller.cert, controller.red, mem.x,
                controller.abstraction.grid.center(mem.x_hat),
            )
            sink.writerow(
                [run_idx, k + 1, *mem.x.tolist(), float(y[0]) if scalar_out else y.tolist(),
                 *np.atleast_1d(u).tolist(), *np.atleast_1d(w).tolist(),
                 mem.q, mem.x_hat, int(in_rel)]
            )
        if not accepted and mem.q in controller.dfa.accepting:
            accepted = True
            first = k + 1
    return int(accepted), first, mem.relation_violations, ys, t_acc, calls


def _simulate_parallel(controller, x0, adversary, runs, seed, H, collect_outputs, threads):
    from concurrent.futures import ProcessPoolExecutor

    # Workers never touch the kernel; ship a stripped abstraction.
    slim = RefinedController(
        controller.result, controller.cert, controller.game, controller.red,
        replace(controller.abstraction, kernel=None), controller.dfa, controller.label_map,
    )
    chunks = np.array_split(np.arange(runs), threads)
    args = [
        (slim, x0, adversary, chunk.tolist(), seed, H, collect_outputs)
        for chunk in chunks if chunk.size
    ]
    sat, steps, viol, ys_parts, t_acc, calls = 0, [], 0, [], 0.0, 0
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for part in pool.map(_run_chunk, args):
            sat += part["satisfied"]
            steps.extend(part["steps"])
            viol += part["violations"]
            if part["outputs"] is not None:
                ys_parts.append(part["outputs"])
            t_acc += part["time"]
            calls += part["calls"]
    rate = sat / runs if runs else 0.0
    se = float(np.sqrt(rate * (1.0 - rate) / runs)) if runs else 0.0
    quantiles = None
    if ys_parts:
        allys = np.concatenate(ys_parts, axis=0)
        qs = np.quantile(allys, [0.05, 0.25, 0.5, 0.75, 0.95], axis=0)
        quantiles = {
            "q05": qs[0].tolist(), "q25": qs[1].tolist(), "q50": qs[2].tolist(),
            "q75": qs[3].tolist(), "q95": qs[4].tolist(),
        }
    return SimulationReport(
        runs=runs, satisfied=sat, rate=rate,
        ci_low=max(0.0, rate - 1.96 * se), ci_high=min(1.0, rate + 1.96 * se),
        acceptance_steps=steps, relation_violations=viol, seed=seed,
        adversary=adversary, horizon=H,
        mean_step_ms=(t_acc / calls * 1e3) if calls else 0.0,
        output_quantiles=quantiles,
    )


def _run_chunk(packed):
    controller, x0, adversary, run_ids, seed, H, collect_outputs = packed
    scalar_out = controller.game.C.shape[0] == 1
    sat, steps, viol, t_acc, calls = 0, [], 0, 0.0, 0
    outputs = np.zeros((len(run_ids), H + 1)) if collect_outputs and scalar_out else None
    for i, run in enumerate(run_ids):
        rng = np.random.default_rng(np.random.Philox(key=(seed, run)))
        ok, first, v, ys, t, c = _one_run(controller, x0, adversary, H, rng, None, run)
        sat += ok
        steps.append(first)
        viol += v
        t_acc += t
        calls += c
        if outputs is not None:
            outputs[i] = ys
    return {"satisfied": sat, "steps": steps, "violations": viol,
            "outputs": outputs, "time": t_acc, "calls": calls}
