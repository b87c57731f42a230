"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s or -rA to see them on success)."""

import time

import numpy as np
import pytest

from sgsynth import artifacts as art
from sgsynth.abstraction import FiniteAbstraction, Grid, build_kernel, project_w
from sgsynth.model import eval_dynamics
from sgsynth.relation import (
    check_lmi_conditions,
    compute_gammas,
    establish_relation,
    in_relation,
    interface_input,
    intersect_input_constraints,
)
from sgsynth.runtime import RefinedController, simulate_closed_loop
from sgsynth.synthesis import ProductGeometry, _bellman_step, guarantee_at, initial_values, synthesize
from tests.bruteforce import enumerate_value, random_micro_game
from tests.conftest import DATA
from tests.test_relation import one_step_coupling_frequency, sample_in_ellipsoid


LINES: list = []


def report(num, ok, detail):
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def running_pipeline(running):
    """Self-established relation at the bundled pipeline delta, plus the
    kernel built with its optimal noise matrix and the synthesized policy."""
    t0 = time.time()
    game, red0 = running["game"], running["red"]
    skel = running["skeleton"]
    ab = FiniteAbstraction(
        grid=skel.grid, u_grid=skel.u_grid, w_grid=skel.w_grid,
        output_matrix=skel.output_matrix,
    )
    found = establish_relation(game, red0, ab, delta=2e-5, eps_range=(0.05, 1.0),
                               M_w=np.eye(1), eps_w=0.05)
    assert found is not None
    cert, red = found
    ab.kernel = build_kernel(red, ab, mode="dense")
    result = synthesize(ab, running["dfa"], running["labels"], cert, 20, "violation",
                        output_matrix=game.C)
    return {"game": game, "red": red, "cert": cert, "abstraction": ab,
            "result": result, "dfa": running["dfa"], "labels": running["labels"],
            "build_seconds": time.time() - t0}


def test_criterion_1_kernel_exactness(running, running_abstraction):
    t0 = time.time()
    red, ab = running["red"], running_abstraction
    kernel = ab.kernel
    sums = kernel.dense.sum(axis=3)
    row_ok = np.max(np.abs(sums - 1.0)) <= 1e-9
    rng = np.random.default_rng(2024)
    n = 1_000_000
    mc_ok = True
    for _ in range(20):
        x = int(rng.integers(0, ab.n_grid))
        u = int(rng.integers(0, 50))
        w = int(rng.integers(0, 10))
        drift = red.drift(ab.grid.center(x), ab.u_points()[u], ab.w_points()[w])
        samples = drift[0] + red.R_r.item() * rng.standard_normal(n)
        idx = np.floor((samples - ab.grid.lo[0]) / ab.grid.eta[0]).astype(np.int64)
        outside = (samples < ab.grid.lo[0]) | (samples > ab.grid.hi[0])
        idx = np.clip(idx, 0, ab.n_grid - 1)
        idx[outside] = ab.n_grid
        est = np.bincount(idx, minlength=ab.n_states) / n
        row = kernel.row(x, u, w)
        se = np.sqrt(np.maximum(row * (1 - row), 0.0) / n)
        if not np.all(np.abs(est - row) <= 4 * se + 1e-9):
            mc_ok = False
            break
    dt = time.time() - t0
    report(1, row_ok and mc_ok and dt < 120,
           f"20 Monte Carlo rows within 4 s.e., row sums exact, {dt:.1f}s")


def test_criterion_2_published_certificates(running, quadrotor):
    t0 = time.time()
    oks = []
    for bundle in (running, quadrotor):
        cert, red, game, skel = (bundle[k] for k in ("cert", "red", "game", "skeleton"))
        gammas = compute_gammas(game, red, skel, cert.M, cert.delta, cert.R_tilde,
                                cert.M_w, cert.eps_w)
        cons = intersect_input_constraints(game, red, skel, cert.R_tilde)
        rep = check_lmi_conditions(game, red, cert.M, cert.K, cert.L, cert.eps,
                                   cert.delta, gammas.total, tol=1e-2, constraints=cons)
        oks.append(rep["feasible"])
    dt = time.time() - t0
    report(2, all(oks) and dt < 10,
           f"both published certificates verify at 1e-2 tolerance, {dt:.1f}s")


def test_criterion_3_relation_search(running, quadrotor):
    t0 = time.time()
    game, red = running["game"], running["red"]
    skel = running["skeleton"]
    found = establish_relation(game, red, skel, delta=0.001, eps_range=(0.05, 1.0),
                               M_w=np.eye(1), eps_w=0.05)
    ok_run = found is not None and found[0].eps <= 0.3
    if ok_run:
        cert, red_n = found
        cons = intersect_input_constraints(game, red_n, skel, cert.R_tilde)
        rep = check_lmi_conditions(game, red_n, cert.M, cert.K, cert.L, cert.eps,
                                   cert.delta, cert.gammas.total, tol=1e-7, constraints=cons)
        ok_run = rep["feasible"]
    t_run = time.time() - t0

    t0 = time.time()
    gq, rq, skq = quadrotor["game"], quadrotor["red"], quadrotor["skeleton"]
    foundq = establish_relation(gq, rq, skq, delta=0.0, eps_range=(0.05, 0.4),
                                M_w=np.eye(1), eps_w=0.05)
    ok_quad = foundq is not None and foundq[0].eps <= 0.35
    if ok_quad:
        certq, rqn = foundq
        consq = intersect_input_constraints(gq, rqn, skq, certq.R_tilde)
        repq = check_lmi_conditions(gq, rqn, certq.M, certq.K, certq.L, certq.eps,
                                    certq.delta, certq.gammas.total, tol=1e-7, constraints=consq)
        ok_quad = repq["feasible"]
    t_quad = time.time() - t0
    report(3, ok_run and ok_quad and t_run < 600 and t_quad < 600,
           f"running eps={found[0].eps:.3f} ({t_run:.0f}s), quadrotor eps={foundq[0].eps:.3f} ({t_quad:.0f}s), strict 1e-7 verify")


def test_criterion_4_running_synthesis(running_pipeline):
    p = running_pipeline
    g = guarantee_at(p["result"], p["cert"], p["red"], p["abstraction"], [3.8, 4.1, 2.9])
    guarantee = 1.0 - g["bound"]
    dt = p["build_seconds"]
    report(4, 0.995 <= guarantee <= 1.0 and dt < 900,
           f"satisfaction guarantee {guarantee:.6f} in [0.995, 1] (published bound >= 0.9990), pipeline {dt:.1f}s")


def test_criterion_5_monte_carlo_soundness(running_pipeline):
    t0 = time.time()
    p = running_pipeline
    rep = simulate_closed_loop(
        p["result"], p["cert"], p["game"], p["red"], p["abstraction"], p["dfa"], p["labels"],
        [3.8, 4.1, 2.9], {"kind": "uniform"}, runs=10_000, seed=20240817,
        collect_outputs=False,
    )
    g = guarantee_at(p["result"], p["cert"], p["red"], p["abstraction"], [3.8, 4.1, 2.9])
    guarantee = 1.0 - g["bound"]
    empirical = 1.0 - rep.rate
    se = np.sqrt(max(guarantee * (1 - guarantee), 1e-12) / rep.runs)
    dt = time.time() - t0
    report(5, empirical >= guarantee - 3 * se and dt < 300,
           f"empirical satisfaction {empirical:.4f} >= {guarantee:.4f} - 3se (published runs observed 100%), {dt:.0f}s")


def test_criterion_6_quadrotor_desk_scale(quadrotor):
    t0 = time.time()
    game, red0 = quadrotor["game"], quadrotor["red"]
    ab = FiniteAbstraction(
        grid=Grid(lo=[-0.7, -0.5], hi=[0.7, 0.5], eta=[0.05, 0.05]),
        u_grid=Grid(lo=[-0.25], hi=[0.25], eta=[0.5]),
        w_grid=Grid(lo=[-0.6], hi=[0.6], eta=[0.1]),
        output_matrix=red0.C_r,
    )
    found = establish_relation(game, red0, ab, delta=0.0, eps_range=(0.8, 2.0),
                               M_w=np.eye(1), eps_w=0.05)
    assert found is not None, "desk-scale relation search failed"
    cert, red = found
    ab.kernel = build_kernel(red, ab, mode="sparse", threshold=1e-12)
    dfa, labels = quadrotor["dfa"], quadrotor["labels"]
    result = synthesize(ab, dfa, labels, cert, 200, "violation", keep_history=True,
                        output_matrix=game.C)
    g = guarantee_at(result, cert, red, ab, [0.2, 0.2])
    x_hat0, q0 = g["abstract_state"], g["monitor_state"]
    complements = [float(1.0 - result.value_history[h][x_hat0, q0]) for h in (50, 100, 200)]
    in_range = 0.0 <= complements[-1] <= 1.0
    monotone = complements[0] >= complements[1] - 1e-12 and complements[1] >= complements[2] - 1e-12
    rep = simulate_closed_loop(result, cert, game, red, ab, dfa, labels, [0.2, 0.2],
                               {"kind": "uniform"}, runs=1000, seed=11, collect_outputs=False)
    empirical = 1.0 - rep.rate
    guarantee = complements[-1]
    dt = time.time() - t0
    report(6, in_range and monotone and empirical >= guarantee and dt < 1200,
           f"guarantee {guarantee:.4f} in [0,1], complements {[round(c, 4) for c in complements]} "
           f"nonincreasing, empirical {empirical:.3f} >= guarantee, sparse kernel, {dt:.0f}s")


def test_criterion_7_bruteforce_oracle():
    t0 = time.time()
    rng = np.random.default_rng(20240401)
    worst = 0.0
    for _ in range(50):
        kernel, cand, accepting, horizon = random_micro_game(rng, max_policies=1024)
        S, U, W, _ = kernel.shape
        geo = ProductGeometry(
            n_states=S, n_u=U, n_w=W, accepting=accepting, cand_mask=cand,
            t_matrix=np.ascontiguousarray(kernel.reshape(-1, S)),
        )
        for problem in ("satisfaction", "violation"):
            for delta in (0.0, 0.1):
                v = initial_values(geo)
                for _ in range(horizon):
                    v, _, _ = _bellman_step(geo, delta, problem, v)
                oracle = enumerate_value(kernel, cand, accepting, delta, problem, horizon)
                worst = max(worst, float(np.max(np.abs(v - oracle))))
    dt = time.time() - t0
    report(7, worst <= 1e-12 and dt < 60,
           f"50 micro-games x both problems x delta in {{0, 0.1}}: max |bellman - enumeration| = {worst:.2e}, {dt:.0f}s")


def test_criterion_8_one_step_coupling(running, quadrotor):
    t0 = time.time()
    details = []
    ok = True
    for name, bundle in (("running", running), ("quadrotor", quadrotor)):
        freq = one_step_coupling_frequency(bundle, bundle["skeleton"], 100_000, 321)
        delta = bundle["cert"].delta
        se = np.sqrt(max(delta * (1 - delta), 0.0) / 100_000)
        ok = ok and freq >= 1 - delta - 3 * se
        details.append(f"{name} {freq:.5f} >= {1 - delta - 3 * se:.5f}")
    dt = time.time() - t0
    report(8, ok and dt < 60, "; ".join(details) + f", {dt:.0f}s")


def test_criterion_9_operator_properties(running):
    t0 = time.time()
    rng = np.random.default_rng(17)
    bounds_ok = monotone_h_ok = monotone_op_ok = pin_ok = True
    for _ in range(10):
        kernel, cand, accepting, _ = random_micro_game(rng)
        S, U, W, _ = kernel.shape
        geo = ProductGeometry(n_states=S, n_u=U, n_w=W, accepting=accepting,
                              cand_mask=cand, t_matrix=kernel.reshape(-1, S))
        for problem in ("satisfaction", "violation"):
            v = initial_values(geo)
            for _ in range(5):
                v_next, _, _ = _bellman_step(geo, 0.03, problem, v)
                bounds_ok &= bool(np.all(v_next >= 0) and np.all(v_next <= 1))
                monotone_h_ok &= bool(np.all(v_next >= v - 1e-12))
                pin_ok &= bool(np.all(v_next[:, accepting] == 1.0))
                v = v_next
            a = rng.random((S, accepting.shape[0]))
            b = np.clip(a + rng.random(a.shape) * (1 - a), 0, 1)
            fa, _, _ = _bellman_step(geo, 0.03, problem, a)
            fb, _, _ = _bellman_step(geo, 0.03, problem, b)
            monotone_op_ok &= bool(np.all(fa <= fb + 1e-12))

    # gamma0 closed form vs 1e6-sample ball maximization within 0.1%.
    cert, red, game, skel = (running[k] for k in ("cert", "red", "game", "skeleton"))
    g = compute_gammas(game, red, skel, cert.M, cert.delta, cert.R_tilde, cert.M_w, cert.eps_w)
    dirs = rng.standard_normal((1_000_000, game.D.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = cert.eps_w * dirs @ np.linalg.inv(np.linalg.cholesky(cert.M_w).T)
    vals = np.einsum("ij,jk,ik->i", pts @ game.D.T, cert.M, pts @ game.D.T)
    gamma0_ok = abs(g.g0 - np.sqrt(vals.max())) <= 1e-3 * g.g0
    dt = time.time() - t0
    report(9, bounds_ok and monotone_h_ok and monotone_op_ok and pin_ok and gamma0_ok and dt < 120,
           f"bounds/monotonicity/pinning hold; gamma0 closed form within 0.1% of ball max, {dt:.0f}s")


def test_guarantee_direction_any_adversary(running_pipeline):
    # The certified bound holds for every adversary strategy, not only the
    # uniform one used in the headline validation.
    p = running_pipeline
    g = guarantee_at(p["result"], p["cert"], p["red"], p["abstraction"], [3.8, 4.1, 2.9])
    guarantee = 1.0 - g["bound"]
    for adversary in ({"kind": "constant", "value": [0.5]},
                      {"kind": "constant", "value": [-0.5]},
                      {"kind": "scripted", "table": [[0.5], [-0.5], [0.0]]}):
        rep = simulate_closed_loop(
            p["result"], p["cert"], p["game"], p["red"], p["abstraction"], p["dfa"], p["labels"],
            [3.8, 4.1, 2.9], adversary, runs=1000, seed=99, collect_outputs=False,
        )
        empirical = 1.0 - rep.rate
        se = np.sqrt(max(guarantee * (1 - guarantee), 1e-12) / rep.runs)
        assert empirical >= guarantee - 3 * se, (adversary, empirical, guarantee)


def test_criterion_10_controller_latency(running_pipeline):
    p = running_pipeline
    rep = simulate_closed_loop(
        p["result"], p["cert"], p["game"], p["red"], p["abstraction"], p["dfa"], p["labels"],
        [3.8, 4.1, 2.9], {"kind": "uniform"}, runs=200, seed=5, collect_outputs=False,
    )
    report(10, rep.mean_step_ms < 1.0,
           f"mean controller output+update {rep.mean_step_ms:.4f} ms/step (< 1 ms; published ~0.08 ms)")
