import dataclasses

import numpy as np
import pytest

from sgsynth._kernels import available_backends, set_backend
from sgsynth.abstraction import FiniteAbstraction, Grid, build_kernel
from sgsynth.model import ReducedOrderGame, SlopeNonlinearity
from sgsynth.relation import GammaTerms, RelationCertificate
from sgsynth.synthesis import (
    ProductGeometry,
    _bellman_step,
    build_geometry,
    evaluate_fixed_policy,
    guarantee_at,
    initial_values,
    synthesize,
)
from tests.bruteforce import enumerate_value, random_micro_game


def make_cert(eps=0.1, delta=0.0, dim=1):
    return RelationCertificate(
        M=np.eye(dim), eps=eps, delta=delta, K=np.zeros((1, dim)), L=np.zeros((1, dim)),
        R_tilde=np.eye(1), kappa=0.0, M_w=np.eye(1), eps_w=0.05,
        gammas=GammaTerms(0, 0, 0, 0, 0),
    )


def hand_geometry(delta_unused=None):
    """Two plain states; state 0 labels into q0, state 1 into the accepting
    trap; kernel rows [[0.7, 0.3], [0, 1]] for the single input pair."""
    kernel = np.array([[[[0.7, 0.3]]], [[[0.0, 1.0]]]])
    cand = np.zeros((2, 2, 2), dtype=bool)
    cand[0, 0, 0] = True  # from q0, state 0 keeps q0
    cand[1, 0, 1] = True  # from q0, state 1 enters the trap
    cand[:, 1, 1] = True  # trap self-loop
    geo = ProductGeometry(
        n_states=2, n_u=1, n_w=1,
        accepting=np.array([False, True]),
        cand_mask=cand,
        t_matrix=kernel.reshape(2, 2),
    )
    return geo


def test_initialization_pins_accepting():
    geo = hand_geometry()
    v0 = initial_values(geo)
    np.testing.assert_array_equal(v0, [[0.0, 1.0], [0.0, 1.0]])


def test_hand_example_satisfaction_step():
    geo = hand_geometry()
    v1, _, _ = _bellman_step(geo, 0.1, "satisfaction", initial_values(geo))
    assert v1[0, 0] == pytest.approx(0.9 * 0.3, abs=1e-15)
    assert v1[1, 0] == pytest.approx(0.9, abs=1e-15)
    np.testing.assert_array_equal(v1[:, 1], [1.0, 1.0])


def test_hand_example_violation_step():
    geo = hand_geometry()
    v1, _, _ = _bellman_step(geo, 0.1, "violation", initial_values(geo))
    assert v1[0, 0] == pytest.approx(0.9 * 0.3 + 0.1, abs=1e-15)
    assert v1[1, 0] == pytest.approx(1.0, abs=1e-15)


def test_delta_one_saturates():
    geo = hand_geometry()
    v = initial_values(geo)
    for problem, expect in (("satisfaction", 0.0), ("violation", 1.0)):
        out, _, _ = _bellman_step(geo, 1.0, problem, v)
        assert out[0, 0] == expect
        assert out[1, 1] == 1.0


def test_violation_zero_delta_deterministic_safe_chain():
    # Deterministic self-loop in a never-accepting monitor state stays at 0.
    kernel = np.zeros((1, 1, 1, 1))
    kernel[0, 0, 0, 0] = 1.0
    cand = np.ones((1, 1, 1), dtype=bool)
    geo = ProductGeometry(
        n_states=1, n_u=1, n_w=1, accepting=np.array([False]),
        cand_mask=cand, t_matrix=kernel.reshape(1, 1),
    )
    v = initial_values(geo)
    for _ in range(5):
        v, _, _ = _bellman_step(geo, 0.0, "violation", v)
    assert v[0, 0] == 0.0


def test_successor_choice_direction():
    # Two candidate monitor successors with values {0.3, 0.7}: the
    # satisfaction relabel takes 0.3, the violation relabel 0.7.
    kernel = np.zeros((1, 1, 1, 1))
    kernel[0, 0, 0, 0] = 1.0
    cand = np.ones((1, 2, 2), dtype=bool)
    geo = ProductGeometry(
        n_states=1, n_u=1, n_w=1, accepting=np.array([False, False]),
        cand_mask=cand, t_matrix=kernel.reshape(1, 1),
    )
    v = np.array([[0.3, 0.7]])
    sat, _, _ = _bellman_step(geo, 0.0, "satisfaction", v)
    vio, _, _ = _bellman_step(geo, 0.0, "violation", v)
    assert sat[0, 0] == pytest.approx(0.3)
    assert vio[0, 0] == pytest.approx(0.7)


def random_geometry(rng, sparse=False):
    kernel, cand, accepting, H = random_micro_game(rng)
    S, U, W, _ = kernel.shape
    geo = ProductGeometry(
        n_states=S, n_u=U, n_w=W, accepting=accepting, cand_mask=cand,
    )
    if sparse:
        mat = kernel.reshape(-1, S)
        geo.indices = np.tile(np.arange(S, dtype=np.int64), mat.shape[0])
        geo.indptr = (np.arange(mat.shape[0] + 1) * S).astype(np.int64)
        geo.data = mat.ravel().copy()
        geo.truncated = np.zeros(mat.shape[0])
    else:
        geo.t_matrix = kernel.reshape(-1, S)
    return kernel, geo, H


@pytest.mark.parametrize("problem", ["satisfaction", "violation"])
@pytest.mark.parametrize("delta", [0.0, 0.1])
def test_bellman_equals_bruteforce_sample(problem, delta):
    rng = np.random.default_rng(hash((problem, delta)) % 2**32)
    for _ in range(8):
        kernel, geo, H = random_geometry(rng)
        v = initial_values(geo)
        for _ in range(H):
            v, _, _ = _bellman_step(geo, delta, problem, v)
        oracle = enumerate_value(kernel, geo.cand_mask, geo.accepting, delta, problem, H)
        np.testing.assert_allclose(v, oracle, atol=1e-12)


def test_backend_equivalence_dense_and_sparse():
    if "compiled" not in available_backends():
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(77)
    try:
        for sparse in (False, True):
            for _ in range(10):
                kernel, geo, H = random_geometry(rng, sparse=sparse)
                v = initial_values(geo)
                set_backend("compiled")
                vc, uc, wc = _bellman_step(geo, 0.05, "satisfaction", v)
                set_backend("numpy")
                vn, un, wn = _bellman_step(geo, 0.05, "satisfaction", v)
                np.testing.assert_allclose(vc, vn, atol=1e-13)
                np.testing.assert_array_equal(uc, un)
                np.testing.assert_array_equal(wc, wn)
    finally:
        set_backend(None)


def test_value_bounds_and_horizon_monotonicity():
    rng = np.random.default_rng(5)
    for problem in ("satisfaction", "violation"):
        for _ in range(6):
            _, geo, _ = random_geometry(rng)
            v = initial_values(geo)
            for _ in range(6):
                v_next, _, _ = _bellman_step(geo, 0.05, problem, v)
                assert np.all(v_next >= -1e-12) and np.all(v_next <= 1 + 1e-12)
                assert np.all(v_next >= v - 1e-12)
                v = v_next


def test_operator_monotone_in_argument():
    rng = np.random.default_rng(6)
    for problem in ("satisfaction", "violation"):
        for _ in range(6):
            _, geo, _ = random_geometry(rng)
            a = rng.random((geo.n_states, geo.n_q))
            b = np.clip(a + rng.random(a.shape) * (1 - a), 0, 1)
            fa, _, _ = _bellman_step(geo, 0.05, problem, a)
            fb, _, _ = _bellman_step(geo, 0.05, problem, b)
            assert np.all(fa <= fb + 1e-12)


def tiny_pipeline(delta=0.0, problem="violation", horizon=3):
    """Real end-to-end artifacts on a 4-cell grid plus absorbing state."""
    from tests.conftest import tiny_monitor

    red = ReducedOrderGame(
        P=np.eye(1), A_r=np.array([[0.5]]), B_r=np.array([[1.0]]), C_r=np.array([[1.0]]),
        D_r=np.array([[1.0]]), E_r=np.zeros((1, 1)), F_r=np.zeros((1, 1)),
        G=np.zeros((1, 1)), Qm=np.zeros((1, 1)), S=np.zeros((1, 1)),
        phi=SlopeNonlinearity("zero"), R_r=np.array([[0.2]]),
    )
    ab = FiniteAbstraction(
        grid=Grid(lo=[-1.0], hi=[1.0], eta=[0.5]),
        u_grid=Grid(lo=[-0.5], hi=[0.5], eta=[0.5]),
        w_grid=Grid(lo=[-0.2], hi=[0.2], eta=[0.2]),
        output_matrix=red.C_r,
    )
    ab.kernel = build_kernel(red, ab)
    dfa, labels = tiny_monitor()
    # eps must exceed the worst quantization offset (0.25) for coverage.
    cert = make_cert(eps=0.3, delta=delta)
    return ab, dfa, labels, cert, red


def test_synthesize_pipeline_and_policy_shape():
    ab, dfa, labels, cert, red = tiny_pipeline()
    res = synthesize(ab, dfa, labels, cert, 4, "violation", output_matrix=np.eye(1))
    assert res.policy.choices.shape == (4, 5, 2)
    assert np.all(res.final_values.values[:, 1] == 1.0)
    g = guarantee_at(res, cert, red, ab, [0.1])
    assert g["kind"] == "violation_upper"
    assert 0.0 <= g["bound"] <= 1.0


def test_guarantee_is_one_when_initially_accepting():
    ab, dfa, labels, cert, red = tiny_pipeline(problem="satisfaction")
    res = synthesize(ab, dfa, labels, cert, 3, "satisfaction", output_matrix=np.eye(1) * 5.0)
    # Scaled output map pushes h(x0) into the bad label; the trap is accepting.
    g = guarantee_at(res, cert, red, ab, [0.3])
    assert g["bound"] == 1.0


def test_evaluate_fixed_policy_fixed_point():
    ab, dfa, labels, cert, red = tiny_pipeline(delta=0.05)
    for problem in ("satisfaction", "violation"):
        res = synthesize(ab, dfa, labels, cert, 5, problem)
        table = evaluate_fixed_policy(ab, dfa, labels, cert, res.policy, 5, problem)
        np.testing.assert_allclose(table.values, res.final_values.values, atol=1e-12)


def test_constant_policy_is_suboptimal():
    ab, dfa, labels, cert, red = tiny_pipeline()
    res = synthesize(ab, dfa, labels, cert, 5, "satisfaction")
    lazy = dataclasses.replace(res.policy, choices=np.zeros_like(res.policy.choices))
    table = evaluate_fixed_policy(ab, dfa, labels, cert, lazy, 5, "satisfaction")
    assert np.all(table.values <= res.final_values.values + 1e-12)


def test_value_history_monotone():
    ab, dfa, labels, cert, red = tiny_pipeline()
    res = synthesize(ab, dfa, labels, cert, 6, "violation", keep_history=True)
    hist = np.stack([h for h in res.value_history])
    assert np.all(np.diff(hist, axis=0) >= -1e-12)


def test_absorbing_state_floors():
    # The absorbing state's label feeds the trap, so its violation value hits
    # the accepting trap immediately; its satisfaction value under a monitor
    # whose absorbing label never accepts stays at the delta-driven floor.
    ab, dfa, labels, cert, red = tiny_pipeline(delta=0.1)
    res_v = synthesize(ab, dfa, labels, cert, 4, "violation")
    phi = ab.phi_index
    assert res_v.final_values.values[phi, 0] == pytest.approx(1.0)
    res_s = synthesize(ab, dfa, labels, cert, 4, "satisfaction")
    # Entering the accepting trap counts as "satisfaction" of the monitor;
    # from phi the trap is reached in one step, scaled by the coupling factor.
    assert res_s.final_values.values[phi, 0] == pytest.approx(1 - cert.delta)


def test_successor_q_ops(running):
    from sgsynth.dfa import dfa_step, label_of
    from sgsynth.synthesis import successor_q_max, successor_q_min

    dfa, labels = running["dfa"], running["labels"]
    values = np.array([0.5, 0.2, 0.9, 0.4])
    # eps = 0 collapses to the unique labelled successor.
    y = [1.0]
    expect = dfa_step(dfa, 1, label_of(labels, y))
    assert successor_q_min(dfa, labels, values, y, 1, 0.0) == expect
    assert successor_q_max(dfa, labels, values, y, 1, 0.0) == expect
    # Constant values break ties to the smallest index.
    const = np.ones(4)
    got = successor_q_min(dfa, labels, const, [1.9], 0, 0.2)
    cands = sorted({int(dfa.table[0, dfa.symbol_index[s]]) for s in ("p1", "p3")})
    assert got == cands[0]
    # Two candidates with distinct values split min/max.
    from tests.conftest import tiny_monitor

    tdfa, tlabels = tiny_monitor()
    v2 = np.array([0.3, 0.7])  # candidates {q0, q1} near the label boundary
    assert successor_q_min(tdfa, tlabels, v2, [0.95], 0, 0.1) == 0
    assert successor_q_max(tdfa, tlabels, v2, [0.95], 0, 0.1) == 1


def test_build_geometry_uses_eps_ball(running, running_abstraction):
    geo_small = build_geometry(running_abstraction, running["dfa"], running["labels"], 0.0)
    geo_large = build_geometry(running_abstraction, running["dfa"], running["labels"], 0.5)
    assert geo_large.cand_mask.sum() >= geo_small.cand_mask.sum()
    assert geo_small.cand_mask.any(axis=2).all()


def filtered_pipeline(mode):
    """Multi-input abstraction with a strict synthesis-input filter."""
    from tests.conftest import tiny_monitor

    red = ReducedOrderGame(
        P=np.eye(1), A_r=np.array([[0.6]]), B_r=np.array([[1.0]]), C_r=np.array([[1.0]]),
        D_r=np.array([[1.0]]), E_r=np.zeros((1, 1)), F_r=np.zeros((1, 1)),
        G=np.zeros((1, 1)), Qm=np.zeros((1, 1)), S=np.zeros((1, 1)),
        phi=SlopeNonlinearity("zero"), R_r=np.array([[0.15]]),
    )
    ab = FiniteAbstraction(
        grid=Grid(lo=[-1.0], hi=[1.0], eta=[0.25]),
        u_grid=Grid(lo=[-0.6], hi=[0.6], eta=[0.2]),
        w_grid=Grid(lo=[-0.2], hi=[0.2], eta=[0.2]),
        u_prime_lo=[-0.3], u_prime_hi=[0.3],
        output_matrix=red.C_r,
    )
    ab.kernel = build_kernel(red, ab, mode=mode, threshold=1e-13)
    dfa, labels = tiny_monitor()
    return ab, dfa, labels, make_cert(eps=0.3, delta=0.02), red


def test_sparse_filtered_synthesis_matches_dense():
    dense = filtered_pipeline("dense")
    sparse = filtered_pipeline("sparse")
    assert dense[0].u_prime_points().shape[0] == 4  # filter drops the outer inputs
    res_d = synthesize(*dense[:4], 6, "violation")
    res_s = synthesize(*sparse[:4], 6, "violation")
    np.testing.assert_allclose(res_s.final_values.values, res_d.final_values.values, atol=1e-10)
    np.testing.assert_array_equal(res_s.policy.choices, res_d.policy.choices)
    ev = evaluate_fixed_policy(sparse[0], sparse[1], sparse[2], sparse[3], res_s.policy, 6, "violation")
    np.testing.assert_allclose(ev.values, res_s.final_values.values, atol=1e-12)
