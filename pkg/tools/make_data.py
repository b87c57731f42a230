"""Regenerate the bundled example data under src/sgsynth/data/.

The monitors are reconstructions from prose property descriptions (the
originals live in figure artwork); each JSON carries a note saying so.
"""

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from sgsynth import artifacts as art
from sgsynth.abstraction import FiniteAbstraction, Grid
from sgsynth.dfa import Dfa, LabelMap
from sgsynth.model import SlopeNonlinearity, StochasticGame, reduce_model
from sgsynth.relation import (
    GammaTerms,
    RelationCertificate,
    check_lmi_conditions,
    compute_gammas,
    intersect_input_constraints,
)

DATA = ROOT / "src" / "sgsynth" / "data"
INF = float("inf")


def running_game() -> StochasticGame:
    return StochasticGame.from_boxes(
        A=[[0.9204, 0.4512, 0.9491], [0.7865, 0.8269, 1.074], [0.6681, 0.3393, 0.5110]],
        B=[[9.001, 1.611, 3.663], [1.404, 11.76, 2.386], [5.568, 4.560, 5.156]],
        C=[[0.1, 0.1, 0.1]],
        D=[[0.6], [0.4], [0.6]],
        E=[[0.6740], [0.6367], [0.7030]],
        F=[[0.5439, 0.9578, 0.2493]],
        R=[[0.5110], [0.3347], [0.5336]],
        phi=SlopeNonlinearity(kind="sine"),
        u_lo=[-2.5, -2.5, -2.5], u_hi=[2.5, 2.5, 2.5],
        w_lo=[-0.5], w_hi=[0.5],
        x0_set=([3.8, 4.1, 2.9],),
    )


def quadrotor_game() -> StochasticGame:
    dt, grav = 0.05, 9.8
    return StochasticGame.from_boxes(
        A=[[1.0, dt], [0.0, 1.0]],
        B=[[dt * dt * grav / 2.0], [dt * grav]],
        C=[[1.0, 0.0]],
        D=[[dt * dt / 2.0], [dt]],
        E=[[0.0], [0.0]],
        F=[[0.0, 0.0]],
        R=[[0.4 * dt, 0.0], [0.0, 0.4 * dt]],
        phi=SlopeNonlinearity(kind="zero"),
        u_lo=[-0.25], u_hi=[0.25],
        w_lo=[-0.6], w_hi=[0.6],
        x0_set=([0.2, 0.2],),
    )


def running_monitor():
    # Stay-in-band monitor: starts in [0, 2] -> stay in [-2, 2]; starts in
    # [-1.8, 0) -> stay in [-1.8, 1.8]; accepting trap records a violation.
    dfa = Dfa.from_transitions(
        n_states=4, initial=0,
        alphabet=["p1", "p2", "p3", "p4", "p5"],
        transitions=[
            (0, "p1", 1), (0, "p3", 1), (0, "p2", 2), (0, "p4", 3), (0, "p5", 3),
            (1, "p1", 1), (1, "p2", 1), (1, "p3", 1), (1, "p4", 1), (1, "p5", 3),
            (2, "p1", 2), (2, "p2", 2), (2, "p3", 3), (2, "p4", 3), (2, "p5", 3),
            (3, "p1", 3), (3, "p2", 3), (3, "p3", 3), (3, "p4", 3), (3, "p5", 3),
        ],
        accepting=[3],
    )
    labels = LabelMap(
        box_lo=[[0.0], [-1.8], [1.8], [-2.0], [-INF], [2.0]],
        box_hi=[[1.8], [0.0], [2.0], [-1.8], [-2.0], [INF]],
        symbols=("p1", "p2", "p3", "p4", "p5", "p5"),
        absorbing_symbol="p5",
        alphabet=dfa.alphabet,
    )
    return dfa, labels


def psi1_monitor():
    dfa = Dfa.from_transitions(
        n_states=2, initial=0, alphabet=["p1", "p2"],
        transitions=[(0, "p1", 0), (0, "p2", 1), (1, "p1", 1), (1, "p2", 1)],
        accepting=[1],
    )
    labels = LabelMap(
        box_lo=[[-0.7], [-INF], [0.7]],
        box_hi=[[0.7], [-0.7], [INF]],
        symbols=("p1", "p2", "p2"),
        absorbing_symbol="p2",
        alphabet=dfa.alphabet,
    )
    return dfa, labels


def psi2_monitor():
    dfa = Dfa.from_transitions(
        n_states=3, initial=0, alphabet=["p1", "p2", "p3"],
        transitions=[
            (0, "p1", 0), (0, "p2", 1), (0, "p3", 2),
            (1, "p1", 1), (1, "p2", 1), (1, "p3", 1),
            (2, "p1", 2), (2, "p2", 2), (2, "p3", 2),
        ],
        accepting=[1],
    )
    labels = LabelMap(
        box_lo=[[-0.5], [-1.0], [0.5], [-INF], [1.0]],
        box_hi=[[0.5], [-0.5], [1.0], [-1.0], [INF]],
        symbols=("p2", "p1", "p1", "p3", "p3"),
        absorbing_symbol="p3",
        alphabet=dfa.alphabet,
    )
    return dfa, labels


def psi3_monitor():
    # q0 scanning; q1/q2 counting in-band instants after reaching the outer
    # target; q3 after reaching the inner target; q4 accepting trap; q5 dead.
    dfa = Dfa.from_transitions(
        n_states=6, initial=0, alphabet=["p1", "p2", "p3", "p4"],
        transitions=[
            (0, "p1", 3), (0, "p2", 1), (0, "p3", 0), (0, "p4", 5),
            (1, "p1", 3), (1, "p2", 2), (1, "p3", 0), (1, "p4", 5),
            (2, "p1", 4), (2, "p2", 4), (2, "p3", 0), (2, "p4", 5),
            (3, "p1", 4), (3, "p2", 4), (3, "p3", 0), (3, "p4", 5),
            (4, "p1", 4), (4, "p2", 4), (4, "p3", 4), (4, "p4", 4),
            (5, "p1", 5), (5, "p2", 5), (5, "p3", 5), (5, "p4", 5),
        ],
        accepting=[4],
    )
    labels = LabelMap(
        box_lo=[[-0.1], [-0.45], [0.1], [-0.8], [0.45], [-INF], [0.8]],
        box_hi=[[0.1], [-0.1], [0.45], [-0.45], [0.8], [-0.8], [INF]],
        symbols=("p1", "p2", "p2", "p3", "p3", "p4", "p4"),
        absorbing_symbol="p4",
        alphabet=dfa.alphabet,
    )
    return dfa, labels


RECON_NOTE = "Reconstructed from the prose property description; transition structure is not verbatim."


def running_published_certificate(game, red, skeleton):
    M = np.array([[0.0132, 0.0082, 0.0146], [0.0082, 0.0110, 0.0074], [0.0146, 0.0074, 0.0188]])
    K = np.array([[-0.1163, -0.0355, -0.0999], [-0.0367, -0.0499, -0.0514], [0.0222, -0.0215, 0.0125]])
    L = np.array([[-0.0450, -0.0824, -0.0200], [-0.0682, -0.0761, -0.0573], [0.0524, 0.0666, 0.0378]])
    R_tilde = np.array([[0.0422], [0.0213], [0.0562]])
    eps, delta = 0.1509, 0.001
    M_w, eps_w = np.eye(1), 0.05
    red_n = red.with_noise(np.array([[0.8256]]))
    gammas = compute_gammas(game, red_n, skeleton, M, delta, R_tilde, M_w, eps_w)
    constraints = intersect_input_constraints(game, red_n, skeleton, R_tilde)
    report = check_lmi_conditions(game, red_n, M, K, L, eps, delta, gammas.total,
                                  tol=1e-2, constraints=constraints)
    cert = RelationCertificate(
        M=M, eps=eps, delta=delta, K=K, L=L, R_tilde=R_tilde,
        kappa=report["kappa_min"], M_w=M_w, eps_w=eps_w, gammas=gammas, tolerance=1e-2,
    )
    doc = art.certificate_to_json(cert, abstraction=skeleton, verification=report, source="published")
    doc["R_r"] = [[0.8256]]
    return doc


def quadrotor_published_certificate(game, red, skeleton):
    M = np.array([[1.7699, 0.5494], [0.5494, 0.3920]])
    K = np.array([[-0.4294, -0.2773]])
    L = np.zeros((1, 2))
    R_tilde = np.array([[1.0]])
    eps, delta = 0.2911, 0.0
    M_w, eps_w = np.eye(1), 0.05
    red_n = red.with_noise(game.R)
    gammas = compute_gammas(game, red_n, skeleton, M, delta, R_tilde, M_w, eps_w)
    constraints = intersect_input_constraints(game, red_n, skeleton, R_tilde)
    report = check_lmi_conditions(game, red_n, M, K, L, eps, delta, gammas.total,
                                  tol=1e-2, constraints=constraints)
    cert = RelationCertificate(
        M=M, eps=eps, delta=delta, K=K, L=L, R_tilde=R_tilde,
        kappa=report["kappa_min"], M_w=M_w, eps_w=eps_w, gammas=gammas, tolerance=1e-2,
    )
    doc = art.certificate_to_json(cert, abstraction=skeleton, verification=report, source="published")
    doc["R_r"] = art.matrix_to_json(game.R)
    return doc


def main():
    running = DATA / "running"
    quad = DATA / "quadrotor"
    running.mkdir(parents=True, exist_ok=True)
    quad.mkdir(parents=True, exist_ok=True)

    game = running_game()
    art.dump_json(art.game_to_json(game), running / "game.json")
    dfa, labels = running_monitor()
    art.dump_json(art.monitor_to_json(dfa, labels, notes=RECON_NOTE), running / "dfa_psi.json")

    red = reduce_model(game, P=[[0.6199], [0.4443], [0.6219]], B_r=[[1.0]],
                       A_r=[[0.55]], E_r=[[0.32]], D_r=[[1.0]])
    art.dump_json(art.reduced_to_json(red), running / "reduced_published.json")
    skeleton = FiniteAbstraction(
        grid=Grid(lo=[-12.0], hi=[12.0], eta=[0.24]),
        u_grid=Grid(lo=[-1.5], hi=[1.5], eta=[0.06]),
        w_grid=Grid(lo=[-0.5], hi=[0.5], eta=[0.1]),
        output_matrix=red.C_r,
    )
    art.dump_json(running_published_certificate(game, red, skeleton), running / "certificate_published.json")
    art.dump_json(
        {
            "game": "game.json",
            "dfa": "dfa_psi.json",
            "reduction": {"P": [[0.6199], [0.4443], [0.6219]], "B_r": [[1.0]],
                          "A_r": [[0.55]], "E_r": [[0.32]], "D_r": [[1.0]]},
            "abstraction": {"state_lo": [-12.0], "state_hi": [12.0], "state_eta": [0.24],
                            "u_lo": [-1.5], "u_hi": [1.5], "u_eta": [0.06],
                            "w_eta": [0.1], "kernel_mode": "dense"},
            "relation": {"delta": 2e-5, "eps_min": 0.05, "eps_max": 1.0,
                         "n_eps": 24, "n_kappa": 20, "M_w": [[1.0]], "eps_w": 0.05},
            "synthesis": {"horizon": 20, "problem": "violation"},
            "simulation": {"x0": [[3.8, 4.1, 2.9]], "runs": 10000, "seed": 20240817,
                           "adversary": {"kind": "uniform"}},
        },
        running / "config.json",
    )

    game_q = quadrotor_game()
    art.dump_json(art.game_to_json(game_q), quad / "game.json")
    for name, (d, l) in (("dfa_psi1.json", psi1_monitor()),
                         ("dfa_psi2.json", psi2_monitor()),
                         ("dfa_psi3.json", psi3_monitor())):
        art.dump_json(art.monitor_to_json(d, l, notes=RECON_NOTE), quad / name)

    red_q = reduce_model(game_q, P=np.eye(2), B_r=game_q.B, A_r=game_q.A,
                         E_r=game_q.E, D_r=game_q.D)
    art.dump_json(art.reduced_to_json(red_q), quad / "reduced_published.json")
    skeleton_q = FiniteAbstraction(
        grid=Grid(lo=[-0.7, -0.5], hi=[0.7, 0.5], eta=[0.02, 0.02]),
        u_grid=Grid(lo=[-0.25], hi=[0.25], eta=[0.02]),
        w_grid=Grid(lo=[-0.6], hi=[0.6], eta=[0.1]),
        u_prime_lo=[-0.12], u_prime_hi=[0.12],
        output_matrix=red_q.C_r,
    )
    art.dump_json(quadrotor_published_certificate(game_q, red_q, skeleton_q), quad / "certificate_published.json")
    art.dump_json(
        {
            "game": "game.json",
            "dfa": "dfa_psi1.json",
            "reduction": {"P": "identity", "B_r": "B", "A_r": None, "E_r": None, "D_r": None},
            "abstraction": {"state_lo": [-0.7, -0.5], "state_hi": [0.7, 0.5],
                            "state_eta": [0.02, 0.02],
                            "u_lo": [-0.25], "u_hi": [0.25], "u_eta": [0.02],
                            "u_prime_lo": [-0.12], "u_prime_hi": [0.12],
                            "w_eta": [0.1], "kernel_mode": "sparse", "threshold": 1e-12},
            "relation": {"delta": 0.0, "eps_min": 0.05, "eps_max": 0.4,
                         "n_eps": 24, "n_kappa": 20, "M_w": [[1.0]], "eps_w": 0.05},
            "synthesis": {"horizon": 1200, "problem": "violation"},
            "simulation": {"x0": [[0.2, 0.2]], "runs": 1000, "seed": 7,
                           "adversary": {"kind": "uniform"}},
        },
        quad / "config_psi1.json",
    )
    # Desk-scale substitute: the fine-grid kernels need tens of GB. The
    # coarser grid admits no certificate with a feedforward budget, so the
    # synthesis input collapses to {0}; the resulting guarantee is vacuous
    # but every bound stays sound.
    art.dump_json(
        {
            "game": "game.json",
            "dfa": "dfa_psi1.json",
            "reduction": {"P": "identity", "B_r": "B", "A_r": None, "E_r": None, "D_r": None},
            "abstraction": {"state_lo": [-0.7, -0.5], "state_hi": [0.7, 0.5],
                            "state_eta": [0.05, 0.05],
                            "u_lo": [-0.25], "u_hi": [0.25], "u_eta": [0.5],
                            "w_eta": [0.1], "kernel_mode": "sparse", "threshold": 1e-12},
            "relation": {"delta": 0.0, "eps_min": 0.8, "eps_max": 2.0,
                         "n_eps": 24, "n_kappa": 20, "M_w": [[1.0]], "eps_w": 0.05},
            "synthesis": {"horizon": 200, "problem": "violation"},
            "simulation": {"x0": [[0.2, 0.2]], "runs": 1000, "seed": 11,
                           "adversary": {"kind": "uniform"}},
        },
        quad / "config_psi1_desk.json",
    )
    print("bundled data written under", DATA)


if __name__ == "__main__":
    main()
