from pathlib import Path

import numpy as np
import pytest

from sgsynth import artifacts as art
from sgsynth.abstraction import FiniteAbstraction

DATA = Path(__file__).resolve().parents[1] / "src" / "sgsynth" / "data"


def pytest_terminal_summary(terminalreporter):
    """Surface the acceptance-criterion lines even under output capture."""
    import sys

    mod = next((m for name, m in sys.modules.items()
                if name.endswith("test_acceptance") and hasattr(m, "LINES")), None)
    if mod and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)


def load_bundle(example: str):
    base = DATA / example
    game = art.game_from_json(art.load_json(base / "game.json"))
    dfa, labels = art.monitor_from_json(
        art.load_json(base / ("dfa_psi.json" if example == "running" else "dfa_psi1.json"))
    )
    red = art.reduced_from_json(art.load_json(base / "reduced_published.json"))
    cert_doc = art.load_json(base / "certificate_published.json")
    cert, skeleton = art.certificate_from_json(cert_doc)
    red = red.with_noise(np.asarray(cert_doc["R_r"], dtype=float))
    skeleton.output_matrix = red.C_r
    return {"game": game, "dfa": dfa, "labels": labels, "red": red,
            "cert": cert, "skeleton": skeleton, "base": base}


@pytest.fixture(scope="session")
def running():
    return load_bundle("running")


@pytest.fixture(scope="session")
def quadrotor():
    return load_bundle("quadrotor")


@pytest.fixture(scope="session")
def running_abstraction(running):
    """Benchmark-scale abstraction with the published noise matrix; built once."""
    from sgsynth.abstraction import build_kernel

    skel = running["skeleton"]
    ab = FiniteAbstraction(
        grid=skel.grid, u_grid=skel.u_grid, w_grid=skel.w_grid,
        u_prime_lo=skel.u_prime_lo, u_prime_hi=skel.u_prime_hi,
        output_matrix=skel.output_matrix,
    )
    ab.kernel = build_kernel(running["red"], ab, mode="dense")
    ab.r_r_used = running["red"].R_r
    return ab


def tiny_monitor():
    """Two-state safety monitor: 'bad' label traps in the accepting state."""
    from sgsynth.dfa import Dfa, LabelMap

    dfa = Dfa.from_transitions(
        n_states=2, initial=0, alphabet=["safe", "bad"],
        transitions=[(0, "safe", 0), (0, "bad", 1), (1, "safe", 1), (1, "bad", 1)],
        accepting=[1],
    )
    labels = LabelMap(
        box_lo=[[-1.0], [-np.inf], [1.0]],
        box_hi=[[1.0], [-1.0], [np.inf]],
        symbols=("safe", "bad", "bad"),
        absorbing_symbol="bad",
        alphabet=dfa.alphabet,
    )
    return dfa, labels
