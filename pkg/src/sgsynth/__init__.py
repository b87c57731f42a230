"""Abstraction-based controller synthesis for stochastic two-player games.

The pipeline: reduce a game model to lower order, grid the reduced state and
input spaces into a finite abstraction, certify an approximate probabilistic
relation between game and abstraction, run max-min value iteration over the
abstraction/monitor product, and refine the table policy into a runtime
controller validated by Monte Carlo simulation.
"""

from sgsynth.dfa import Dfa, LabelMap, dfa_step, label_of, initial_product_state, labels_within_ball, q_eps_set
from sgsynth.model import (
    SlopeNonlinearity,
    StochasticGame,
    ReducedOrderGame,
    eval_dynamics,
    slope_gain,
    reduce_model,
    check_stabilizability,
)
from sgsynth.abstraction import (
    Grid,
    TransitionKernel,
    FiniteAbstraction,
    rep_point,
    project_w,
    cell_probability,
    build_kernel,
)
from sgsynth.relation import (
    RelationCertificate,
    InputConstraintSet,
    chi2_inverse_cdf,
    compute_gammas,
    check_lmi_conditions,
    intersect_input_constraints,
    solve_mkl_sdp,
    optimal_abstract_noise,
    establish_relation,
    interface_input,
    in_relation,
    initial_abstract_state,
)
from sgsynth.synthesis import (
    ValueTable,
    PolicyTable,
    SynthesisResult,
    successor_q_min,
    successor_q_max,
    bellman_sat_step,
    bellman_vio_step,
    synthesize,
    evaluate_fixed_policy,
    guarantee_at,
)
from sgsynth.runtime import (
    ControllerMemory,
    SimulationReport,
    controller_init,
    controller_output,
    controller_update,
    simulate_closed_loop,
)

__version__ = "0.1.0"
