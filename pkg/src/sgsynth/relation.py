"""Approximate probabilistic relations: error-term computation, LMI condition
checking, the joint metric/gain SDP, the certificate search driver, and the
interface function refining abstract inputs to concrete ones."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import gammainc, gammaln

from sgsynth.abstraction import FiniteAbstraction, rep_point
from sgsynth.errors import (
    CertificateInvalid,
    ConfigurationError,
    EmptyInteriorError,
    InfeasibleNoiseMismatch,
    NoInitialAbstractState,
)
from sgsynth.model import ReducedOrderGame, StochasticGame, slope_gain

__all__ = [
    "GammaTerms",
    "RelationCertificate",
    "InputConstraintSet",
    "chi2_inverse_cdf",
    "compute_gammas",
    "check_lmi_conditions",
    "intersect_input_constraints",
    "solve_mkl_sdp",
    "optimal_abstract_noise",
    "establish_relation",
    "interface_input",
    "in_relation",
    "initial_abstract_state",
]

log = logging.getLogger(__name__)

STRICT_TOL = 1e-7
PRINTED_TOL = 1e-2  # certificates transcribed from 4-decimal listings

# Module-wide tally of interface outputs that left the input polytope; the
# refinement theorem says this stays at zero while the relation holds.
POLYTOPE_VIOLATIONS = {"count": 0}


def chi2_inverse_cdf(p: float, dof: int) -> float:
    """Inverse chi-square CDF by bisection + Newton on the regularized
    incomplete gamma form of the forward CDF."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("probability out of [0, 1]")
    if dof < 1:
        raise ConfigurationError("degrees of freedom must be >= 1")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return float("inf")

    k = dof / 2.0

    def cdf(x):
        return gammainc(k, x / 2.0)

    lo, hi = 0.0, max(4.0 * dof, 16.0)
    while cdf(hi) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    # Newton polish on the chi-square density.
    for _ in range(8):
        f = cdf(x) - p
        pdf = 0.5 * np.exp((k - 1.0) * np.log(x / 2.0) - x / 2.0 - gammaln(k)) if x > 0 else 0.0
        if pdf <= 0:
            break
        step = f / pdf
        if not np.isfinite(step):
            break
        x = min(max(x - step, lo), hi)
    return float(x)


def weighted_norm(v, M) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(np.sqrt(max(v @ M @ v, 0.0)))


def _solve_quietly(prob) -> bool:
    """Try the installed conic solvers; inaccurate solutions are fine because
    every candidate is re-verified by eigenvalue checks afterwards."""
    import warnings

    for solver in ("CLARABEL", "SCS"):
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                prob.solve(solver=solver)
        except Exception:
            continue
        if prob.status in ("optimal", "optimal_inaccurate"):
            return True
    return False


@dataclass(frozen=True)
class GammaTerms:
    g0: float
    g1: float
    g2: float
    g3: float
    g4: float

    @property
    def total(self) -> float:
        return self.g0 + self.g1 + self.g2 + self.g3 + self.g4

    def as_dict(self) -> dict:
        return {"gamma0": self.g0, "gamma1": self.g1, "gamma2": self.g2,
                "gamma3": self.g3, "gamma4": self.g4, "gamma_tilde": self.total}


@dataclass(frozen=True)
class RelationCertificate:
    """Ellipsoidal relation data: metric M, output precision eps, per-step
    coupling slack delta, tracking gains K and L, feedforward map R_tilde,
    contraction factor kappa, the adversary-side relation (M_w, eps_w), and
    the worst-case error breakdown."""

    M: np.ndarray
    eps: float
    delta: float
    K: np.ndarray
    L: np.ndarray
    R_tilde: np.ndarray
    kappa: float
    M_w: np.ndarray
    eps_w: float
    gammas: GammaTerms
    tolerance: float = STRICT_TOL

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        M_w = np.atleast_2d(np.asarray(self.M_w, dtype=float))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "M_w", M_w)
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))
        object.__setattr__(self, "L", np.atleast_2d(np.asarray(self.L, dtype=float)))
        object.__setattr__(self, "R_tilde", np.atleast_2d(np.asarray(self.R_tilde, dtype=float)))
        for name, mat in (("M", M), ("M_w", M_w)):
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise CertificateInvalid(f"{name} is not positive definite") from None
        if not (self.eps > 0 and 0.0 <= self.delta < 1.0 and self.kappa >= 0.0):
            raise CertificateInvalid("eps/delta/kappa out of range")
        budget = self.eps * (1.0 - np.sqrt(self.kappa))
        if self.gammas.total > budget + self.tolerance * self.eps:
            raise CertificateInvalid(
                f"gamma_tilde {self.gammas.total:.6g} exceeds eps(1-sqrt(kappa)) {budget:.6g}"
            )


@dataclass(frozen=True)
class InputConstraintSet:
    """Intersection polytope of the shifted input constraints, with rows
    normalized to alpha_i ubar <= 1."""

    A_tilde: np.ndarray
    b_tilde: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_tilde, dtype=float))
        b = np.asarray(self.b_tilde, dtype=float).ravel()
        if np.any(b <= 0):
            raise EmptyInteriorError(
                "shifted input polytope has no interior; shrink the synthesis input set or the grid"
            )
        object.__setattr__(self, "A_tilde", A)
        object.__setattr__(self, "b_tilde", b)

    @property
    def alphas(self) -> np.ndarray:
        return self.A_tilde / self.b_tilde[:, None]


def compute_gammas(
    game: StochasticGame,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    M,
    delta: float,
    R_tilde,
    M_w,
    eps_w: float,
) -> GammaTerms:
    """Worst-case one-step error contributions in the M-weighted norm.

    The adversary term is the exact ellipsoid maximum, the noise term uses the
    chi-square tail radius at level 1 - delta, the quantization term maximizes
    over the offset-box vertices, and the remaining two enumerate the finite
    input sets.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M_w = np.atleast_2d(np.asarray(M_w, dtype=float))
    R_tilde = np.atleast_2d(np.asarray(R_tilde, dtype=float))
    if red.R_r is None:
        raise ConfigurationError("reduced model needs R_r before the noise term can be bounded")

    # gamma0: max ||D w||_M over the (M_w, eps_w) ellipsoid.
    quad = game.D.T @ M @ game.D
    sigma_sq = float(np.max(scipy.linalg.eigh(quad, M_w, eigvals_only=True)))
    g0 = eps_w * float(np.sqrt(max(sigma_sq, 0.0)))

    # gamma1: input-matrix mismatch over the synthesis input set.
    mismatch = game.B @ R_tilde - red.P @ red.B_r
    u_pts = abstraction.u_prime_points()
    g1 = max((weighted_norm(mismatch @ u, M) for u in u_pts), default=0.0)

    # gamma2: noise-matrix mismatch against the chi-square tail radius.
    A_n = game.R - red.P @ red.R_r
    mismatch_scale = np.linalg.norm(A_n) / (1.0 + np.linalg.norm(game.R))
    d = game.R.shape[1]
    if mismatch_scale <= 1e-12:
        g2 = 0.0
    elif delta == 0.0:
        raise InfeasibleNoiseMismatch(
            "delta = 0 requires R = P R_r exactly; noise mismatch norm "
            f"{np.linalg.norm(A_n):.3e} makes the noise error term unbounded"
        )
    else:
        radius = float(np.sqrt(chi2_inverse_cdf(1.0 - delta, d)))
        g2 = radius * float(np.sqrt(max(np.max(np.linalg.eigvalsh(A_n.T @ M @ A_n)), 0.0)))

    # gamma3: state quantization over the offset-box vertices.
    half = abstraction.grid.eta / 2.0
    s_hat = red.order
    g3 = 0.0
    for mask in range(2**s_hat):
        beta = np.array([half[i] if (mask >> i) & 1 else -half[i] for i in range(s_hat)])
        g3 = max(g3, weighted_norm(red.P @ beta, M))

    # gamma4: adversary-residual term over the finite adversary inputs.
    bs = game.B @ red.S
    g4 = max((weighted_norm(bs @ w, M) for w in abstraction.w_points()), default=0.0)

    return GammaTerms(g0, g1, g2, g3, g4)


def _contraction_factor(game: StochasticGame, M, K, L) -> float:
    """kappa_min: worst M-metric contraction over the extreme slopes."""
    N = np.linalg.cholesky(M).T
    N_inv = np.linalg.inv(N)
    worst = 0.0
    for b in game.phi.slope_values:
        A_b = game.A + game.B @ K + b * (game.B @ L + game.E @ game.F)
        worst = max(worst, float(np.linalg.norm(N @ A_b @ N_inv, 2)) ** 2)
    return worst


def check_lmi_conditions(
    game: StochasticGame,
    red: ReducedOrderGame,
    M,
    K,
    L,
    eps: float,
    delta: float,
    gamma_tilde: float,
    tol: float = STRICT_TOL,
    constraints: InputConstraintSet | None = None,
) -> dict:
    """Verify the relation conditions for a candidate (M, K, L).

    Checks positive definiteness, the output-error bound, the contraction
    factor against the error budget, and (when the constraint set is given)
    the normalized input-constraint inequalities. Feasibility at the three
    extreme slopes extends to the whole slope interval by convexity.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
        raise CertificateInvalid("M is not symmetric")
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise CertificateInvalid("M is not positive definite") from None

    scale = 1.0 + float(np.linalg.norm(M, 2))
    output_margin = float(np.min(np.linalg.eigvalsh(M - game.C.T @ game.C))) / scale
    kappa_min = _contraction_factor(game, M, K, L)
    slack = 1.0 - gamma_tilde / eps
    budget_margin = slack - np.sqrt(kappa_min)

    report = {
        "output_margin": output_margin,
        "kappa_min": kappa_min,
        "sqrt_kappa_min": float(np.sqrt(kappa_min)),
        "budget_slack": slack,
        "budget_margin": float(budget_margin),
        "checks": {
            "output_bound": output_margin >= -tol,
            "budget": budget_margin >= -tol,
            "slack_in_unit": slack <= 1.0 + tol,
        },
    }
    if constraints is not None:
        M_inv = np.linalg.inv(M)
        worst = -np.inf
        for alpha in constraints.alphas:
            for b in game.phi.slope_values:
                KL = K + b * L
                worst = max(worst, float(alpha @ KL @ M_inv @ KL.T @ alpha.T))
        report["input_quad_max"] = worst
        report["checks"]["input_constraints"] = worst <= (1.0 + tol) / eps**2
    report["feasible"] = all(report["checks"].values())
    return report


def intersect_input_constraints(
    game: StochasticGame,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    R_tilde,
) -> InputConstraintSet:
    """Tightest shifted input polytope over all abstract state/input pairs.

    All member polytopes share the row matrix, so the intersection keeps it
    and takes the row-wise minimum of the shifted offsets; the shift is
    separable in the state and input contributions.
    """
    R_tilde = np.atleast_2d(np.asarray(R_tilde, dtype=float))
    centers = abstraction.state_centers()
    u_pts = abstraction.u_prime_points()
    A_u, b_u = game.u_poly_A, game.u_poly_b
    state_shift = (
        centers @ red.Qm.T + red.phi(centers @ red.F_r.T) @ red.G.T
    ) @ A_u.T  # (n_states, r)
    input_shift = (u_pts @ R_tilde.T) @ A_u.T  # (n_u', r)
    shift_max = state_shift.max(axis=0) + (input_shift.max(axis=0) if input_shift.size else 0.0)
    return InputConstraintSet(A_u, b_u - shift_max)


def solve_mkl_sdp(
    game: StochasticGame,
    constraints: InputConstraintSet,
    eps: float,
    kappa: float,
    objective: str = "logdet",
    quant_vertices=None,
):
    """Joint metric/gain synthesis at a fixed (eps, kappa) sample.

    Solves the convex program in the inverse metric: positive definiteness,
    the output-error block, contraction blocks at the three extreme slopes,
    and one input block per constraint row and slope. The default objective
    grows the inverse-metric volume; ``min_gamma"`` instead shrinks the
    worst quantization-vertex norm, which can reach shapes the volume
    heuristic misses. Returns (M, K, L) or None when infeasible.
    """
    import cvxpy as cp

    s, m = game.A.shape[0], game.B.shape[1]
    slopes = game.phi.slope_values
    M_bar = cp.Variable((s, s), symmetric=True)
    K_bar = cp.Variable((m, s))
    L_bar = cp.Variable((m, s))
    q_out = game.C.shape[0]

    cons = [M_bar >> 1e-8 * np.eye(s)]
    cons.append(cp.bmat([[M_bar, M_bar @ game.C.T], [game.C @ M_bar, np.eye(q_out)]]) >> 0)
    for b in slopes:
        A_bar = (game.A + b * (game.E @ game.F)) @ M_bar + game.B @ (K_bar + b * L_bar)
        cons.append(cp.bmat([[M_bar, A_bar], [A_bar.T, kappa * M_bar]]) >> 0)
        KL = K_bar + b * L_bar
        for alpha in constraints.alphas:
            a = alpha.reshape(1, -1)
            cons.append(cp.bmat([[np.eye(1) / eps**2, a @ KL], [(a @ KL).T, M_bar]]) >> 0)

    if objective == "logdet":
        obj = cp.Maximize(cp.log_det(M_bar))
    elif objective == "min_gamma3":
        if quant_vertices is None:
            raise ConfigurationError("min_gamma3 objective needs the lifted quantization vertices")
        t = cp.Variable()
        for vert in quant_vertices:
            v = np.asarray(vert, dtype=float).reshape(-1, 1)
            cons.append(cp.bmat([[cp.reshape(t, (1, 1), order="F"), v.T], [v, M_bar]]) >> 0)
        obj = cp.Minimize(t)
    else:
        raise ConfigurationError(f"unknown SDP objective {objective!r}")

    prob = cp.Problem(obj, cons)
    if not _solve_quietly(prob) or M_bar.value is None:
        return None

    M_bar_v = 0.5 * (M_bar.value + M_bar.value.T)
    try:
        M = np.linalg.inv(M_bar_v)
    except np.linalg.LinAlgError:
        return None
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None
    K = K_bar.value @ M
    L = L_bar.value @ M

    # Scale repair: growing M (with K, L fixed) leaves the contraction and
    # input blocks invariant and can only strengthen M >= C^T C.
    gen = np.max(scipy.linalg.eigh(game.C.T @ game.C, M, eigvals_only=True))
    if gen > 1.0:
        if gen > 1.0 + 1e-5:
            return None
        M = M * (gen * (1.0 + 1e-9))
    # Guard against degenerate "solutions" of unbounded instances: the
    # contraction blocks must actually hold at the sampled level.
    if _contraction_factor(game, M, K, L) > kappa + 1e-5:
        return None
    return M, K, L


def polish_gains(game: StochasticGame, M, constraints: InputConstraintSet, eps: float):
    """Minimize the contraction factor over (K, L) for a fixed metric.

    The joint SDP pushes the contraction onto its sampled bound; with the
    metric frozen, the gain problem is convex again and often yields a
    strictly smaller factor, freeing error budget. Returns (K, L) or None.
    """
    import cvxpy as cp

    M = np.atleast_2d(np.asarray(M, dtype=float))
    s, m = game.A.shape[0], game.B.shape[1]
    N = np.linalg.cholesky(M).T
    M_inv_half = np.linalg.inv(N)  # columns scale the input rows
    K = cp.Variable((m, s))
    L = cp.Variable((m, s))
    t = cp.Variable()
    cons = []
    for b in game.phi.slope_values:
        A_b = game.A + b * (game.E @ game.F) + game.B @ (K + b * L)
        # A_b^T M A_b <= t M  via the Schur block with the Cholesky factor.
        cons.append(cp.bmat([[t * M, (N @ A_b).T], [N @ A_b, np.eye(s)]]) >> 0)
        for alpha in constraints.alphas:
            a = alpha.reshape(1, -1)
            cons.append(cp.norm((a @ (K + b * L)) @ M_inv_half, 2) <= 1.0 / eps)
    prob = cp.Problem(cp.Minimize(t), cons)
    if _solve_quietly(prob) and K.value is not None:
        return K.value, L.value
    return None


def optimal_abstract_noise(M, P, R) -> np.ndarray:
    """M-weighted projection of the noise matrix onto the abstraction range;
    the column-wise minimizer of the noise-mismatch norm."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    gram = P.T @ M @ P
    try:
        return np.linalg.solve(gram, P.T @ M @ R)
    except np.linalg.LinAlgError:
        raise ConfigurationError("P^T M P is singular; the projection is undefined") from None


def default_feedforward(game: StochasticGame, red: ReducedOrderGame) -> np.ndarray:
    """Least-squares feedforward map matching B R_tilde to P B_r."""
    return np.linalg.solve(game.B.T @ game.B, game.B.T @ red.P @ red.B_r)


def establish_relation(
    game: StochasticGame,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    delta: float,
    eps_range: tuple[float, float],
    M_w=None,
    eps_w: float | None = None,
    n_eps: int = 24,
    n_kappa: int = 20,
    R_tilde=None,
    report: dict | None = None,
):
    """Search the (eps, kappa) lattice for a certified relation.

    Per sample: solve the metric/gain SDP, pick the optimal abstract noise
    matrix, evaluate the error terms, and accept the first candidate whose
    recomputed contraction factor fits the error budget and whose relation
    covers every declared initial state. Samples are visited
    smallest-eps-first, so the returned certificate minimizes eps over the
    lattice. Returns the certificate paired with the noise-completed reduced
    model, or None.
    """
    if not 0.0 <= delta < 1.0:
        raise ConfigurationError("delta must be in [0, 1)")
    if M_w is None:
        M_w = np.eye(game.D.shape[1])
    if eps_w is None:
        eps_w = abstraction.w_quantization_radius()
    R_tilde = default_feedforward(game, red) if R_tilde is None else np.atleast_2d(np.asarray(R_tilde, dtype=float))
    constraints = intersect_input_constraints(game, red, abstraction, R_tilde)
    if report is not None:
        report["b_tilde"] = constraints.b_tilde.tolist()
        report["attempts"] = []

    half = abstraction.grid.eta / 2.0
    s_hat = red.order
    vertices = [
        red.P @ np.array([half[i] if (mask >> i) & 1 else -half[i] for i in range(s_hat)])
        for mask in range(2**s_hat)
    ]
    for eps in np.linspace(eps_range[0], eps_range[1], n_eps):
        for kappa in np.linspace(0.0, 1.0, n_kappa):
            candidates = []
            for objective in ("logdet", "min_gamma3"):
                triple = solve_mkl_sdp(game, constraints, float(eps), float(kappa),
                                       objective=objective, quant_vertices=vertices)
                if triple is None:
                    # Both objectives share the constraint set; an infeasible
                    # sample stays infeasible under the other objective.
                    break
                candidates.append((objective, triple))
            # The joint SDP drives the contraction onto the sampled bound; a
            # gain polish at the frozen metric can land strictly below it.
            for objective, (M, _, _) in list(candidates):
                polished = polish_gains(game, M, constraints, float(eps))
                if polished is not None:
                    candidates.append((objective + "+polish", (M, *polished)))
            for objective, (M, K, L) in candidates:
                R_r = optimal_abstract_noise(M, red.P, game.R)
                red_n = red.with_noise(R_r)
                try:
                    gammas = compute_gammas(game, red_n, abstraction, M, delta, R_tilde, M_w, eps_w)
                except InfeasibleNoiseMismatch as exc:
                    if report is not None:
                        report["attempts"].append(
                            {"eps": float(eps), "kappa": float(kappa), "objective": objective,
                             "outcome": f"noise mismatch: {exc}"}
                        )
                    continue
                verify = check_lmi_conditions(
                    game, red_n, M, K, L, float(eps), delta, gammas.total,
                    tol=1e-8, constraints=constraints,
                )
                if report is not None:
                    report["attempts"].append(
                        {"eps": float(eps), "kappa": float(kappa), "objective": objective,
                         "outcome": "accepted" if verify["feasible"] else "budget check failed",
                         "kappa_min": verify["kappa_min"],
                         "gamma_tilde": gammas.total}
                    )
                if not verify["feasible"]:
                    continue
                cert = RelationCertificate(
                    M=M, eps=float(eps), delta=delta, K=K, L=L, R_tilde=R_tilde,
                    kappa=verify["kappa_min"], M_w=M_w, eps_w=float(eps_w), gammas=gammas,
                )
                if not _covers_initial_states(cert, red_n, abstraction, game.x0_set):
                    if report is not None:
                        report["attempts"][-1]["outcome"] = "initial state not covered"
                    continue
                return cert, red_n
    return None


def _covers_initial_states(cert, red, abstraction, x0_set) -> bool:
    for x0 in x0_set:
        try:
            initial_abstract_state(cert, red, abstraction, x0)
        except NoInitialAbstractState:
            return False
    return True


def interface_input(cert: RelationCertificate, game: StochasticGame, red: ReducedOrderGame, x, x_hat, u_hat) -> np.ndarray:
    """Refine an abstract input to a concrete one for the coupled pair.

    The tracking term uses the realized slope gain; the remaining terms
    replay the model-matching decomposition. Input-polytope violations are
    counted, not raised: boundary arithmetic may overshoot by rounding, and
    genuine violations consume the relation's slack, which the simulation
    report surfaces.
    """
    x = np.asarray(x, dtype=float).ravel()
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    u_hat = np.atleast_1d(np.asarray(u_hat, dtype=float))
    b = slope_gain(game, red, x, x_hat)
    err = x - (red.P @ x_hat)
    u = (
        (cert.K + b * cert.L) @ err
        + red.Qm @ x_hat
        + (cert.R_tilde @ u_hat).ravel()
        + (red.G @ red.phi(red.F_r @ x_hat)).ravel()
    )
    if np.any(game.u_poly_A @ u > game.u_poly_b + 1e-9):
        POLYTOPE_VIOLATIONS["count"] += 1
        log.warning("interface output %s violates the input polytope", u)
    return u


def in_relation(cert: RelationCertificate, red: ReducedOrderGame, x, x_hat) -> bool:
    """Closed-ellipsoid membership of the coupled state pair."""
    err = np.asarray(x, dtype=float).ravel() - red.P @ np.asarray(x_hat, dtype=float).ravel()
    return bool(err @ cert.M @ err <= cert.eps**2)


def initial_abstract_state(
    cert: RelationCertificate,
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    x0,
) -> int:
    """Quantized M-weighted projection of the initial state, with a coverage
    check; raises when x0 is not coverable at this eps."""
    x0 = np.asarray(x0, dtype=float).ravel()
    proj = np.linalg.solve(red.P.T @ cert.M @ red.P, red.P.T @ cert.M @ x0)
    idx = rep_point(abstraction, proj)
    if idx == abstraction.phi_index:
        raise NoInitialAbstractState(f"projection {proj} of {x0} leaves the region of interest")
    if not in_relation(cert, red, x0, abstraction.grid.center(idx)):
        raise NoInitialAbstractState(f"{x0} is not within eps of any abstract state")
    return idx
