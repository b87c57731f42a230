"""Concrete game dynamics, slope-restricted nonlinearity, and reduced-order
model construction under the matching conditions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from sgsynth.errors import ConfigurationError, ImageConditionViolated

__all__ = [
    "SlopeNonlinearity",
    "StochasticGame",
    "ReducedOrderGame",
    "eval_dynamics",
    "slope_gain",
    "reduce_model",
    "check_stabilizability",
]

MATCH_RTOL = 1e-8  # relative residual bound for the matching equations


@dataclass(frozen=True)
class SlopeNonlinearity:
    """Scalar nonlinearity with analytically known slope bounds.

    Built-in kinds carry exact bounds; a custom kind must state its own, since
    the bounds drive the soundness of the relation and are never inferred
    numerically.
    """

    kind: str = "zero"
    param: float = 1.0
    b_lower: float = 0.0
    b_upper: float = 0.0
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    _BUILTINS = ("zero", "sine", "scaled_sine", "saturation", "tanh")

    def __post_init__(self):
        if self.kind in self._BUILTINS:
            lo, hi = self._builtin_bounds()
            object.__setattr__(self, "b_lower", lo)
            object.__setattr__(self, "b_upper", hi)
        elif self.func is None:
            raise ConfigurationError(f"unknown nonlinearity kind {self.kind!r}")
        if self.b_lower > self.b_upper:
            raise ConfigurationError("slope bounds out of order")

    def _builtin_bounds(self):
        a = abs(self.param)
        return {
            "zero": (0.0, 0.0),
            "sine": (-1.0, 1.0),
            "scaled_sine": (-a, a),
            "saturation": (0.0, 1.0),
            "tanh": (0.0, 1.0),
        }[self.kind]

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "sine":
            return np.sin(v)
        if self.kind == "scaled_sine":
            return self.param * np.sin(v)
        if self.kind == "saturation":
            return np.clip(v, -self.param, self.param)
        if self.kind == "tanh":
            return np.tanh(v)
        return self.func(v)

    @property
    def slope_values(self) -> tuple[float, ...]:
        """Extreme slope evaluation points {b_lower, b_upper, 0}, deduplicated."""
        vals = []
        for b in (self.b_lower, self.b_upper, 0.0):
            if b not in vals:
                vals.append(b)
        return tuple(vals)


def _mat(x, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if rows is not None and a.shape[0] != rows:
        raise ConfigurationError(f"{name}: expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ConfigurationError(f"{name}: expected {cols} cols, got {a.shape[1]}")
    return a


@dataclass(frozen=True)
class StochasticGame:
    """The plant: linear two-player dynamics with one slope-restricted
    nonlinear channel, Gaussian process noise, and a linear output map."""

    A: np.ndarray  # s x s
    B: np.ndarray  # s x m
    C: np.ndarray  # q x s
    D: np.ndarray  # s x p
    E: np.ndarray  # s x 1
    F: np.ndarray  # 1 x s
    R: np.ndarray  # s x d
    phi: SlopeNonlinearity
    u_poly_A: np.ndarray  # r x m
    u_poly_b: np.ndarray  # r
    w_lo: np.ndarray  # p
    w_hi: np.ndarray  # p
    x0_set: tuple = ()

    def __post_init__(self):
        A = _mat(self.A, name="A")
        s = A.shape[0]
        if A.shape[1] != s:
            raise ConfigurationError("A must be square")
        B = _mat(self.B, rows=s, name="B")
        C = _mat(self.C, cols=s, name="C")
        D = _mat(self.D, rows=s, name="D")
        E = _mat(self.E, rows=s, cols=1, name="E")
        F = _mat(self.F, rows=1, cols=s, name="F")
        R = _mat(self.R, rows=s, name="R")
        Au = _mat(self.u_poly_A, cols=B.shape[1], name="u_poly_A")
        bu = np.asarray(self.u_poly_b, dtype=float).ravel()
        if bu.shape[0] != Au.shape[0]:
            raise ConfigurationError("u polytope row counts disagree")
        if np.any(bu <= 0):
            raise ConfigurationError("u polytope must contain the origin strictly (b_u > 0)")
        wl = np.asarray(self.w_lo, dtype=float).ravel()
        wh = np.asarray(self.w_hi, dtype=float).ravel()
        if wl.shape[0] != D.shape[1] or wh.shape[0] != D.shape[1]:
            raise ConfigurationError("w box dimension does not match D")
        if np.any(wl > wh) or not (np.all(np.isfinite(wl)) and np.all(np.isfinite(wh))):
            raise ConfigurationError("w box must be bounded with lo <= hi")
        for nm, v in (("A", A), ("B", B), ("C", C), ("D", D), ("E", E), ("F", F), ("R", R)):
            if not np.all(np.isfinite(v)):
                raise ConfigurationError(f"{nm} contains non-finite entries")
            object.__setattr__(self, nm, v)
        object.__setattr__(self, "u_poly_A", Au)
        object.__setattr__(self, "u_poly_b", bu)
        object.__setattr__(self, "w_lo", wl)
        object.__setattr__(self, "w_hi", wh)
        object.__setattr__(self, "x0_set", tuple(np.asarray(x, dtype=float).ravel() for x in self.x0_set))

    @property
    def dims(self):
        """(s, m, p, d, q_out) state/input/adversary/noise/output sizes."""
        return (
            self.A.shape[0],
            self.B.shape[1],
            self.D.shape[1],
            self.R.shape[1],
            self.C.shape[0],
        )

    def output(self, x) -> np.ndarray:
        return self.C @ np.asarray(x, dtype=float).ravel()

    @classmethod
    def from_boxes(cls, A, B, C, D, E, F, R, phi, u_lo, u_hi, w_lo, w_hi, x0_set=()):
        """Convenience constructor expanding a box input set to [I; -I] form."""
        u_lo = np.asarray(u_lo, dtype=float).ravel()
        u_hi = np.asarray(u_hi, dtype=float).ravel()
        m = u_lo.shape[0]
        Au = np.vstack([np.eye(m), -np.eye(m)])
        bu = np.concatenate([u_hi, -u_lo])
        return cls(A, B, C, D, E, F, R, phi, Au, bu, w_lo, w_hi, x0_set)


@dataclass(frozen=True)
class ReducedOrderGame:
    """Reduced-order companion of a game plus the matching residual matrices."""

    P: np.ndarray  # s x s_hat
    A_r: np.ndarray
    B_r: np.ndarray
    C_r: np.ndarray
    D_r: np.ndarray
    E_r: np.ndarray
    F_r: np.ndarray
    G: np.ndarray  # m x 1
    Qm: np.ndarray  # m x s_hat
    S: np.ndarray  # m x p
    phi: SlopeNonlinearity
    R_r: Optional[np.ndarray] = None  # s_hat x d, set by the relation stage or config

    def __post_init__(self):
        for nm in ("P", "A_r", "B_r", "C_r", "D_r", "E_r", "F_r", "G", "Qm", "S"):
            object.__setattr__(self, nm, np.atleast_2d(np.asarray(getattr(self, nm), dtype=float)))
        if self.R_r is not None:
            object.__setattr__(self, "R_r", np.atleast_2d(np.asarray(self.R_r, dtype=float)))

    @property
    def order(self) -> int:
        return self.P.shape[1]

    def with_noise(self, R_r) -> "ReducedOrderGame":
        return ReducedOrderGame(
            self.P, self.A_r, self.B_r, self.C_r, self.D_r, self.E_r, self.F_r,
            self.G, self.Qm, self.S, self.phi, R_r=R_r,
        )

    def drift(self, x_hat, u_hat, w_hat) -> np.ndarray:
        """Noise-free reduced-state successor A_r x + E_r phi(F_r x) + B_r u + D_r w."""
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        u_hat = np.asarray(u_hat, dtype=float).ravel()
        w_hat = np.asarray(w_hat, dtype=float).ravel()
        return (
            self.A_r @ x_hat
            + self.E_r @ self.phi(self.F_r @ x_hat)
            + self.B_r @ u_hat
            + self.D_r @ w_hat
        )

    def output(self, x_hat) -> np.ndarray:
        return self.C_r @ np.asarray(x_hat, dtype=float).ravel()

    def check_matching(self, game: StochasticGame):
        """Re-verify the construction equations; raises on violation."""
        _residual_or_raise("C_r", game.C @ self.P - self.C_r, game.C @ self.P)
        _residual_or_raise("F_r", game.F @ self.P - self.F_r, game.F @ self.P)
        _residual_or_raise("E", game.E - (self.P @ self.E_r - game.B @ self.G), game.E)
        _residual_or_raise("AP", game.A @ self.P - (self.P @ self.A_r - game.B @ self.Qm), game.A @ self.P)
        _residual_or_raise("D", game.D - (self.P @ self.D_r - game.B @ self.S), game.D)


def _residual_or_raise(which, resid, lhs):
    rel = np.linalg.norm(resid) / (1.0 + np.linalg.norm(lhs))
    if rel > MATCH_RTOL:
        raise ImageConditionViolated(which, rel)


def eval_dynamics(game: StochasticGame, x, u, w, noise) -> np.ndarray:
    """One concrete step: A x + B u + E phi(F x) + D w + R noise."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    noise = np.asarray(noise, dtype=float).ravel()
    s, m, p, d, _ = game.dims
    if x.shape[0] != s or u.shape[0] != m or w.shape[0] != p or noise.shape[0] != d:
        raise ConfigurationError(
            f"dimension mismatch: got x{x.shape}, u{u.shape}, w{w.shape}, noise{noise.shape}"
        )
    return game.A @ x + game.B @ u + game.E @ game.phi(game.F @ x) + game.D @ w + game.R @ noise


def slope_gain(game: StochasticGame, red: ReducedOrderGame, x, x_hat) -> float:
    """Realized slope of the nonlinearity between the coupled states.

    Defined as the difference quotient of phi between F x and F P x_hat; zero
    when the denominator vanishes. Clipped to the declared bounds to absorb
    floating-point overshoot at the quotient's extremes.
    """
    x = np.asarray(x, dtype=float).ravel()
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    fx = (game.F @ x).item()
    fpx = (game.F @ (red.P @ x_hat)).item()
    if fx == fpx:
        return 0.0
    quotient = ((game.phi(fx) - game.phi(fpx)) / (fx - fpx)).item()
    return float(np.clip(quotient, game.phi.b_lower, game.phi.b_upper))


def reduce_model(
    game: StochasticGame,
    P,
    B_r=None,
    A_r=None,
    E_r=None,
    D_r=None,
) -> ReducedOrderGame:
    """Construct the reduced-order game for an abstraction matrix P.

    Each matching system ``P X_r - B Z = Y`` is solved by pseudo-inverse:
    X_r is the projection of Y onto the abstraction range (so the identity
    reduction reproduces the original matrices exactly) and Z the minimum-norm
    residual matcher, with a joint minimum-norm fallback when the split
    projection misses a feasible decomposition. Passing an explicit reduced
    matrix (A_r/E_r/D_r) pins X_r instead. B_r defaults to the identity.
    Raises :class:`ImageConditionViolated` when a residual exceeds tolerance.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    s, m, p, _, _ = game.dims
    if P.shape[0] != s:
        raise ConfigurationError(f"P must have {s} rows")
    s_hat = P.shape[1]
    B_r = np.eye(s_hat) if B_r is None else np.atleast_2d(np.asarray(B_r, dtype=float))

    joint_pinv = np.linalg.pinv(np.hstack([P, -game.B]))
    p_pinv = np.linalg.pinv(P)
    b_pinv = np.linalg.pinv(game.B)

    def residual_ok(X, Z, Y):
        r = np.linalg.norm(Y - (P @ X - game.B @ Z))
        return r <= MATCH_RTOL * (1.0 + np.linalg.norm(Y))

    def solve(which, Y, pinned):
        Y = np.atleast_2d(Y)
        if pinned is None:
            X = p_pinv @ Y
            Z = b_pinv @ (P @ X - Y)
            if not residual_ok(X, Z, Y):
                sol = joint_pinv @ Y
                X, Z = sol[:s_hat], sol[s_hat:]
        else:
            X = np.atleast_2d(np.asarray(pinned, dtype=float))
            Z = b_pinv @ (P @ X - Y)
        _residual_or_raise(which, Y - (P @ X - game.B @ Z), Y)
        return X, Z

    A_r_m, Qm = solve("AP", game.A @ P, A_r)
    E_r_m, G = solve("E", game.E, E_r)
    D_r_m, S = solve("D", game.D, D_r)

    return ReducedOrderGame(
        P=P,
        A_r=A_r_m,
        B_r=B_r,
        C_r=game.C @ P,
        D_r=D_r_m,
        E_r=E_r_m,
        F_r=game.F @ P,
        G=G,
        Qm=Qm,
        S=S,
        phi=game.phi,
    )


def check_stabilizability(game: StochasticGame) -> dict[float, bool]:
    """PBH stabilizability test of (A + b' E F, B) at each extreme slope.

    A pair passes when every eigenvalue on or outside the unit circle keeps
    [A + b'EF - lambda I, B] at full row rank.
    """
    s = game.A.shape[0]
    out = {}
    for b in game.phi.slope_values:
        Ab = game.A + b * (game.E @ game.F)
        ok = True
        for lam in np.linalg.eigvals(Ab):
            if abs(lam) >= 1.0 - 1e-12:
                pencil = np.hstack([Ab - lam * np.eye(s), game.B.astype(complex)])
                if np.linalg.matrix_rank(pencil, tol=1e-10) < s:
                    ok = False
                    break
        out[float(b)] = ok
    return out
