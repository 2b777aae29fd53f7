"""Method of Moving Asymptotes for box-bounded inequality problems.

Each step builds the separable rational approximation of the objective
and constraints around the current iterate, with asymptotes adapted to
the oscillation history, and solves the convex subproblem through its
dual: the primal minimizer has a closed form per variable given the
multipliers, so the dual is maximized with L-BFGS-B.  Constraints are
expected in the form c(x) <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

#: multiplier ceiling standing in for elastic constraint relaxation; a
#: dual variable at the ceiling flags an infeasible subproblem
_DUAL_CAP = 1e6


@dataclass
class MMAState:
    """Asymptotes, the two previous iterates, and the tuning constants."""

    n: int
    lower: np.ndarray = None  # type: ignore[assignment]
    upper: np.ndarray = None  # type: ignore[assignment]
    x_prev1: np.ndarray | None = None
    x_prev2: np.ndarray | None = None
    iteration: int = 0
    move_limit: float = 0.1
    bound_lo: float = 0.0
    bound_hi: float = 1.0
    asymptote_init: float = 0.5
    asymptote_contract: float = 0.7
    asymptote_relax: float = 1.2

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.zeros(self.n)
        if self.upper is None:
            self.upper = np.zeros(self.n)


@dataclass
class MMAInfo:
    """Diagnostics of one subproblem solve."""

    feasible: bool
    dual: np.ndarray
    message: str = ""


def _update_asymptotes(state: MMAState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    span = state.bound_hi - state.bound_lo
    if state.iteration < 2 or state.x_prev1 is None or state.x_prev2 is None:
        low = x - state.asymptote_init * span
        upp = x + state.asymptote_init * span
    else:
        osc = (x - state.x_prev1) * (state.x_prev1 - state.x_prev2)
        factor = np.where(
            osc < 0.0,
            state.asymptote_contract,
            np.where(osc > 0.0, state.asymptote_relax, 1.0),
        )
        low = x - factor * (state.x_prev1 - state.lower)
        upp = x + factor * (state.upper - state.x_prev1)
        low = np.clip(low, x - 10.0 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10.0 * span)
    return low, upp


def mma_step(
    state: MMAState,
    x: np.ndarray,
    f0: float,
    df0: np.ndarray,
    fval: np.ndarray,
    dfdx: np.ndarray,
) -> tuple[np.ndarray, MMAState, MMAInfo]:
    """One MMA update of x given objective/constraint values and gradients.

    fval holds the m constraint values c_j(x) (feasible when <= 0) and
    dfdx their gradients with shape (m, n).  Returns the new iterate,
    the advanced state, and solve diagnostics.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    df0 = np.asarray(df0, dtype=np.float64).ravel()
    fval = np.atleast_1d(np.asarray(fval, dtype=np.float64))
    dfdx = np.atleast_2d(np.asarray(dfdx, dtype=np.float64))
    m, n = dfdx.shape
    if n != x.size or fval.size != m:
        raise ValueError("constraint shapes do not match the variable count")
    if not (np.all(np.isfinite(df0)) and np.all(np.isfinite(dfdx))):
        raise ValueError("gradients must be finite")

    low, upp = _update_asymptotes(state, x)
    span = state.bound_hi - state.bound_lo
    alfa = np.maximum.reduce(
        [np.full(n, state.bound_lo), low + 0.1 * (x - low), x - state.move_limit * span]
    )
    beta = np.minimum.reduce(
        [np.full(n, state.bound_hi), upp - 0.1 * (upp - x), x + state.move_limit * span]
    )

    ux = upp - x
    xl = x - low
    # rational coefficients; the small regularizer keeps the subproblem
    # strictly convex even where the gradient vanishes
    raa0 = 1e-5 / max(span, 1e-5)
    p0 = ux**2 * (1.001 * np.maximum(df0, 0.0) + 0.001 * np.maximum(-df0, 0.0) + raa0)
    q0 = xl**2 * (0.001 * np.maximum(df0, 0.0) + 1.001 * np.maximum(-df0, 0.0) + raa0)
    P = ux[None, :] ** 2 * np.maximum(dfdx, 0.0)
    Q = xl[None, :] ** 2 * np.maximum(-dfdx, 0.0)
    b = (P / ux[None, :]).sum(axis=1) + (Q / xl[None, :]).sum(axis=1) - fval

    def primal(y):
        pj = p0 + y @ P
        qj = q0 + y @ Q
        sp = np.sqrt(pj)
        sq = np.sqrt(qj)
        return np.clip((sp * low + sq * upp) / (sp + sq), alfa, beta)

    def neg_dual(y):
        xy = primal(y)
        pj = p0 + y @ P
        qj = q0 + y @ Q
        w = (pj / (upp - xy)).sum() + (qj / (xy - low)).sum() - y @ b
        return -w

    def neg_dual_grad(y):
        xy = primal(y)
        g = (P / (upp - xy)[None, :]).sum(axis=1) + (Q / (xy - low)[None, :]).sum(axis=1) - b
        return -g

    if m == 0:
        y_opt = np.zeros(0)
        feasible = True
        message = "unconstrained"
    else:
        res = minimize(
            neg_dual,
            0.1 * np.ones(m),
            jac=neg_dual_grad,
            bounds=[(0.0, _DUAL_CAP)] * m,
            method="L-BFGS-B",
            options={"ftol": 1e-14, "gtol": 1e-12, "maxiter": 500},
        )
        y_opt = res.x
        feasible = bool(np.all(y_opt < 0.999 * _DUAL_CAP))
        message = "" if feasible else "dual at cap: subproblem relaxed"

    x_new = primal(y_opt)
    new_state = MMAState(
        n=state.n,
        lower=low,
        upper=upp,
        x_prev1=x.copy(),
        x_prev2=None if state.x_prev1 is None else state.x_prev1.copy(),
        iteration=state.iteration + 1,
        move_limit=state.move_limit,
        bound_lo=state.bound_lo,
        bound_hi=state.bound_hi,
        asymptote_init=state.asymptote_init,
        asymptote_contract=state.asymptote_contract,
        asymptote_relax=state.asymptote_relax,
    )
    return x_new, new_state, MMAInfo(feasible=feasible, dual=y_opt, message=message)
