"""Dense inequality-constrained convex QP solver with KKT differentiation.

Problems have the form

    minimize   1/2 z'Pz + q'z
    subject to Gz <= h

with P symmetric positive definite. The solver is a primal-dual
interior-point iteration with a Mehrotra predictor-corrector step; the
backward pass differentiates the solution map through the linearized KKT
conditions at the optimum. Gradients are only produced for (P, q): the
constraint data is fixed in this artifact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


class SolveStatus(enum.Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


class SingularKktError(RuntimeError):
    """KKT linearization is numerically singular (weakly active constraints)."""

    def __init__(self, cond_estimate):
        super().__init__(
            f"singular KKT system in backward pass (cond estimate {cond_estimate:.3e})")
        self.cond_estimate = cond_estimate


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    chol_P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        G = np.asarray(self.G, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"P must be square, got {P.shape}")
        n = P.shape[0]
        if q.shape != (n,):
            raise ValueError(f"q must have shape ({n},), got {q.shape}")
        if G.ndim != 2 or G.shape[1] != n:
            raise ValueError(f"G must have {n} columns, got {G.shape}")
        if h.shape != (G.shape[0],):
            raise ValueError(f"h must have shape ({G.shape[0]},), got {h.shape}")
        for name, a in (("P", P), ("q", q), ("G", G), ("h", h)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")
        self.P = 0.5 * (P + P.T)
        self.q = q
        self.G = G
        self.h = h
        try:
            self.chol_P = np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            raise ValueError("P is not positive definite") from None

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.G.shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    lam: np.ndarray
    status: SolveStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float


def check_kkt(problem, solution):
    """Max-norm KKT residuals (stationarity, primal feasibility, complementarity)."""
    return _residuals(problem, solution.z, solution.lam)


def _residuals(problem, z, lam):
    slack = problem.G @ z - problem.h
    stationarity = problem.P @ z + problem.q + problem.G.T @ lam
    r_stat = float(np.max(np.abs(stationarity))) if problem.n else 0.0
    if problem.m:
        r_prim = float(max(np.max(slack), 0.0))
        r_comp = float(np.max(np.abs(lam * slack)))
    else:
        r_prim = 0.0
        r_comp = 0.0
    return r_stat, r_prim, r_comp


def _max_step(x, dx):
    # largest alpha <= 1 keeping x + alpha*dx >= 0, given x > 0
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-x[neg] / dx[neg])))


def solve(problem, tol=1e-8, max_iter=50):
    """Solve one QP. Deterministic for identical inputs.

    Returns a QpSolution whose status is SOLVED only if all three KKT
    residuals are <= tol. MAX_ITERATIONS and INFEASIBLE are hard failures
    for callers in this artifact.
    """
    P, q, G, h = problem.P, problem.q, problem.G, problem.h
    n, m = problem.n, problem.m

    z = -sla.cho_solve((problem.chol_P, True), q, check_finite=False)
    if m == 0:
        lam = np.zeros(0)
        r = _residuals(problem, z, lam)
        return QpSolution(z, lam, SolveStatus.SOLVED, 0, r[1], r[0], r[2])

    # infeasible start: slacks shifted to be >= 1, duals at 1
    s = np.maximum(h - G @ z, 1.0)
    lam = np.ones(m)

    g_scale = max(1.0, float(np.max(np.abs(G))))
    status = SolveStatus.MAX_ITERATIONS
    it = 0
    for it in range(1, max_iter + 1):
        gz = G @ z
        gt_lam = G.T @ lam
        viol = gz - h
        stat_vec = P @ z + q + gt_lam
        r_stat = float(np.max(np.abs(stat_vec)))
        r_prim = float(max(np.max(viol), 0.0))
        r_comp = float(np.max(np.abs(lam * viol)))
        if r_stat <= tol and r_prim <= tol and r_comp <= tol:
            status = SolveStatus.SOLVED
            it -= 1
            break

        # Farkas-style certificate: lam >= 0 with G'lam ~ 0 and h'lam < 0
        lam_l1 = float(np.sum(lam))
        if lam_l1 > 1e4:
            if (np.max(np.abs(gt_lam)) <= 1e-8 * g_scale * lam_l1
                    and h @ lam <= -1e-8 * lam_l1):
                status = SolveStatus.INFEASIBLE
                break

        r_dual = stat_vec
        r_pri = gz + s - h
        w = lam / s
        M = P + (G.T * w) @ G

        try:
            cho = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            status = SolveStatus.MAX_ITERATIONS
            break

        def kkt_solve(r1, r2, r3):
            rhs = r1 - G.T @ ((r2 - lam * r3) / s)
            dz = sla.cho_solve(cho, rhs, check_finite=False)
            ds = r3 - G @ dz
            dlam = (r2 - lam * ds) / s
            return dz, ds, dlam

        # predictor (affine scaling)
        dz_a, ds_a, dl_a = kkt_solve(-r_dual, -(s * lam), -r_pri)
        alpha_a = min(_max_step(s, ds_a), _max_step(lam, dl_a))
        mu = float(s @ lam) / m
        mu_aff = float((s + alpha_a * ds_a) @ (lam + alpha_a * dl_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector with centering
        r2 = -(s * lam) - ds_a * dl_a + sigma * mu
        dz, ds, dlam = kkt_solve(-r_dual, r2, -r_pri)
        alpha = 0.99 * min(_max_step(s, ds), _max_step(lam, dlam))
        if alpha <= 1e-14:
            break

        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if status is SolveStatus.MAX_ITERATIONS:
        # crossover polish: the iterate may sit at the floating-point floor of
        # the complementarity products without meeting a tight stationarity tol
        polished = _polish(problem, z, lam)
        if polished is not None:
            z2, lam2 = polished
            r2 = _residuals(problem, z2, lam2)
            if max(r2) <= tol and (lam2.size == 0 or np.min(lam2) >= -1e-9):
                z, lam = z2, lam2
                status = SolveStatus.SOLVED

    r_stat, r_prim, r_comp = _residuals(problem, z, lam)
    return QpSolution(z, lam, status, it, r_prim, r_stat, r_comp)


def _polish(problem, z, lam):
    """Equality-solve on the estimated active set; None when it fails."""
    G, h = problem.G, problem.h
    n = problem.n
    slack = h - G @ z
    active = np.flatnonzero(lam > slack)
    k = active.size
    if k > n:
        return None
    Ga = G[active]
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = problem.P
    kkt[:n, n:] = Ga.T
    kkt[n:, :n] = Ga
    rhs = np.concatenate([-problem.q, h[active]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    lam_new = np.zeros(problem.m)
    lam_new[active] = sol[n:]
    return sol[:n], lam_new


def solve_batch(problems, tol=1e-8, max_iter=50):
    """Independent solves in input order; identical to calling solve per item."""
    return [solve(p, tol=tol, max_iter=max_iter) for p in problems]


def backward(problem, solution, grad_out, dual_reg=0.0):
    """Adjoints of the solution map through the KKT system at (z*, lam*).

    grad_out is dloss/dz. Returns (grad_P, grad_q) with grad_P symmetrized.
    Raises SingularKktError when the linearization is numerically singular
    (weakly active constraints); callers may retry once with dual_reg=1e-10.
    """
    if solution.status is not SolveStatus.SOLVED:
        raise ValueError(f"cannot differentiate a {solution.status.value} solution")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (problem.n,):
        raise ValueError(
            f"grad_out must have shape ({problem.n},), got {grad_out.shape}")

    z, lam = solution.z, solution.lam
    n, m = problem.n, problem.m
    slack = problem.G @ z - problem.h

    M = np.zeros((n + m, n + m))
    M[:n, :n] = problem.P
    M[:n, n:] = problem.G.T * lam
    M[n:, :n] = problem.G
    M[n:, n:] = np.diag(slack)
    if dual_reg:
        M[n:, n:] -= dual_reg * np.eye(m)

    rhs = np.concatenate([-grad_out, np.zeros(m)])
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        raise SingularKktError(np.inf) from None
    resid = float(np.max(np.abs(M @ sol - rhs)))
    if resid > 1e-8 * (1.0 + float(np.max(np.abs(rhs)))):
        raise SingularKktError(float(np.linalg.cond(M)))

    dz = sol[:n]
    grad_q = dz
    grad_P = 0.5 * (np.outer(dz, z) + np.outer(z, dz))
    return grad_P, grad_q
