"""Differentiable trajectory-optimization action head.

Maps an embedding e (the learned linear cost) and the current position to a
QP over the stacked action sequence y of length n = horizon * action_dim:

    minimize   1/2 y' Qbar y + e'y
    subject to position, velocity and acceleration bounds on the decoded
               trajectory, plus (at deployment) a continuity bound tying the
               first command to the previously executed one.

Qbar = L L' + eps*I + alpha * (A_diff Sblk)'(A_diff Sblk) stays positive
definite for any lower-triangular L, so the problem is always convex and,
whenever the current position satisfies the position bounds and the
velocity/acceleration boxes contain zero, y = 0 is a feasible witness.

The velocity entries of y live in normalized action units; `v_scale` and
`v_offset` carry the per-dimension affine map back to raw velocities so the
position rows constrain real positions (identity by default).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qp


class InfeasibleStartError(ValueError):
    """Current position violates the position bounds, so assembly refuses."""


# Solved plans satisfy position rows to ~1e-8, so an executed position may sit
# a hair outside a bound; the feasibility precondition forgives that dust
# (well under the 1e-6 audit slack) instead of killing the episode.
START_TOL = 1e-7


class TrajectoryOptError(RuntimeError):
    """Forward solve failed (infeasible or max-iterations)."""

    def __init__(self, status, solution):
        super().__init__(f"trajectory QP failed with status {status.value}")
        self.status = status
        self.solution = solution


@dataclass
class DtoParams:
    """Learned and fixed quantities of the trajectory-optimization layer."""

    L: np.ndarray            # n x n lower-triangular, learned
    epsilon: float           # > 0, keeps Qbar positive definite
    alpha: float             # >= 0, smoothing weight on squared accelerations
    S: np.ndarray            # D_v x D_y selection of constrained action dims
    v_min: np.ndarray        # D_v
    v_max: np.ndarray
    a_min: np.ndarray        # D_v
    a_max: np.ndarray
    delta_t: float
    T_p: int                 # predicted horizon
    T_s: int                 # training window length
    T_a: int                 # executed steps per replan
    A_pos: np.ndarray | None = None   # m_p x D_v, applied at every predicted step
    b_min: np.ndarray | None = None   # m_p
    b_max: np.ndarray | None = None
    v_scale: np.ndarray | None = None   # D_v affine map normalized -> raw velocity
    v_offset: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 2:
            raise ValueError(f"S must be 2d, got shape {self.S.shape}")
        rows = [tuple(r) for r in self.S]
        for r in self.S:
            if not (np.sum(r == 1.0) == 1 and np.sum(r == 0.0) == r.size - 1):
                raise ValueError("S rows must be standard basis rows")
        if len(set(rows)) != len(rows):
            raise ValueError("S rows must be distinct")

        n = self.T_p * self.D_y
        self.L = np.asarray(self.L, dtype=np.float64)
        if self.L.shape != (n, n):
            raise ValueError(f"L must be {n}x{n}, got {self.L.shape}")
        if np.any(np.triu(self.L, 1) != 0.0):
            raise ValueError("L must be lower triangular")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not (1 <= self.T_a <= self.T_p <= self.T_s):
            raise ValueError(
                f"need 1 <= T_a <= T_p <= T_s, got {self.T_a}, {self.T_p}, {self.T_s}")

        dv = self.D_v
        for name in ("v_min", "v_max", "a_min", "a_max"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (dv,):
                raise ValueError(f"{name} must have shape ({dv},), got {arr.shape}")
            setattr(self, name, arr)
        if np.any(self.v_min >= self.v_max) or np.any(self.a_min >= self.a_max):
            raise ValueError("velocity/acceleration bounds must be well ordered")

        if self.A_pos is not None:
            self.A_pos = np.asarray(self.A_pos, dtype=np.float64)
            if self.A_pos.ndim != 2 or self.A_pos.shape[1] != dv:
                raise ValueError(
                    f"A_pos must have {dv} columns, got {self.A_pos.shape}")
            mp = self.A_pos.shape[0]
            self.b_min = np.asarray(self.b_min, dtype=np.float64)
            self.b_max = np.asarray(self.b_max, dtype=np.float64)
            if self.b_min.shape != (mp,) or self.b_max.shape != (mp,):
                raise ValueError(f"b_min/b_max must have shape ({mp},)")
            if np.any(self.b_min > self.b_max):
                raise ValueError("need b_min <= b_max")

        self.v_scale = (np.ones(dv) if self.v_scale is None
                        else np.asarray(self.v_scale, dtype=np.float64))
        self.v_offset = (np.zeros(dv) if self.v_offset is None
                         else np.asarray(self.v_offset, dtype=np.float64))
        if self.v_scale.shape != (dv,) or self.v_offset.shape != (dv,):
            raise ValueError(f"v_scale/v_offset must have shape ({dv},)")

        if self.T_p == 1:
            warnings.warn("T_p = 1: acceleration/position rows vanish and the "
                          "smoothing term is empty", stacklevel=2)

    @property
    def D_v(self):
        return self.S.shape[0]

    @property
    def D_y(self):
        return self.S.shape[1]

    @property
    def n(self):
        return self.T_p * self.D_y

    def set_L(self, L):
        """Replace the learned factor; geometry caches stay valid."""
        L = np.asarray(L, dtype=np.float64)
        if L.shape != self.L.shape:
            raise ValueError(f"L must keep shape {self.L.shape}")
        if np.any(np.triu(L, 1) != 0.0):
            raise ValueError("L must be lower triangular")
        self.L = L


@dataclass
class TrajectoryDecomposition:
    v_hat: np.ndarray   # T_p * D_v
    a_hat: np.ndarray   # (T_p - 1) * D_v
    p_hat: np.ndarray   # (T_p - 1) * D_v
    p_t0: np.ndarray    # (T_p - 1) * D_v stacked copies of the current position


def build_selection_block(S, T_p):
    """Block-diagonal stack of T_p copies of the per-step selection matrix."""
    S = np.asarray(S, dtype=np.float64)
    dv, dy = S.shape
    out = np.zeros((T_p * dv, T_p * dy))
    for k in range(T_p):
        out[k * dv:(k + 1) * dv, k * dy:(k + 1) * dy] = S
    return out


def build_diff_matrix(T_p, D_v, delta_t):
    """Forward-difference operator taking stacked velocities to accelerations."""
    if T_p < 2:
        raise ValueError("need T_p >= 2 for the difference operator")
    out = np.zeros(((T_p - 1) * D_v, T_p * D_v))
    eye = np.eye(D_v)
    for k in range(T_p - 1):
        out[k * D_v:(k + 1) * D_v, k * D_v:(k + 1) * D_v] = -eye
        out[k * D_v:(k + 1) * D_v, (k + 1) * D_v:(k + 2) * D_v] = eye
    return out / delta_t


def build_integration_matrix(T_p, D_v, delta_t):
    """Cumulative delta_t accumulation taking velocities to position offsets.

    Row block i sums the first i velocity steps; the final velocity never
    appears (its position effect falls outside the predicted window), so the
    last column block is zero.
    """
    if T_p < 2:
        raise ValueError("need T_p >= 2 for the integration operator")
    out = np.zeros(((T_p - 1) * D_v, T_p * D_v))
    eye = np.eye(D_v) * delta_t
    for i in range(1, T_p):
        for j in range(i):
            out[(i - 1) * D_v:i * D_v, j * D_v:(j + 1) * D_v] = eye
    return out


def _geometry(params):
    """Constraint geometry shared by every assembly with these params."""
    key = "geometry"
    cached = params._cache.get(key)
    if cached is not None:
        return cached

    tp, dv = params.T_p, params.D_v
    sblk = build_selection_block(params.S, tp)
    if tp >= 2:
        a_diff = build_diff_matrix(tp, dv, params.delta_t)
        a_inte = build_integration_matrix(tp, dv, params.delta_t)
        ds = a_diff @ sblk
        smooth = ds.T @ ds
    else:
        a_diff = np.zeros((0, dv))
        a_inte = np.zeros((0, dv))
        ds = np.zeros((0, params.n))
        smooth = np.zeros((params.n, params.n))

    blocks_G = []
    # position rows (real units): Apos_blk (p_t0 + A_inte(offset + scale*v)) in [b_min, b_max]
    if params.A_pos is not None and tp >= 2:
        mp = params.A_pos.shape[0]
        apos_blk = np.zeros(((tp - 1) * mp, (tp - 1) * dv))
        for k in range(tp - 1):
            apos_blk[k * mp:(k + 1) * mp, k * dv:(k + 1) * dv] = params.A_pos
        scale_blk = np.kron(np.eye(tp), np.diag(params.v_scale))
        pos_map = apos_blk @ a_inte @ scale_blk @ sblk
        offset_term = apos_blk @ (a_inte @ np.tile(params.v_offset, tp))
        blocks_G.append(pos_map)
        blocks_G.append(-pos_map)
        pos = {
            "apos_blk": apos_blk,
            "offset_term": offset_term,
            "b_max_stack": np.tile(params.b_max, tp - 1),
            "b_min_stack": np.tile(params.b_min, tp - 1),
        }
    else:
        pos = None

    blocks_G.append(sblk)
    blocks_G.append(-sblk)
    if tp >= 2:
        blocks_G.append(ds)
        blocks_G.append(-ds)

    geom = {
        "sblk": sblk,
        "a_diff": a_diff,
        "a_inte": a_inte,
        "smooth": smooth,
        "pos": pos,
        "G_train": np.vstack(blocks_G),
        "h_vel_acc": np.concatenate(
            [np.tile(params.v_max, tp), -np.tile(params.v_min, tp)]
            + ([np.tile(params.a_max, tp - 1), -np.tile(params.a_min, tp - 1)]
               if tp >= 2 else [])),
    }
    params._cache[key] = geom
    return geom


def cost_matrix(params):
    """Qbar = L L' + eps*I + alpha * smoothing term."""
    geom = _geometry(params)
    n = params.n
    return params.L @ params.L.T + params.epsilon * np.eye(n) + params.alpha * geom["smooth"]


def assemble_qp(params, e_t, p_t, prev_action=None):
    """Build the QP for one step. prev_action switches on the deployment rows.

    Raises InfeasibleStartError when A_pos @ p_t already violates the position
    bounds. The check is non-strict with a small numerical allowance
    (START_TOL), so starts exactly on a bound, or off it by solver-level
    roundoff, are accepted.
    """
    e_t = np.asarray(e_t, dtype=np.float64)
    p_t = np.asarray(p_t, dtype=np.float64)
    if e_t.shape != (params.n,):
        raise ValueError(f"e_t must have shape ({params.n},), got {e_t.shape}")
    if p_t.shape != (params.D_v,):
        raise ValueError(f"p_t must have shape ({params.D_v},), got {p_t.shape}")

    geom = _geometry(params)
    h_parts = []
    if geom["pos"] is not None:
        pos = geom["pos"]
        start = params.A_pos @ p_t
        if (np.any(start > params.b_max + START_TOL)
                or np.any(start < params.b_min - START_TOL)):
            raise InfeasibleStartError(
                f"A_pos @ p_t = {start} outside [{params.b_min}, {params.b_max}]")
        fixed = pos["apos_blk"] @ np.tile(p_t, params.T_p - 1) + pos["offset_term"]
        h_parts.append(pos["b_max_stack"] - fixed)
        h_parts.append(fixed - pos["b_min_stack"])
    h_parts.append(geom["h_vel_acc"])

    G = geom["G_train"]
    if prev_action is not None:
        prev_action = np.asarray(prev_action, dtype=np.float64)
        if prev_action.shape != (params.D_v,):
            raise ValueError(
                f"prev_action must have shape ({params.D_v},), got {prev_action.shape}")
        first = geom["sblk"][:params.D_v]
        G = np.vstack([G, first, -first])
        dt = params.delta_t
        h_parts.append(prev_action + params.a_max * dt)
        h_parts.append(-(prev_action + params.a_min * dt))

    return qp.QpProblem(cost_matrix(params), e_t, G, np.concatenate(h_parts))


def forward(params, e_t, p_t, prev_action=None, tol=1e-8, max_iter=50):
    """Solve the step QP; returns (y_hat_star, solution).

    Raises TrajectoryOptError when the solver does not reach SOLVED.
    """
    problem = assemble_qp(params, e_t, p_t, prev_action)
    solution = qp.solve(problem, tol=tol, max_iter=max_iter)
    if solution.status is not qp.SolveStatus.SOLVED:
        raise TrajectoryOptError(solution.status, solution)
    return solution.z, solution


def backward(params, e_t, p_t, prev_action, solution, grad_out,
             problem=None, dual_reg=0.0):
    """Adjoints of the step solve w.r.t. the learned factor and the embedding.

    Returns (grad_L, grad_e); grad_L is exactly zero above the diagonal. The
    smoothing and epsilon terms of Qbar do not depend on L, so only the
    L L' product contributes. Pass problem= to skip re-assembly.
    """
    if problem is None:
        problem = assemble_qp(params, e_t, p_t, prev_action)
    grad_P, grad_q = qp.backward(problem, solution, grad_out, dual_reg=dual_reg)
    grad_L = np.tril((grad_P + grad_P.T) @ params.L)
    return grad_L, grad_q


def least_squares_form(params, e_t):
    """Factor the objective as 1/2 ||L_bar' y - e_bar||^2 over the same constraints.

    Qbar = L_bar L_bar' (Cholesky, positive diagonal) and e = -L_bar e_bar.
    """
    e_t = np.asarray(e_t, dtype=np.float64)
    l_bar = np.linalg.cholesky(cost_matrix(params))
    e_bar = np.linalg.solve(l_bar, -e_t)
    return l_bar, e_bar


def unconstrained_forward(params, e_t):
    """The constraint-free map y = -Qbar^{-1} e (baseline head / wide-bounds limit)."""
    e_t = np.asarray(e_t, dtype=np.float64)
    l_bar = np.linalg.cholesky(cost_matrix(params))
    return -np.linalg.solve(l_bar.T, np.linalg.solve(l_bar, e_t))


def unconstrained_backward(params, e_t, y, grad_out):
    """Adjoints of the constraint-free map; same contract as backward()."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    l_bar = np.linalg.cholesky(cost_matrix(params))
    u = np.linalg.solve(l_bar.T, np.linalg.solve(l_bar, grad_out))
    grad_e = -u
    grad_P = -0.5 * (np.outer(u, y) + np.outer(y, u))
    grad_L = np.tril((grad_P + grad_P.T) @ params.L)
    return grad_L, grad_e


def decompose(params, y_hat, p_t):
    """Split a stacked action sequence into velocity/acceleration/position parts.

    Applies the selection, difference and integration operators verbatim, so
    p_hat is expressed in the same units as y_hat's velocity entries; apply
    predicted_positions() for real-unit positions under an action normalizer.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape != (params.n,):
        raise ValueError(f"y_hat must have shape ({params.n},), got {y_hat.shape}")
    geom = _geometry(params)
    v_hat = geom["sblk"] @ y_hat
    a_hat = geom["a_diff"] @ v_hat
    p_t0 = np.tile(np.asarray(p_t, dtype=np.float64), max(params.T_p - 1, 0))
    p_hat = p_t0 + geom["a_inte"] @ v_hat
    return TrajectoryDecomposition(v_hat, a_hat, p_hat, p_t0)


def predicted_positions(params, y_hat, p_t):
    """Real-unit predicted positions, applying the velocity affine map."""
    geom = _geometry(params)
    v_norm = geom["sblk"] @ np.asarray(y_hat, dtype=np.float64)
    v_real = np.tile(params.v_offset, params.T_p) + np.tile(params.v_scale, params.T_p) * v_norm
    p_t0 = np.tile(np.asarray(p_t, dtype=np.float64), max(params.T_p - 1, 0))
    return p_t0 + geom["a_inte"] @ v_real
