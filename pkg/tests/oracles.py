"""Independent test oracles: these deliberately avoid the package's solver
machinery so agreement is evidence, not tautology."""

import itertools

import numpy as np


def active_set_solve(P, q, G, h, feasible_point=None,
                     dual_tol=1e-9, feas_tol=1e-9):
    """Brute-force QP oracle: enumerate candidate active sets by cardinality,
    solve each equality-constrained subproblem, and return the first
    primal-feasible, dual-nonnegative point (the unique optimum).

    When a feasible point is supplied, the search pool is soundly reduced:
    the optimum lies inside the objective sublevel ellipsoid through that
    point, so any constraint whose boundary cannot touch the ellipsoid can
    never be active. Candidates are further ordered by violation at the
    unconstrained optimum; both steps only shrink or reorder the exhaustive
    scan. Returns None when no KKT point exists (infeasible problem).
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n, m = len(q), len(h)
    chol = np.linalg.cholesky(P)
    z_u = -np.linalg.solve(chol.T, np.linalg.solve(chol, q))

    pool = np.arange(m)
    if feasible_point is not None and m:
        z_f = np.asarray(feasible_point, dtype=float)
        diff = z_f - z_u
        radius = np.sqrt(diff @ P @ diff)  # P-norm distance to the optimum bound
        w = np.linalg.solve(chol, G.T)
        ellip_reach = radius * np.linalg.norm(w, axis=0)  # max of G_i z over the ball
        pool = np.flatnonzero(h - G @ z_u <= ellip_reach + 1e-7)

    order = [int(i) for i in pool[np.argsort((G @ z_u - h)[pool])[::-1]]]

    for k in range(0, min(n, len(order)) + 1):
        for subset in itertools.combinations(order, k):
            idx = list(subset)
            A = G[idx]
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = P
            kkt[:n, n:] = A.T
            kkt[n:, :n] = A
            rhs = np.concatenate([-q, h[idx]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.max(np.abs(kkt @ sol - rhs)) > 1e-8:
                continue  # dependent active rows
            z, lam = sol[:n], sol[n:]
            if k and np.min(lam) < -dual_tol:
                continue
            if np.all(G @ z <= h + feas_tol):
                return z
    return None


def random_feasible_qp(rng, n_max=12, m_max=40):
    """Random dense QP with P = M'M + I and a planted optimum.

    A random point, a random set of active rows with duals bounded away from
    zero, and inactive rows with margins bounded away from zero are drawn;
    q is then chosen to make the point stationary. Strict complementarity by
    construction keeps the instances differentiable-friendly and the
    enumeration affordable. Returns (P, q, G, h, feasible_point).
    """
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    M = rng.normal(size=(n, n))
    P = M.T @ M + np.eye(n)
    k = min(int(rng.choice(6, p=[0.25, 0.3, 0.2, 0.14, 0.08, 0.03])), n, m)
    z_star = rng.normal(scale=0.7, size=n)
    G_act = rng.normal(size=(k, n))
    lam_act = rng.uniform(0.3, 2.0, size=k)
    q = -P @ z_star - G_act.T @ lam_act
    G_in = rng.normal(size=(m - k, n))
    h = np.concatenate([G_act @ z_star,
                        G_in @ z_star + rng.uniform(0.3, 2.0, size=m - k)])
    G = np.vstack([G_act, G_in])
    perm = rng.permutation(m)
    return P, q, G[perm], h[perm], z_star
