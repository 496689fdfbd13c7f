"""Pure numpy implementations of the hot loops (fallback for the compiled core)."""

import numpy as np


def ratio_test(Ap, slack, in_work, tol):
    """Largest feasible step along a direction and the first blocking row.

    Rows in the working set and rows the direction does not approach are
    skipped. Ties go to the lowest index. Returns ``(inf, -1)`` when nothing
    blocks.
    """
    Ap = np.asarray(Ap, dtype=float)
    cand = (Ap > tol) & ~np.asarray(in_work, dtype=bool)
    if not cand.any():
        return np.inf, -1
    idx = np.flatnonzero(cand)
    ratios = np.maximum(np.asarray(slack, dtype=float)[idx], 0.0) / Ap[idx]
    k = int(np.argmin(ratios))
    return float(ratios[k]), int(idx[k])


def bellman_sweep(V, cost, idx, frac, weights, gamma):
    """One policy-evaluation sweep with linear interpolation on a uniform grid.

    ``idx[j, q]`` is the left grid neighbour of the q-th successor of node j and
    ``frac[j, q]`` its fractional position within the cell.
    """
    left = V[idx]
    right = V[idx + 1]
    interp = left + frac * (right - left)
    return cost + gamma * (interp @ weights)


def chain_stay(s0, noise, a_cl, lo, hi):
    """Flags for trajectories of s+ = a_cl s + w that stay in [lo, hi] at every step."""
    s = np.array(s0, dtype=float, copy=True)
    alive = np.ones(s.shape[0], dtype=bool)
    for k in range(noise.shape[1]):
        s = a_cl * s + noise[:, k]
        alive &= (s >= lo) & (s <= hi)
    return alive


def worst_rollout_attracted(s, A, B, K, a_s, u_min, u_top, s_max, wbar, steps):
    """Whether the lowest-noise rollout of the saturated scalar loop stays attracted.

    A drop of one unit below the start counts as divergence; a stalled
    trajectory counts as converged.
    """
    x = s
    for _ in range(steps):
        hi = min(u_top, (s_max - wbar - A * x) / B)
        u = max(min(max(a_s - K * x, u_min), hi), u_min)
        xn = A * x + B * u - wbar
        if xn < s - 1.0:
            return False
        if abs(xn - x) < 1e-13:
            return True
        x = xn
    return True
