"""Shared Levenberg-Marquardt loop over manifold-valued states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverDiverged

DAMPING_INIT = 1e-4
DAMPING_UP = 10.0
DAMPING_DOWN = 10.0
DAMPING_MAX = 1e8


@dataclass
class LMResult:
    state: object
    cost: float
    iterations: int
    converged: bool
    cost_history: list


def levenberg_marquardt(
    residual_and_jacobian,
    cost_at,
    apply_step,
    state,
    max_iterations: int,
    convergence_tol: float,
):
    """Minimize ||r(state)||^2 with left-multiplicative local increments.

    residual_and_jacobian(state) -> (r (m,), J (m, n)) at the current state;
    cost_at(state) -> scalar cost consistent with r;
    apply_step(state, delta (n,)) -> new state.

    Accepted steps never increase the cost. Raises SolverDiverged when the
    damping exceeds DAMPING_MAX without an accepted step.
    """
    r, J = residual_and_jacobian(state)
    cost = float(r @ r)
    history = [cost]
    lam = DAMPING_INIT
    iterations = 0
    converged = False

    for _ in range(max_iterations):
        iterations += 1
        H = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-12:
            converged = True
            break
        accepted = False
        stalled = False
        best_candidate_cost = np.inf
        while lam <= DAMPING_MAX:
            try:
                delta = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= DAMPING_UP
                continue
            if np.max(np.abs(delta)) < 1e-14:
                stalled = True  # at a stationary point up to numerics
                break
            candidate = apply_step(state, delta)
            new_cost = float(cost_at(candidate))
            if np.isfinite(new_cost):
                best_candidate_cost = min(best_candidate_cost, new_cost)
            if np.isfinite(new_cost) and new_cost < cost:
                state = candidate
                lam = max(lam / DAMPING_DOWN, 1e-12)
                accepted = True
                break
            lam *= DAMPING_UP
        if stalled:
            converged = True
            break
        if not accepted:
            if not np.isfinite(best_candidate_cost):
                raise SolverDiverged(
                    f"no finite cost found up to damping {DAMPING_MAX:g}"
                )
            # all candidate steps worsen the cost: stationary up to model error
            # (typical at hit/miss boundary kinks); stop at the current state
            converged = True
            break

        r, J = residual_and_jacobian(state)
        prev = cost
        cost = float(r @ r)
        history.append(cost)
        if prev > 0 and (prev - cost) / prev < convergence_tol:
            converged = True
            break

    return LMResult(state=state, cost=cost, iterations=iterations, converged=converged, cost_history=history)
