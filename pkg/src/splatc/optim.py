"""L-BFGS with Armijo backtracking, quaternion slerp, and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import SplatError

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class NumericalFailure(SplatError, ArithmeticError):
    """Objective or gradient went non-finite; ``x``/``f`` hold the last good iterate."""

    def __init__(self, message: str, x: np.ndarray, f: float):
        super().__init__(message)
        self.x = x
        self.f = f


@dataclass(frozen=True)
class MinimizerConfig:
    memory_pairs: int = 8
    grad_tolerance: float = 1e-8
    max_iterations: int = 100
    sufficient_decrease: float = 1e-4
    contraction: float = 0.5
    max_backtracks: int = 60

    def __post_init__(self):
        if self.memory_pairs < 1:
            raise ValueError("memory_pairs must be >= 1")
        if self.grad_tolerance <= 0 or self.sufficient_decrease <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.contraction < 1:
            raise ValueError("contraction must lie in (0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


class MinimizeResult(NamedTuple):
    x: np.ndarray
    f: float
    iterations: int
    converged: bool


def _evaluate(objective: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    f, g = objective(x)
    return float(f), np.asarray(g, dtype=np.float64)


def minimize(
    objective: Objective,
    x0,
    cfg: MinimizerConfig | None = None,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> MinimizeResult:
    """Minimize a smooth function with limited-memory BFGS.

    Parameters
    ----------
    objective : callable
        Returns ``(f, grad)`` at a point.
    x0 : array_like
        Starting point. ``objective(x0)`` must be finite.
    cfg : MinimizerConfig, optional
    project : callable, optional
        Applied to every trial point before it is evaluated (e.g. to clamp
        parameters into a feasible box). The accepted step is the projected one.

    Returns
    -------
    MinimizeResult
        ``converged`` is true only when ``max|grad| <= cfg.grad_tolerance``.
        Objective values along the iterates never increase.

    Raises
    ------
    NumericalFailure
        If the objective or gradient becomes non-finite at an accepted point,
        or at the start.
    """
    cfg = cfg or MinimizerConfig()
    x = np.array(x0, dtype=np.float64)
    if project is not None:
        x = project(x)
    f, g = _evaluate(objective, x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NumericalFailure("objective is not finite at the starting point", x, f)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    it = 0
    while True:
        if np.max(np.abs(g), initial=0.0) <= cfg.grad_tolerance:
            return MinimizeResult(x, f, it, True)
        if it >= cfg.max_iterations:
            return MinimizeResult(x, f, it, False)

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            rho = 1.0 / (y @ s)
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q
        if direction @ g >= 0:
            s_hist.clear()
            y_hist.clear()
            direction = -g / max(1.0, np.linalg.norm(g))

        step = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = x + step * direction
            if project is not None:
                x_new = project(x_new)
            f_new, g_new = _evaluate(objective, x_new)
            if np.isfinite(f_new) and f_new <= f + cfg.sufficient_decrease * (g @ (x_new - x)) and f_new <= f:
                if not np.all(np.isfinite(g_new)):
                    raise NumericalFailure("gradient became non-finite", x, f)
                accepted = True
                break
            step *= cfg.contraction
        it += 1
        if not accepted:
            # no decrease possible along this direction at machine precision
            return MinimizeResult(x, f, it, False)

        s_vec, y_vec = x_new - x, g_new - g
        x, f, g = x_new, f_new, g_new
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > cfg.memory_pairs:
                s_hist.pop(0)
                y_hist.pop(0)


def slerp(q_i, q_j, t: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions along the shorter arc."""
    q_i = np.asarray(q_i, dtype=np.float64)
    q_j = np.asarray(q_j, dtype=np.float64)
    ni, nj = np.linalg.norm(q_i), np.linalg.norm(q_j)
    if ni == 0 or nj == 0:
        raise ValueError("slerp of a zero quaternion")
    q_i, q_j = q_i / ni, q_j / nj
    dot = float(q_i @ q_j)
    if dot < 0:
        q_j, dot = -q_j, -dot
    if dot > 1 - 1e-9:
        out = (1 - t) * q_i + t * q_j
        return out / np.linalg.norm(out)
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    out = (np.sin((1 - t) * theta) * q_i + np.sin(t * theta) * q_j) / sin_theta
    return out / np.linalg.norm(out)


def central_difference(f: Callable[[np.ndarray], float], x, h) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h.flat[k]
        g.flat[k] = (f(x + e) - f(x - e)) / (2 * h.flat[k])
    return g


def check_gradient(objective: Objective, x, h: float = 1e-5) -> float:
    """Max over coordinates of ``|g_fd - g| / (|g| + 1e-12)``."""
    x = np.asarray(x, dtype=np.float64)
    _, g = _evaluate(objective, x)
    g_fd = central_difference(lambda z: _evaluate(objective, z)[0], x, h)
    return float(np.max(np.abs(g_fd - g) / (np.abs(g) + 1e-12), initial=0.0))
