"""Quasi-Newton minimisation with a strong-Wolfe line search."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.optimize import line_search

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-8
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
BACKTRACK_STEPS = 5

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class OptimizationError(ArithmeticError):
    """The objective returned a non-finite value; ``state`` holds the progress so far."""

    def __init__(self, message: str, state: "OptimizerState"):
        super().__init__(message)
        self.state = state


@dataclass
class OptimizerState:
    alpha: np.ndarray
    inv_hessian: np.ndarray
    loss: float
    gradient: np.ndarray
    iteration: int = 0
    evaluations: int = 0
    loss_history: List[float] = field(default_factory=list)
    status: str = "running"

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


class _Memo:
    """Shares one loss-and-gradient evaluation between the value and slope callbacks."""

    def __init__(self, fn: LossFn):
        self.fn = fn
        self.calls = 0
        self._x = None
        self._out = None
        self.log: List[Tuple[np.ndarray, float, np.ndarray]] = []

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        if self._x is None or not np.array_equal(x, self._x):
            self.calls += 1
            loss, grad = self.fn(np.array(x, dtype=float))
            self._x, self._out = np.array(x, dtype=float), (float(loss), np.asarray(grad, dtype=float))
            self.log.append((self._x, *self._out))
        return self._out

    def value(self, x):
        return self(x)[0]

    def grad(self, x):
        return self(x)[1]


def _line_search(memo: _Memo, state: OptimizerState, direction: np.ndarray):
    """Strong-Wolfe step along ``direction``, else the best sufficient-decrease step.

    Hinge penalties put kinks in the loss; when the minimum along the line
    sits on one, no point meets the curvature condition, but a step with
    sufficient decrease still makes progress.  Points the Wolfe search
    already evaluated are tried first, then a few halvings below the
    shortest step it tried.  Sitting on a kink ends the search quickly.
    """
    memo.log = []
    # failures are handled below, so scipy's warning is noise
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        step, _, _, new_loss, _, new_grad = line_search(
            memo.value, memo.grad, state.alpha, direction, gfk=state.gradient, old_fval=state.loss,
            c1=WOLFE_C1, c2=WOLFE_C2,
        )
    if step is not None and new_loss is not None and np.isfinite(new_loss) and new_loss <= state.loss:
        x = state.alpha + step * direction
        if new_grad is None:
            new_grad = memo.grad(x)
        return x, float(new_loss), np.asarray(new_grad, dtype=float)
    slope = float(state.gradient @ direction)
    if slope >= 0:
        return None
    norm2 = float(direction @ direction)
    best = None
    tried = [1.0]
    for x, loss, grad in memo.log:
        step = float((x - state.alpha) @ direction) / norm2
        if step <= 0:
            continue
        tried.append(step)
        if np.isfinite(loss) and loss <= state.loss + WOLFE_C1 * step * slope:
            if best is None or loss < best[1]:
                best = (x, loss, grad)
    if best is not None:
        return best
    step = min(tried) / 2
    for _ in range(BACKTRACK_STEPS):
        x = state.alpha + step * direction
        loss, grad = memo(x)
        if np.isfinite(loss) and loss <= state.loss + WOLFE_C1 * step * slope:
            return x, loss, grad
        step /= 2
    return None


def bfgs_minimize(fn: LossFn, alpha0, max_iter: int = 100, grad_tol: float = GRAD_TOL,
                  callback: Optional[Callable[[OptimizerState], bool]] = None) -> OptimizerState:
    """Minimise ``fn`` (returning loss and gradient) from ``alpha0``.

    The inverse Hessian starts as the identity, is rescaled by ``y.s / y.y``
    after the first accepted step and is updated only when the curvature
    condition ``y.s > 0`` holds.  A failed line search is retried once along
    the steepest-descent direction before giving up.  ``callback`` runs after
    every accepted step and stops the run by returning ``False``.
    """
    memo = _Memo(fn)
    x = np.array(alpha0, dtype=float)
    loss, grad = memo(x)
    state = OptimizerState(x, np.eye(len(x)), loss, grad, loss_history=[loss])
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        state.status = "non-finite loss"
        raise OptimizationError("objective is not finite at the starting point", state)
    while True:
        if state.grad_norm < grad_tol:
            state.status = "gradient below tolerance"
            break
        if state.iteration >= max_iter:
            state.status = "max_iter"
            break
        direction = -state.inv_hessian @ state.gradient
        found = _line_search(memo, state, direction)
        if found is None:
            state.inv_hessian = np.eye(len(x))
            direction = -state.gradient
            found = _line_search(memo, state, direction)
        if found is None:
            state.status = "line search failed"
            break
        new_x, new_loss, new_grad = found
        s = new_x - state.alpha
        y = new_grad - state.gradient
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if state.iteration == 0:
                state.inv_hessian = np.eye(len(x)) * sy / float(y @ y)
            rho = 1.0 / sy
            eye = np.eye(len(x))
            h = state.inv_hessian
            state.inv_hessian = (eye - rho * np.outer(s, y)) @ h @ (eye - rho * np.outer(y, s)) + rho * np.outer(s, s)
        state.alpha = new_x
        state.loss, state.gradient = new_loss, new_grad
        state.iteration += 1
        state.loss_history.append(new_loss)
        state.evaluations = memo.calls
        if callback is not None and callback(state) is False:
            state.status = "stopped by callback"
            break
    state.evaluations = memo.calls
    return state
