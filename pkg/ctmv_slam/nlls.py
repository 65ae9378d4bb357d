#
# Copyright 2026 The ctmv-slam authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Robust nonlinear least squares

A Problem holds parameter blocks (poses updated on the left, or plain
vectors) and residual terms. Each term returns a residual vector that is
whitened by a diagonal information vector and robustified chunk by chunk:
a term of n image observations uses chunk=2, so Huber acts per observation.

solve_lm minimises Σ ρ(‖chunk‖²) with Levenberg-Marquardt on a sparse
Jacobian.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .defaults import from_defaults
from .errors import ConfigError, NumericalFailure
from .liegroups import exp_map

logger = logging.getLogger(__name__)


@dataclass
class LMConfig:
    lm_max_iterations: int = 50
    lm_tolerance: float = 1e-10
    lm_initial_lambda: float = 1e-4
    jacobian_step: float = 1e-6

    @classmethod
    def from_defaults(cls, **overrides):
        return from_defaults(cls, **overrides).validate()

    def validate(self):
        if self.lm_max_iterations < 1:
            raise ConfigError("lm_max_iterations must be >= 1")
        if self.lm_tolerance <= 0 or self.lm_initial_lambda <= 0 or self.jacobian_step <= 0:
            raise ConfigError("solver tolerances must be positive")
        return self


#
# Robust loss
#


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "huber"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("huber", "trivial"):
            raise ConfigError(f"unknown loss {self.kind}")
        if self.delta <= 0:
            raise ConfigError("loss delta must be positive")

    def rho(self, s):
        """ρ(s) and ρ'(s) for squared norms s"""
        s = np.asarray(s, dtype=float)
        if self.kind == "trivial":
            return s, np.ones_like(s)
        d2 = self.delta * self.delta
        inner = s <= d2
        root = np.sqrt(np.where(inner, 1.0, s))
        value = np.where(inner, s, 2.0 * self.delta * root - d2)
        slope = np.where(inner, 1.0, self.delta / root)
        return value, slope


def huber(delta):
    return RobustLoss("huber", delta)


#
# Problem
#


class ParameterBlock:
    """A pose (6-dof, left update Exp(δ)·T) or a euclidean vector"""

    def __init__(self, value, manifold="euclidean", frozen=False):
        if manifold not in ("pose", "euclidean"):
            raise ValueError(f"unknown manifold {manifold}")
        self.manifold = manifold
        self.value = value if manifold == "pose" else np.asarray(value, dtype=float).copy()
        self.frozen = frozen

    @property
    def dim(self):
        return 6 if self.manifold == "pose" else self.value.size

    def plus(self, delta, value=None):
        value = self.value if value is None else value
        if self.manifold == "pose":
            return exp_map(delta).compose(value)
        return value + delta


@dataclass
class ResidualTerm:
    """evaluate(values) -> residual, jacobian(values) -> per block matrices

    jacobian entries are None (no dependence), an (m, dim) matrix or a
    (rows, matrix) tuple for a sparse slice. Without a jacobian callback,
    central differences are used.
    """

    blocks: List[ParameterBlock]
    evaluate: Callable[[List[Any]], np.ndarray]
    information: Any = 1.0
    loss: Optional[RobustLoss] = None
    jacobian: Optional[Callable[[List[Any]], List[Any]]] = None
    chunk: Optional[int] = None
    tag: str = ""

    def values(self):
        return [b.value for b in self.blocks]


@dataclass
class SolveResult:
    initial_cost: float
    cost: float
    iterations: int
    status: str
    history: List[float] = field(default_factory=list)

    @property
    def converged(self):
        return self.status.startswith("converged")


class Problem:
    def __init__(self):
        self.blocks = []
        self.residuals = []
        self._ids = set()

    def add_block(self, value, manifold="euclidean", frozen=False):
        block = ParameterBlock(value, manifold, frozen)
        self.blocks.append(block)
        self._ids.add(id(block))
        return block

    def add_residual(self, term):
        for b in term.blocks:
            if id(b) not in self._ids:
                raise ValueError("residual references a block outside the problem")
        self.residuals.append(term)
        return term

    def free_blocks(self):
        return [b for b in self.blocks if not b.frozen]

    def cost(self):
        return sum(_term_cost(t, t.values()) for t in self.residuals)


#
# Evaluation helpers
#


def _whiten(term, r):
    info = np.broadcast_to(np.asarray(term.information, dtype=float), r.shape)
    return np.sqrt(info) * r


def _chunks(term, m):
    size = m if not term.chunk else term.chunk
    return size


def _term_cost(term, values):
    r = np.asarray(term.evaluate(values), dtype=float).reshape(-1)
    if r.size == 0:
        return 0.0
    rw = _whiten(term, r)
    if not np.all(np.isfinite(rw)):
        raise NumericalFailure(f"non-finite residual in {term.tag or 'term'}")
    size = _chunks(term, rw.size)
    s = np.sum(rw.reshape(-1, size) ** 2, axis=1)
    if term.loss is None:
        return float(s.sum())
    return float(term.loss.rho(s)[0].sum())


def numeric_jacobian(evaluator, params, h=None):
    """Central differences of evaluator around the vector params"""
    h = LMConfig.from_defaults().jacobian_step if h is None else h
    x = np.asarray(params, dtype=float)
    r0 = np.asarray(evaluator(x), dtype=float).reshape(-1)
    jac = np.empty((r0.size, x.size))
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        rp = np.asarray(evaluator(x + step), dtype=float).reshape(-1)
        rm = np.asarray(evaluator(x - step), dtype=float).reshape(-1)
        jac[:, k] = (rp - rm) / (2 * h)
    if not np.all(np.isfinite(jac)):
        raise NumericalFailure("non-finite numeric Jacobian")
    return jac


def block_jacobian(term, index, h):
    """Central differences of a term w.r.t. one of its blocks"""
    block = term.blocks[index]
    values = term.values()

    def f(delta):
        shifted = list(values)
        shifted[index] = block.plus(delta)
        return term.evaluate(shifted)

    return numeric_jacobian(f, np.zeros(block.dim), h)


def _linearize(problem, offsets, h):
    """Whitened, robust weighted residual vector and sparse Jacobian"""
    res, rows, cols, data = [], [], [], []
    row0 = 0
    cost = 0.0
    for term in problem.residuals:
        values = term.values()
        r = np.asarray(term.evaluate(values), dtype=float).reshape(-1)
        m = r.size
        if m == 0:
            continue
        rw = _whiten(term, r)
        if not np.all(np.isfinite(rw)):
            raise NumericalFailure(f"non-finite residual in {term.tag or 'term'}")
        size = _chunks(term, m)
        s = np.sum(rw.reshape(-1, size) ** 2, axis=1)
        if term.loss is None:
            cost += float(s.sum())
            weight = np.ones(m)
        else:
            value, slope = term.loss.rho(s)
            cost += float(value.sum())
            weight = np.repeat(np.sqrt(slope), size)
        information = np.asarray(term.information, dtype=float)
        scale = np.sqrt(np.broadcast_to(information, r.shape)) * weight
        res.append(weight * rw)

        jacs = term.jacobian(values) if term.jacobian is not None else None
        for k, block in enumerate(term.blocks):
            if block.frozen:
                continue
            if jacs is None:
                jac = block_jacobian(term, k, h)
                local_rows = np.arange(m)
            else:
                jac = jacs[k]
                if jac is None:
                    continue
                if isinstance(jac, tuple):
                    local_rows, jac = jac
                    local_rows = np.asarray(local_rows)
                else:
                    local_rows = np.arange(m)
            jac = np.asarray(jac, dtype=float) * scale[local_rows, None]
            if not np.all(np.isfinite(jac)):
                raise NumericalFailure(f"non-finite Jacobian in {term.tag or 'term'}")
            block_cols = np.arange(block.dim) + offsets[id(block)]
            rr, cc = np.meshgrid(local_rows + row0, block_cols, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            data.append(jac.ravel())
        row0 += m

    n = sum(b.dim for b in problem.free_blocks())
    r = np.concatenate(res) if res else np.zeros(0)
    if data:
        jac = scipy.sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, n),
        ).tocsr()
    else:
        jac = scipy.sparse.csr_matrix((row0, n))
    return r, jac, cost


def _apply(free, offsets, delta):
    return [b.plus(delta[offsets[id(b)] : offsets[id(b)] + b.dim]) for b in free]


def solve_lm(problem, max_iters=None, tol=None, config=None):
    """Levenberg-Marquardt with Nielsen damping updates, blocks are updated in place"""
    config = LMConfig.from_defaults() if config is None else config
    max_iters = config.lm_max_iterations if max_iters is None else max_iters
    tol = config.lm_tolerance if tol is None else tol

    free = problem.free_blocks()
    offsets, n = {}, 0
    for b in free:
        offsets[id(b)] = n
        n += b.dim

    r, jac, cost = _linearize(problem, offsets, config.jacobian_step)
    initial = cost
    history = [cost]
    if n == 0 or r.size == 0:
        return SolveResult(initial, cost, 0, "converged_empty", history)

    lam, nu = config.lm_initial_lambda, 2.0
    status = "max_iterations"
    it = 0
    while it < max_iters:
        it += 1
        g = jac.T @ r
        if np.max(np.abs(g)) < tol:
            status = "converged_gradient"
            break

        h = (jac.T @ jac).tocsc()
        diag = np.clip(h.diagonal(), 1e-6, 1e32)
        while True:
            a = h + scipy.sparse.diags(lam * diag, format="csc")
            delta = scipy.sparse.linalg.spsolve(a, -g)
            delta = np.atleast_1d(delta)
            if not np.all(np.isfinite(delta)):
                lam *= nu
                nu *= 2.0
                if lam > 1e32:
                    raise NumericalFailure("damped normal equations are singular")
                continue

            old = [b.value for b in free]
            for b, v in zip(free, _apply(free, offsets, delta)):
                b.value = v
            try:
                new_cost = problem.cost()
            except NumericalFailure:
                new_cost = np.inf
            predicted = -(2.0 * g @ delta + delta @ (h @ delta))

            if new_cost < cost:
                gain = (cost - new_cost) / max(predicted, 1e-300)
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                break

            for b, v in zip(free, old):
                b.value = v
            lam *= nu
            nu *= 2.0
            if lam > 1e32:
                status = "converged_no_decrease"
                break

        if status == "converged_no_decrease":
            break

        relative = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        history.append(cost)
        logger.debug("lm iteration %d: cost %.6g lambda %.3g", it, cost, lam)
        if relative < tol:
            status = "converged_cost"
            break
        if np.linalg.norm(delta) < tol * (1.0 + np.linalg.norm(delta)):
            status = "converged_step"
            break
        r, jac, cost = _linearize(problem, offsets, config.jacobian_step)

    if not np.isfinite(cost):
        raise NumericalFailure("non-finite cost")
    return SolveResult(initial, cost, it, status, history)
