"""Levenberg-Marquardt on the whitened factor-graph residuals.

The normal equations are permuted into time order, where every factor spans
at most a few consecutive steps, and factorised with a banded Cholesky.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl

from crowdslam.slam.graph import VAR_DIM, FactorGraph, VariableId, normal_equations


class SingularSystemError(RuntimeError):
    """The normal equations cannot be factorised; ``variables`` lists the culprits."""

    def __init__(self, message, variables=()):
        super().__init__(message)
        self.variables = list(variables)


@dataclass
class SolverSettings:
    """``cost_tol`` adds a relative cost-decrease stop (0 disables it)."""

    max_iterations: int = 50
    step_tol: float = 1e-8
    cost_tol: float = 1e-12
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    rank_tol: float = 1e-12


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    accepted: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list[float] = field(default_factory=list)  # initial cost, then after every accepted step
    converged: bool = False
    final_lambda: float = 0.0

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(np.asarray(self.costs)) <= 0.0))


class BandedSPD:
    """Cholesky factor of an SPD matrix given in upper banded storage (time order)."""

    def __init__(self, ab: np.ndarray, perm: np.ndarray):
        self.perm = perm
        self.u = ab.shape[0] - 1
        self.cb = sl.cholesky_banded(ab, lower=False)  # raises LinAlgError unless PD

    @classmethod
    def from_sparse(cls, A, perm: np.ndarray) -> "BandedSPD":
        n = A.shape[0]
        Ap = A[perm][:, perm].tocoo()
        up = Ap.row <= Ap.col
        i, j, v = Ap.row[up], Ap.col[up], Ap.data[up]
        u = int((j - i).max()) if j.size else 0
        ab = np.zeros((u + 1, n))
        ab[u + i - j, j] = v
        return cls(ab, perm)

    @property
    def pivots(self) -> np.ndarray:
        return self.cb[self.u] ** 2

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve in the original (unpermuted) numbering."""
        out = np.empty_like(b, dtype=float)
        out[self.perm] = sl.cho_solve_banded((self.cb, False), b[self.perm])
        return out


def _scaled(ab: np.ndarray) -> np.ndarray:
    """Jacobi-scaled copy (unit diagonal) of an upper banded matrix."""
    u, n = ab.shape[0] - 1, ab.shape[1]
    s = 1.0 / np.sqrt(ab[u])
    out = ab.copy()
    for k in range(u + 1):
        off = u - k  # row i = j - off
        if off < n:
            out[k, off:] *= s[: n - off] * s[off:]
    return out


def time_order(graph: FactorGraph) -> np.ndarray:
    return np.argsort(graph.column_steps(), kind="stable")


def _unconstrained(graph: FactorGraph, H, rel_tol: float) -> list[VariableId]:
    """Variables spanning the (numerical) null space of ``H``."""
    owner = graph.column_owner()
    diag = H.diagonal()
    bad = set(np.flatnonzero(diag <= 0.0).tolist())
    if not bad and graph.dim <= 3000:
        scale = 1.0 / np.sqrt(np.maximum(diag, 1e-300))
        Hs = H.toarray() * scale[:, None] * scale[None, :]
        w, V = np.linalg.eigh(Hs)
        null = V[:, w < rel_tol * max(w[-1], 1.0)]
        if null.size:
            bad = set(np.flatnonzero(np.max(np.abs(null), axis=1) > 1e-3).tolist())
    return sorted({owner[c] for c in bad}, key=lambda v: (v.kind.value, v.step, v.ped_id))


def _singular(graph, H, rel_tol, what):
    vids = _unconstrained(graph, H, rel_tol)
    names = ", ".join(map(str, vids)) or "unknown"
    return SingularSystemError(f"{what}; unconstrained: {names}", vids)


def _check_banded(graph, ab, perm, settings, H=None):
    if np.any(ab[-1] <= 0.0):
        ok = False
    else:
        try:
            ok = BandedSPD(_scaled(ab), perm).pivots.min() > settings.rank_tol
        except np.linalg.LinAlgError:
            ok = False
    if not ok:
        if H is None:
            H, _ = normal_equations(graph)
        raise _singular(graph, H, 1e-9, "normal equations are singular")


def check_rank(graph: FactorGraph, settings: SolverSettings | None = None):
    """Raise :class:`SingularSystemError` unless the undamped normal equations are full rank."""
    settings = settings or SolverSettings()
    if graph.dim == 0:
        return
    perm = time_order(graph)
    pinv = np.argsort(perm)
    ab, _, _ = graph.normal_system(graph.x, pinv, graph.bandwidth(pinv))
    _check_banded(graph, ab, perm, settings)


def solve(graph: FactorGraph, settings: SolverSettings | None = None, check: bool = True):
    """Minimise ``sum |r_w|^2`` in place; returns ``(graph, diagnostics)``.

    A step is accepted when it does not increase the cost.  The damping
    ``lambda`` (Marquardt scaling by ``diag(H)``) is divided by 10 on
    acceptance and multiplied by 10 on rejection.  Iteration stops when the
    step norm drops below ``step_tol``, when an accepted step lowers the cost
    by less than ``cost_tol`` relative, or after ``max_iterations``.
    """
    settings = settings or SolverSettings()
    diag = SolveDiagnostics()
    x = graph.x.copy()
    cost = graph.cost(x)
    diag.initial_cost = diag.final_cost = cost
    diag.costs.append(cost)
    if graph.dim == 0:
        diag.converged = True
        return graph, diag
    perm = time_order(graph)
    pinv = np.argsort(perm)
    u = graph.bandwidth(pinv)
    index = graph.normal_index(pinv, u)
    lam = settings.lambda_init
    ab, g, _ = graph.normal_system(x, pinv, u, index)
    if check:
        _check_banded(graph, ab, perm, settings)
    for it in range(settings.max_iterations):
        diag.iterations = it + 1
        damped = ab.copy()
        damped[u] += lam * ab[u]
        try:
            cb = sl.cholesky_banded(damped, lower=False)
        except np.linalg.LinAlgError as exc:
            raise _singular(graph, normal_equations(graph, x)[0], settings.rank_tol, f"factorisation failed ({exc})") from exc
        delta = np.empty(graph.dim)
        delta[perm] = sl.cho_solve_banded((cb, False), -g)
        if not np.all(np.isfinite(delta)):
            raise _singular(graph, normal_equations(graph, x)[0], settings.rank_tol, "non-finite step")
        step = float(np.linalg.norm(delta))
        x_new = graph.retract(x, delta)
        new_cost = graph.cost(x_new)
        if new_cost <= cost:
            small_gain = cost - new_cost <= settings.cost_tol * cost
            x, cost = x_new, new_cost
            diag.accepted += 1
            diag.costs.append(cost)
            lam = max(lam / settings.lambda_factor, 1e-12)
            if step < settings.step_tol or small_gain:
                diag.converged = True
                break
            ab, g, _ = graph.normal_system(x, pinv, u, index)
        else:
            if step < settings.step_tol:
                diag.converged = True
                break
            lam *= settings.lambda_factor
            if lam > settings.lambda_max:
                break
    graph.x = x
    diag.final_cost = cost
    diag.final_lambda = lam
    return graph, diag


def marginal_covariances(graph: FactorGraph, vids: list[VariableId]) -> list[np.ndarray]:
    """Marginal covariance blocks of ``vids`` from the undamped normal equations at ``graph.x``."""
    if not vids:
        return []
    perm = time_order(graph)
    pinv = np.argsort(perm)
    ab, _, _ = graph.normal_system(graph.x, pinv, graph.bandwidth(pinv))
    offs = [graph.offset(v) for v in vids]
    cols = np.concatenate([np.arange(o, o + VAR_DIM[v.kind]) for o, v in zip(offs, vids)])
    rhs = np.zeros((graph.dim, cols.shape[0]))
    rhs[cols, np.arange(cols.shape[0])] = 1.0
    try:
        X = BandedSPD(ab, perm).solve(rhs)
    except np.linalg.LinAlgError as exc:
        raise _singular(graph, normal_equations(graph)[0], 1e-9, f"cannot compute marginals ({exc})") from exc
    out, c = [], 0
    for o, v in zip(offs, vids):
        dd = VAR_DIM[v.kind]
        block = X[o : o + dd, c : c + dd]
        out.append(0.5 * (block + block.T))
        c += dd
    return out
