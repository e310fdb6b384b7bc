"""Factor graph over robot poses and time-indexed landmark states.

Factors are stored in homogeneous blocks (one block per factor kind and
batch) so that residuals and Jacobians are evaluated with array operations.
:attr:`FactorGraph.factors` expands the blocks into individual
:class:`Factor` records for inspection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from crowdslam.geometry import motion_jacobian_batch, motion_model_batch, observation_jacobians_batch, observation_model_batch, wrap_angle


class VarKind(str, enum.Enum):
    POSE = "pose"
    LM_POS = "lm_pos"
    LM_VEL = "lm_vel"


VAR_DIM = {VarKind.POSE: 3, VarKind.LM_POS: 2, VarKind.LM_VEL: 2}


@dataclass(frozen=True, order=True)
class VariableId:
    kind: VarKind
    step: int
    ped_id: int = -1

    def __str__(self):
        if self.kind == VarKind.POSE:
            return f"pose@{self.step}"
        return f"{self.kind.value}[ped {self.ped_id}]@{self.step}"


@dataclass
class Factor:
    kind: str
    variables: tuple
    measurement: np.ndarray
    information: np.ndarray


def sqrt_information(info: np.ndarray) -> np.ndarray:
    """Upper factor ``U`` with ``U^T U = info`` for a stack ``(n, m, m)``; raises if not SPD."""
    info = np.asarray(info, dtype=float)
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise ValueError("information matrix is not symmetric positive definite") from exc
    return np.swapaxes(L, -1, -2)


class FactorBlock:
    """``n`` factors of one kind with residual dimension ``m``.

    ``slots`` holds, per connected variable, the state-vector columns ``(n, d)``.
    """

    kind = "abstract"
    angle_rows: tuple = ()

    def __init__(self, slots, info, measurement):
        self.slots = [np.asarray(s, dtype=np.int64) for s in slots]
        self.measurement = np.asarray(measurement, dtype=float)
        self.info = np.asarray(info, dtype=float)
        self.sqrt_info = sqrt_information(self.info) if len(self.info) else self.info.copy()

    def __len__(self):
        return self.slots[0].shape[0]

    def error(self, x):
        raise NotImplementedError

    def linearize(self, x):
        """Return ``(residual (n, m), [J_slot (n, m, d_slot)])``."""
        raise NotImplementedError


class AnchorBlock(FactorBlock):
    """Unary prior ``x_var - value``; angle rows are wrapped."""

    def __init__(self, cols, value, info, kind="anchor", angle_rows=()):
        super().__init__([cols], info, value)
        self.kind = kind
        self.angle_rows = tuple(angle_rows)

    def error(self, x):
        r = x[self.slots[0]] - self.measurement
        for a in self.angle_rows:
            r[:, a] = wrap_angle(r[:, a])
        return r

    def linearize(self, x):
        n, d = self.slots[0].shape
        return self.error(x), [np.broadcast_to(np.eye(d), (n, d, d))]


class OdometryBlock(FactorBlock):
    """``x_i - g(x_{i-1}, u)`` with the heading component wrapped."""

    kind = "odometry"
    angle_rows = (2,)

    def __init__(self, prev_cols, cur_cols, controls, dt, info):
        super().__init__([prev_cols, cur_cols], info, controls)
        self.dt = float(dt)

    def error(self, x):
        prev = x[self.slots[0]]
        pred = motion_model_batch(prev, self.measurement, self.dt)
        r = x[self.slots[1]] - pred
        r[:, 2] = wrap_angle(r[:, 2])
        return r

    def linearize(self, x):
        prev = x[self.slots[0]]
        G = motion_jacobian_batch(prev, self.measurement, self.dt)
        n = prev.shape[0]
        return self.error(x), [-G, np.broadcast_to(np.eye(3), (n, 3, 3))]


class ObservationBlock(FactorBlock):
    """``z - h(x, m)`` with the bearing component wrapped."""

    kind = "range_bearing"
    angle_rows = (1,)

    def error(self, x):
        pred = observation_model_batch(x[self.slots[0]], x[self.slots[1]])
        r = self.measurement - pred
        r[:, 1] = wrap_angle(r[:, 1])
        return r

    def linearize(self, x):
        Hx, Hm = observation_jacobians_batch(x[self.slots[0]], x[self.slots[1]])
        return self.error(x), [-Hx, -Hm]


class LinearBlock(FactorBlock):
    """Residual ``sum_s A_s x_s - b`` with constant coefficients.

    Each ``A_s`` is either shared ``(m, d_s)`` or per factor ``(n, m, d_s)``.
    """

    def __init__(self, kind, slots, coeffs, b, info):
        super().__init__(slots, info, b)
        self.kind = kind
        self.coeffs = [np.asarray(A, dtype=float) for A in coeffs]

    def error(self, x):
        r = -self.measurement.copy()
        for cols, A in zip(self.slots, self.coeffs):
            r += np.einsum("nij,nj->ni", A, x[cols]) if A.ndim == 3 else x[cols] @ A.T
        return r

    def linearize(self, x):
        n = len(self)
        return self.error(x), [A if A.ndim == 3 else np.broadcast_to(A, (n,) + A.shape) for A in self.coeffs]


class FactorGraph:
    """Variables (with current estimates) and factor blocks for one window."""

    def __init__(self, i_min: int = 0, i_now: int = 0):
        self.i_min = i_min
        self.i_now = i_now
        self._kinds: list[np.ndarray] = []
        self._steps: list[np.ndarray] = []
        self._peds: list[np.ndarray] = []
        self._offsets: list[np.ndarray] = []
        self._values: list[np.ndarray] = []
        self._angle_cols: list[np.ndarray] = []
        self.dim = 0
        self.blocks: list[FactorBlock] = []
        self._x = None
        self._index = None

    # variables -----------------------------------------------------------------

    def add_variables(self, kind: VarKind, steps, peds, values) -> np.ndarray:
        """Append ``n`` variables of one kind; returns their first state column."""
        kind = VarKind(kind)
        d = VAR_DIM[kind]
        steps = np.asarray(steps, dtype=np.int64).reshape(-1)
        peds = np.broadcast_to(np.asarray(peds, dtype=np.int64), steps.shape)
        values = np.asarray(values, dtype=float).reshape(steps.shape[0], d)
        offsets = self.dim + d * np.arange(steps.shape[0], dtype=np.int64)
        self._kinds.append(np.full(steps.shape[0], list(VarKind).index(kind)))
        self._steps.append(steps)
        self._peds.append(peds.copy())
        self._offsets.append(offsets)
        self._values.append(values.reshape(-1))
        if kind == VarKind.POSE:
            self._angle_cols.append(offsets + 2)
        self.dim += d * steps.shape[0]
        self._x = None
        self._index = None
        return offsets

    def add_variable(self, vid: VariableId, value) -> int:
        ped = vid.ped_id if vid.kind != VarKind.POSE else -1
        return int(self.add_variables(vid.kind, [vid.step], [ped], value)[0])

    def add_block(self, block: FactorBlock):
        if len(block):
            self.blocks.append(block)

    @property
    def x(self) -> np.ndarray:
        if self._x is None:
            self._x = np.concatenate(self._values) if self._values else np.zeros(0)
        return self._x

    @x.setter
    def x(self, value):
        self._x = np.asarray(value, dtype=float)

    @property
    def angle_cols(self) -> np.ndarray:
        return np.concatenate(self._angle_cols) if self._angle_cols else np.zeros(0, dtype=np.int64)

    def _build_index(self):
        kinds = list(VarKind)
        index = {}
        for k, s, p, o in zip(self._kinds, self._steps, self._peds, self._offsets):
            for kk, ss, pp, oo in zip(k, s, p, o):
                kind = kinds[kk]
                index[VariableId(kind, int(ss), int(pp) if kind != VarKind.POSE else -1)] = int(oo)
        self._index = index

    @property
    def variables(self) -> list[VariableId]:
        if self._index is None:
            self._build_index()
        return list(self._index)

    def offset(self, vid: VariableId) -> int:
        if self._index is None:
            self._build_index()
        return self._index[vid]

    def value(self, vid: VariableId) -> np.ndarray:
        o = self.offset(vid)
        return self.x[o : o + VAR_DIM[vid.kind]].copy()

    def column_owner(self) -> dict[int, VariableId]:
        if self._index is None:
            self._build_index()
        out = {}
        for vid, o in self._index.items():
            for c in range(VAR_DIM[vid.kind]):
                out[o + c] = vid
        return out

    def column_steps(self) -> np.ndarray:
        """Time step of every state column (used to order the normal equations)."""
        out = np.zeros(self.dim, dtype=np.int64)
        kinds = list(VarKind)
        for k, s, o in zip(self._kinds, self._steps, self._offsets):
            for kk in np.unique(k):
                d = VAR_DIM[kinds[kk]]
                sel = k == kk
                cols = o[sel][:, None] + np.arange(d)[None, :]
                out[cols] = s[sel][:, None]
        return out

    def count(self, kind: VarKind) -> int:
        idx = list(VarKind).index(VarKind(kind))
        return int(sum(np.count_nonzero(k == idx) for k in self._kinds))

    # factors -------------------------------------------------------------------

    @property
    def factors(self) -> list[Factor]:
        owner = self.column_owner()
        out = []
        for b in self.blocks:
            for i in range(len(b)):
                vids = tuple(owner[int(cols[i, 0])] for cols in b.slots)
                out.append(Factor(b.kind, vids, b.measurement[i], b.info[i]))
        return out

    def factor_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for b in self.blocks:
            out[b.kind] = out.get(b.kind, 0) + len(b)
        return out

    @property
    def n_residuals(self) -> int:
        return sum(len(b) * b.info.shape[1] for b in self.blocks)

    # evaluation ------------------------------------------------------------------

    def whitened_residuals(self, x=None) -> np.ndarray:
        x = self.x if x is None else x
        parts = [np.einsum("nij,nj->ni", b.sqrt_info, b.error(x)).reshape(-1) for b in self.blocks]
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, x=None) -> float:
        r = self.whitened_residuals(x)
        return float(r @ r)

    def linearize(self, x=None):
        """Whitened residual vector and sparse Jacobian (CSR) at ``x``."""
        x = self.x if x is None else x
        rows, cols, vals, res = [], [], [], []
        row0 = 0
        for b in self.blocks:
            r, Js = b.linearize(x)
            U = b.sqrt_info
            n, m = r.shape
            res.append(np.einsum("nij,nj->ni", U, r).reshape(-1))
            ridx = row0 + np.arange(n * m, dtype=np.int64).reshape(n, m)
            for c, J in zip(b.slots, Js):
                d = c.shape[1]
                Jw = np.einsum("nij,njk->nik", U, J)
                rows.append(np.broadcast_to(ridx[:, :, None], (n, m, d)).reshape(-1))
                cols.append(np.broadcast_to(c[:, None, :], (n, m, d)).reshape(-1))
                vals.append(Jw.reshape(-1))
            row0 += n * m
        if not rows:
            return np.zeros(0), sp.csr_matrix((0, self.dim))
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row0, self.dim)
        )
        return np.concatenate(res), J

    def bandwidth(self, perm_inv: np.ndarray) -> int:
        """Upper bandwidth of the normal equations when columns are renumbered by ``perm_inv``."""
        u = 0
        for b in self.blocks:
            P = np.concatenate([perm_inv[c] for c in b.slots], axis=1)
            u = max(u, int((P.max(axis=1) - P.min(axis=1)).max()))
        return u

    def normal_index(self, perm_inv: np.ndarray, u: int) -> list:
        """Scatter indices for :meth:`normal_system`; valid while the graph structure is unchanged."""
        n = self.dim
        out = []
        for b in self.blocks:
            P = np.concatenate([perm_inv[c] for c in b.slots], axis=1)
            I, K = P[:, :, None], P[:, None, :]
            I, K = np.broadcast_arrays(I, K)
            keep = (I <= K).ravel()
            target = ((u + I - K) * n + K).ravel()[keep]
            out.append((P.ravel(), np.flatnonzero(keep), target))
        return out

    def normal_system(self, x, perm_inv: np.ndarray, u: int, index: list | None = None):
        """Normal equations at ``x`` in upper banded storage, renumbered by ``perm_inv``.

        Returns ``(ab, g, cost)`` where ``ab[u + i - j, j] = H[i, j]`` for
        ``i <= j`` and ``g = J^T r`` (both in the renumbered order).
        """
        n = self.dim
        if index is None:
            index = self.normal_index(perm_inv, u)
        ab = np.zeros((u + 1) * n)
        g = np.zeros(n)
        cost = 0.0
        for b, (gidx, sel, target) in zip(self.blocks, index):
            r, Js = b.linearize(x)
            U = b.sqrt_info
            rw = np.einsum("nij,nj->ni", U, r)
            cost += float(np.sum(rw * rw))
            Jw = np.einsum("nij,njk->nik", U, np.concatenate(Js, axis=2))
            g += np.bincount(gidx, weights=np.einsum("nma,nm->na", Jw, rw).ravel(), minlength=n)
            blk = np.einsum("nma,nmb->nab", Jw, Jw).ravel()
            ab += np.bincount(target, weights=blk[sel], minlength=(u + 1) * n)
        return ab.reshape(u + 1, n), g, cost

    def retract(self, x, delta):
        out = x + delta
        ac = self.angle_cols
        if ac.size:
            out[ac] = wrap_angle(out[ac])
        return out


def normal_equations(graph: FactorGraph, x=None):
    """``(H, g)`` with ``H = J^T J`` and ``g = J^T r`` of the whitened system."""
    r, J = graph.linearize(x)
    Jc = J.tocsc()
    return (Jc.T @ Jc).tocsc(), Jc.T @ r
