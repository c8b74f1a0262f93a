"""Dense primal-dual interior-point solver for small block SDPs.

Problems are stated in standard primal form::

    min   sum_b <C_b, X_b> + c^T s + const
    s.t.  sum_b <A_ib, X_b> + a_i^T s  (=|<=)  rhs_i
          X_b PSD,  s_k >= 0 for nonnegative scalars, free otherwise

Inequality rows receive a nonnegative slack scalar at build time, so the
solver only ever sees equalities.  The search direction is the HKM
direction with Mehrotra's predictor-corrector; the Schur complement is
assembled per group of equally sized blocks and factored sparse (or dense
for small problems).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"

EQ = "="
LE = "<="


class SdpError(ValueError):
    """Malformed problem data."""


@dataclass(frozen=True)
class SolverOptions:
    gap_tol: float = 1e-7
    feas_tol: float = 1e-7
    psd_tol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.98
    infeasible_bound: float = 1e12

    def __post_init__(self):
        for name in ("gap_tol", "feas_tol", "psd_tol", "infeasible_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.step_fraction < 1.0:
            raise ValueError("step_fraction must lie in (0, 1)")


class Lin:
    """Sparse linear functional over block entries and scalars.

    ``blk[(b, i, j)]`` with ``i <= j`` multiplies the matrix entry
    ``X_b[i, j]`` (which is the same variable as ``X_b[j, i]``);
    ``sca[k]`` multiplies scalar ``k``.
    """

    __slots__ = ("blk", "sca")

    def __init__(self, blk=None, sca=None):
        self.blk = dict(blk) if blk else {}
        self.sca = dict(sca) if sca else {}

    @classmethod
    def entry(cls, b: int, i: int, j: int, coef: float = 1.0) -> "Lin":
        if i > j:
            i, j = j, i
        return cls({(b, i, j): float(coef)})

    @classmethod
    def scalar(cls, k: int, coef: float = 1.0) -> "Lin":
        return cls(sca={k: float(coef)})

    @classmethod
    def inner(cls, b: int, mat: np.ndarray) -> "Lin":
        """The functional ``<mat, X_b>`` for a symmetric matrix ``mat``."""
        mat = np.asarray(mat, dtype=float)
        n = mat.shape[0]
        out = {}
        iu, ju = np.triu_indices(n)
        for i, j in zip(iu.tolist(), ju.tolist()):
            v = mat[i, i] if i == j else mat[i, j] + mat[j, i]
            if v != 0.0:
                out[(b, i, j)] = float(v)
        return cls(out)

    def add(self, other: "Lin", scale: float = 1.0) -> "Lin":
        for key, v in other.blk.items():
            self.blk[key] = self.blk.get(key, 0.0) + scale * v
        for key, v in other.sca.items():
            self.sca[key] = self.sca.get(key, 0.0) + scale * v
        return self

    def __add__(self, other: "Lin") -> "Lin":
        return Lin(self.blk, self.sca).add(other)

    def __sub__(self, other: "Lin") -> "Lin":
        return Lin(self.blk, self.sca).add(other, -1.0)

    def __mul__(self, c: float) -> "Lin":
        return Lin({k: c * v for k, v in self.blk.items()},
                   {k: c * v for k, v in self.sca.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "Lin":
        return self * -1.0

    def evaluate(self, blocks: Sequence[np.ndarray], scalars: np.ndarray) -> float:
        total = 0.0
        for (b, i, j), v in self.blk.items():
            total += v * blocks[b][i, j]
        for k, v in self.sca.items():
            total += v * scalars[k]
        return total


@dataclass(frozen=True)
class SdpProblem:
    """Immutable SDP in equality form (slacks already appended)."""

    block_dims: tuple
    scalar_nonneg: tuple
    obj_blk: tuple          # ((b, i, j, coef), ...)
    obj_sca: tuple          # ((k, coef), ...)
    obj_const: float
    con_blk: np.ndarray     # (nnz, 5): row, b, i, j, coef
    con_sca: np.ndarray     # (nnz, 3): row, k, coef
    rhs: np.ndarray
    senses: tuple
    tags: tuple
    slack_of_row: tuple     # scalar index of the slack, or -1

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    @property
    def n_scalars(self) -> int:
        return len(self.scalar_nonneg)

    def objective_value(self, blocks, scalars) -> float:
        val = self.obj_const
        for b, i, j, v in self.obj_blk:
            val += v * blocks[b][i, j]
        for k, v in self.obj_sca:
            val += v * scalars[k]
        return val

    def row_values(self, blocks, scalars) -> np.ndarray:
        """Left-hand sides of every (slack-augmented) equality row."""
        out = np.zeros(self.n_rows)
        cb = self.con_blk
        if len(cb):
            rows = cb[:, 0].astype(int)
            vals = np.array([blocks[int(b)][int(i), int(j)]
                             for b, i, j in cb[:, 1:4]])
            np.add.at(out, rows, cb[:, 4] * vals)
        cs = self.con_sca
        if len(cs):
            np.add.at(out, cs[:, 0].astype(int), cs[:, 2] * scalars[cs[:, 1].astype(int)])
        return out

    def dump(self) -> str:
        """Plain-text sparse dump, one nonzero per line.

        Lines read ``<con> <blk> <row> <col> <value>``.  ``con`` 0 is the
        objective and constraint ``i`` is written as ``i + 1``; matrix
        blocks are numbered from 1 with 1-based row/col; scalar ``k`` is
        written as block ``s`` with row = col = ``k + 1``.  Header lines
        starting with ``#`` give block sizes, scalar cones and right-hand
        sides.
        """
        out = [f"# blocks {' '.join(str(n) for n in self.block_dims)}",
               "# scalars " + "".join("n" if nn else "f" for nn in self.scalar_nonneg),
               "# rhs " + " ".join(repr(float(v)) for v in self.rhs)]
        for b, i, j, v in self.obj_blk:
            out.append(f"0 {b + 1} {i + 1} {j + 1} {float(v)!r}")
        for k, v in self.obj_sca:
            out.append(f"0 s {k + 1} {k + 1} {float(v)!r}")
        for r, b, i, j, v in self.con_blk:
            out.append(f"{int(r) + 1} {int(b) + 1} {int(i) + 1} {int(j) + 1} {float(v)!r}")
        for r, k, v in self.con_sca:
            out.append(f"{int(r) + 1} s {int(k) + 1} {int(k) + 1} {float(v)!r}")
        return "\n".join(out) + "\n"


class SdpBuilder:
    """Incremental construction of an :class:`SdpProblem`."""

    def __init__(self):
        self.block_dims: list[int] = []
        self.scalar_nonneg: list[bool] = []
        self._obj = Lin()
        self._obj_const = 0.0
        self._rows: list[Lin] = []
        self._rhs: list[float] = []
        self._senses: list[str] = []
        self._tags: list[str] = []
        self._slack: list[int] = []

    def add_block(self, n: int) -> int:
        if n < 1:
            raise SdpError("block dimension must be >= 1")
        self.block_dims.append(int(n))
        return len(self.block_dims) - 1

    def add_scalar(self, nonneg: bool = False) -> int:
        self.scalar_nonneg.append(bool(nonneg))
        return len(self.scalar_nonneg) - 1

    def add_objective(self, expr: Lin | None = None, constant: float = 0.0):
        if expr is not None:
            self._obj.add(expr)
        self._obj_const += constant

    def add_constraint(self, expr: Lin, sense: str, rhs: float, tag: str = "") -> int:
        if sense not in (EQ, LE):
            raise SdpError(f"unknown sense {sense!r}")
        slack = -1
        if sense == LE:
            slack = self.add_scalar(nonneg=True)
            expr = expr + Lin.scalar(slack)
        self._rows.append(expr)
        self._rhs.append(float(rhs))
        self._senses.append(sense)
        self._tags.append(tag)
        self._slack.append(slack)
        return len(self._rows) - 1

    @property
    def n_rows(self) -> int:
        return len(self._rows)

    def build(self) -> SdpProblem:
        nb = len(self.block_dims)
        ns = len(self.scalar_nonneg)

        def check_blk(b, i, j):
            if not (0 <= b < nb and 0 <= i <= j < self.block_dims[b]):
                raise SdpError(f"block entry {(b, i, j)} is not declared")

        def check_sca(k):
            if not 0 <= k < ns:
                raise SdpError(f"scalar {k} is not declared")

        cb, cs = [], []
        for r, row in enumerate(self._rows):
            for (b, i, j), v in row.blk.items():
                check_blk(b, i, j)
                if v != 0.0:
                    cb.append((r, b, i, j, v))
            for k, v in row.sca.items():
                check_sca(k)
                if v != 0.0:
                    cs.append((r, k, v))
        for (b, i, j) in self._obj.blk:
            check_blk(b, i, j)
        for k in self._obj.sca:
            check_sca(k)
        return SdpProblem(
            block_dims=tuple(self.block_dims),
            scalar_nonneg=tuple(self.scalar_nonneg),
            obj_blk=tuple((b, i, j, v) for (b, i, j), v in sorted(self._obj.blk.items()) if v != 0.0),
            obj_sca=tuple((k, v) for k, v in sorted(self._obj.sca.items()) if v != 0.0),
            obj_const=float(self._obj_const),
            con_blk=np.array(cb, dtype=float).reshape(-1, 5),
            con_sca=np.array(cs, dtype=float).reshape(-1, 3),
            rhs=np.array(self._rhs, dtype=float),
            senses=tuple(self._senses),
            tags=tuple(self._tags),
            slack_of_row=tuple(self._slack),
        )


@dataclass(frozen=True)
class SdpSolution:
    blocks: tuple
    scalars: np.ndarray
    y: np.ndarray
    dual_blocks: tuple
    dual_scalars: np.ndarray
    primal_objective: float
    dual_objective: float
    status: str
    iterations: int
    gap: float
    primal_residual: float
    dual_residual: float
    message: str = ""
    history: tuple = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def value(self, expr: Lin) -> float:
        return expr.evaluate(self.blocks, self.scalars)


# --------------------------------------------------------------------------
# compiled problem

class _Group:
    """All blocks of one dimension, stacked for batched linear algebra."""

    def __init__(self, dim, ids, rows, A, C):
        self.dim = dim
        self.ids = ids          # block ids, len k
        self.rows = rows        # (k, r) row indices, pads point at m
        self.A = A              # (k, r, n, n)
        self.C = C              # (k, n, n)
        self.mask = None


class _Data:
    pass


def _compile(problem: SdpProblem) -> _Data:
    m = problem.n_rows
    nb = len(problem.block_dims)
    d = _Data()
    d.m = m

    # row norms for equilibration
    sq = np.zeros(m)
    cb = problem.con_blk
    if len(cb):
        rows = cb[:, 0].astype(int)
        diag = cb[:, 2] == cb[:, 3]
        w = np.where(diag, cb[:, 4] ** 2, 0.5 * cb[:, 4] ** 2)
        np.add.at(sq, rows, w)
    cs = problem.con_sca
    if len(cs):
        np.add.at(sq, cs[:, 0].astype(int), cs[:, 2] ** 2)
    if np.any(sq == 0.0):
        bad = int(np.flatnonzero(sq == 0.0)[0])
        raise SdpError(f"constraint {bad} ({problem.tags[bad] or 'untagged'}) has no coefficients")
    dscale = 1.0 / np.sqrt(sq)
    d.row_scale = dscale

    # objective data (unscaled here, scaled below)
    Cb = [np.zeros((n, n)) for n in problem.block_dims]
    for b, i, j, v in problem.obj_blk:
        if i == j:
            Cb[b][i, i] += v
        else:
            Cb[b][i, j] += 0.5 * v
            Cb[b][j, i] += 0.5 * v
    cvec = np.zeros(problem.n_scalars)
    for k, v in problem.obj_sca:
        cvec[k] += v

    # per-block row lists
    per_block_rows = [dict() for _ in range(nb)]
    if len(cb):
        for r, b, i, j, v in cb:
            per_block_rows[int(b)].setdefault(int(r), []).append((int(i), int(j), v))

    cmax = max([np.abs(c).max() for c in Cb] + [np.abs(cvec).max() if len(cvec) else 0.0])
    d.obj_scale = max(1.0, cmax)
    rhs_s = problem.rhs * dscale
    d.rhs_scale = max(1.0, float(np.abs(rhs_s).max()) if m else 1.0)
    d.b = rhs_s / d.rhs_scale
    d.b_orig = problem.rhs.copy()

    groups = {}
    for bid, n in enumerate(problem.block_dims):
        groups.setdefault(n, []).append(bid)
    d.groups = []
    d.block_loc = {}
    for n, ids in sorted(groups.items()):
        rmax = max([len(per_block_rows[b]) for b in ids] + [1])
        k = len(ids)
        rows = np.full((k, rmax), m, dtype=np.int64)
        A = np.zeros((k, rmax, n, n))
        C = np.zeros((k, n, n))
        for gi, b in enumerate(ids):
            d.block_loc[b] = (len(d.groups), gi)
            C[gi] = Cb[b] / d.obj_scale
            for li, (r, ents) in enumerate(sorted(per_block_rows[b].items())):
                rows[gi, li] = r
                s = dscale[r]
                for i, j, v in ents:
                    if i == j:
                        A[gi, li, i, i] += s * v
                    else:
                        A[gi, li, i, j] += 0.5 * s * v
                        A[gi, li, j, i] += 0.5 * s * v
        g = _Group(n, ids, rows, A, C)
        g.mask = rows < m
        d.groups.append(g)

    nonneg = np.array(problem.scalar_nonneg, dtype=bool)
    d.lp_idx = np.flatnonzero(nonneg)
    d.free_idx = np.flatnonzero(~nonneg)
    pos = np.full(problem.n_scalars, -1)
    pos[d.lp_idx] = np.arange(len(d.lp_idx))
    fpos = np.full(problem.n_scalars, -1)
    fpos[d.free_idx] = np.arange(len(d.free_idx))
    if len(cs):
        r = cs[:, 0].astype(int)
        k = cs[:, 1].astype(int)
        v = cs[:, 2] * dscale[r]
        lp = nonneg[k]
        d.Al = sp.csr_matrix((v[lp], (r[lp], pos[k[lp]])), shape=(m, len(d.lp_idx)))
        d.Af = sp.csr_matrix((v[~lp], (r[~lp], fpos[k[~lp]])), shape=(m, len(d.free_idx)))
    else:
        d.Al = sp.csr_matrix((m, len(d.lp_idx)))
        d.Af = sp.csr_matrix((m, len(d.free_idx)))
    d.AlT = d.Al.T.tocsr()
    d.AfT = d.Af.T.tocsr()
    d.cl = cvec[d.lp_idx] / d.obj_scale
    d.cf = cvec[d.free_idx] / d.obj_scale
    d.nu = sum(problem.block_dims) + len(d.lp_idx)
    return d


# --------------------------------------------------------------------------
# operators on the scaled data

def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _A_op(d, Xs, xl, xf):
    out = np.zeros(d.m + 1)
    for g, X in zip(d.groups, Xs):
        vals = np.einsum("grij,gij->gr", g.A, X)
        out += np.bincount(g.rows.ravel(), weights=vals.ravel(), minlength=d.m + 1)
    res = out[: d.m]
    if xl.size:
        res = res + d.Al @ xl
    if xf.size:
        res = res + d.Af @ xf
    return res


def _AT_op(d, y):
    ye = np.append(y, 0.0)
    mats = [np.einsum("gr,grij->gij", ye[g.rows], g.A) for g in d.groups]
    return mats, d.AlT @ y, d.AfT @ y


def _inner(As, Bs):
    return sum(float(np.einsum("gij,gij->", a, b)) for a, b in zip(As, Bs))


def _max_step(Xs, dXs, xl, dxl):
    """Largest alpha with X + alpha dX PSD (and x + alpha dx >= 0)."""
    amax = np.inf
    for X, dX in zip(Xs, dXs):
        L = np.linalg.cholesky(X)
        Li = np.linalg.inv(L)
        S = Li @ dX @ np.swapaxes(Li, -1, -2)
        lmin = np.linalg.eigvalsh(_sym(S))[:, 0].min()
        if lmin < 0:
            amax = min(amax, -1.0 / lmin)
    if xl.size:
        neg = dxl < 0
        if np.any(neg):
            amax = min(amax, float(np.min(-xl[neg] / dxl[neg])))
    return amax


class _Kkt:
    """Factored [[M, Af], [Af^T, 0]].

    An exactly zero pivot (degenerate rows near the optimum) triggers a retry
    with a tiny multiple of the identity added to ``M``; iterative
    refinement against the unregularized equations absorbs the shift.
    """

    def __init__(self, d, M):
        self.m = d.m
        nf = d.Af.shape[1]
        diag = np.abs(M.diagonal()) if d.m else np.zeros(0)
        scale = float(diag.max()) if diag.size else 1.0
        for reg in (0.0, 1e-14, 1e-11, 1e-8):
            Mr = M
            if reg:
                Mr = M + reg * scale * (sp.identity(d.m, format="csc") if sp.issparse(M) else np.eye(d.m))
            if self._factor(d, Mr, nf):
                return
        raise np.linalg.LinAlgError("KKT matrix is singular")

    def _factor(self, d, M, nf) -> bool:
        if sp.issparse(M):
            K = sp.bmat([[M, d.Af], [d.AfT, None]], format="csc") if nf else M.tocsc()
            try:
                self.lu = spla.splu(K, permc_spec="COLAMD")
            except RuntimeError:
                return False
            self.dense = False
            piv = np.abs(self.lu.U.diagonal())
        else:
            if nf:
                Af = d.Af.toarray()
                K = np.block([[M, Af], [Af.T, np.zeros((nf, nf))]])
            else:
                K = M
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self.lu = sla.lu_factor(K, check_finite=True)
            self.dense = True
            piv = np.abs(np.diag(self.lu[0]))
        return bool(piv.size == 0 or (np.all(np.isfinite(piv)) and piv.min() > 0.0))

    def solve(self, r1, r2):
        rhs = np.concatenate([r1, r2])
        sol = sla.lu_solve(self.lu, rhs) if self.dense else self.lu.solve(rhs)
        return sol[: self.m], sol[self.m:]


def _schur(d, Xs, Zinvs, xl, zl, dense):
    parts_i, parts_j, parts_v = [], [], []
    Md = np.zeros((d.m, d.m)) if dense else None
    for g, X, Zi in zip(d.groups, Xs, Zinvs):
        G = X[:, None] @ g.A @ Zi[:, None]
        k, r, n, _ = G.shape
        Mb = np.matmul(g.A.reshape(k, r, n * n), G.reshape(k, r, n * n).transpose(0, 2, 1))
        Mb = 0.5 * (Mb + Mb.transpose(0, 2, 1))
        I = np.broadcast_to(g.rows[:, :, None], Mb.shape)
        J = np.broadcast_to(g.rows[:, None, :], Mb.shape)
        keep = (I < d.m) & (J < d.m)
        if dense:
            np.add.at(Md, (I[keep], J[keep]), Mb[keep])
        else:
            parts_i.append(I[keep])
            parts_j.append(J[keep])
            parts_v.append(Mb[keep])
    if xl.size:
        Ml = d.Al @ sp.diags(xl / zl) @ d.AlT
    else:
        Ml = None
    if dense:
        if Ml is not None:
            Md += Ml.toarray()
        return Md
    M = sp.coo_matrix((np.concatenate(parts_v) if parts_v else np.zeros(0),
                       (np.concatenate(parts_i) if parts_i else np.zeros(0, int),
                        np.concatenate(parts_j) if parts_j else np.zeros(0, int))),
                      shape=(d.m, d.m)).tocsc()
    if Ml is not None:
        M = M + Ml
    return M


def _initial_point(d):
    Xs, Zs = [], []
    for g in d.groups:
        n = g.dim
        k = len(g.ids)
        Xg = np.empty((k, n, n))
        Zg = np.empty((k, n, n))
        for gi in range(k):
            mask = g.mask[gi]
            anorm = np.sqrt(np.einsum("rij,rij->r", g.A[gi], g.A[gi]))[mask]
            bvals = np.abs(d.b[g.rows[gi][mask]])
            xi = max(10.0, np.sqrt(n), n * float(np.max((1 + bvals) / (1 + anorm))) if anorm.size else 0.0)
            eta = max(10.0, np.sqrt(n), float(anorm.max()) if anorm.size else 0.0,
                      float(np.linalg.norm(g.C[gi])))
            Xg[gi] = xi * np.eye(n)
            Zg[gi] = eta * np.eye(n)
        Xs.append(Xg)
        Zs.append(Zg)
    nl = len(d.lp_idx)
    bmax = float(np.abs(d.b).max()) if d.m else 0.0
    xl = np.full(nl, max(10.0, 1.0 + bmax))
    zl = np.full(nl, max(10.0, 1.0 + (float(np.abs(d.cl).max()) if nl else 0.0)))
    xf = np.zeros(len(d.free_idx))
    y = np.zeros(d.m)
    return Xs, xl, xf, y, Zs, zl


def _certificate(d, y, tol=1e-8):
    """True if y is (numerically) a Farkas certificate of primal infeasibility."""
    by = float(d.b @ y)
    if by <= 0:
        return False
    yt = y / by
    mats, atl, atf = _AT_op(d, yt)
    for S in mats:
        if S.size and np.linalg.eigvalsh(_sym(-S))[:, 0].min() < -tol:
            return False
    if atl.size and np.min(-atl) < -tol:
        return False
    if atf.size and np.max(np.abs(atf)) > tol:
        return False
    return True


def solve(problem: SdpProblem, options: SolverOptions | None = None) -> SdpSolution:
    """Solve ``problem`` with the HKM predictor-corrector method."""
    opts = options or SolverOptions()
    d = _compile(problem)
    dense = d.m + len(d.free_idx) <= 600

    Xs, xl, xf, y, Zs, zl = _initial_point(d)
    bnorm = float(np.linalg.norm(d.b_orig))
    cnorm = np.sqrt(sum(float(np.sum(g.C ** 2)) for g in d.groups)
                    + float(d.cl @ d.cl) + float(d.cf @ d.cf)) * d.obj_scale
    unscale_r = d.rhs_scale / d.row_scale

    status, message = MAX_ITER, "iteration limit reached"
    history = []
    it = 0
    small_steps = 0
    relgap = pinf = dinf = np.inf
    pobj = dobj = np.nan
    best = None
    for it in range(opts.max_iter + 1):
        AX = _A_op(d, Xs, xl, xf)
        rp = d.b - AX
        ATy, ATyl, ATyf = _AT_op(d, y)
        Rd = [g.C - a - Z for g, a, Z in zip(d.groups, ATy, Zs)]
        rdl = d.cl - ATyl - zl
        rdf = d.cf - ATyf

        ps = _inner([g.C for g in d.groups], Xs) + float(d.cl @ xl) + float(d.cf @ xf)
        ds = float(d.b @ y)
        pobj = ps * d.obj_scale * d.rhs_scale
        dobj = ds * d.obj_scale * d.rhs_scale
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        pinf = float(np.linalg.norm(rp * unscale_r)) / (1.0 + bnorm)
        dres = np.sqrt(sum(float(np.sum(R ** 2)) for R in Rd) + float(rdl @ rdl) + float(rdf @ rdf))
        dinf = dres * d.obj_scale / (1.0 + cnorm)
        compl = _inner(Xs, Zs) + float(xl @ zl)
        mu = compl / max(d.nu, 1)
        history.append((it, pobj, dobj, relgap, pinf, dinf))
        log.debug("it %d pobj %.10g dobj %.10g gap %.2e pinf %.2e dinf %.2e",
                  it, pobj, dobj, relgap, pinf, dinf)

        merit = max(relgap / opts.gap_tol, pinf / opts.feas_tol, dinf / opts.feas_tol)
        if best is None or merit < best[0]:
            best = (merit, it, Xs, xl, xf, y, Zs, zl, relgap, pinf, dinf, pobj, dobj)
        if merit <= 1.0:
            status, message = OPTIMAL, ""
            break
        if best[0] < 1e3 and merit > 1e3 * best[0]:
            status, message = NUMERICAL_FAILURE, "iterates deteriorated"
            break
        if ds > opts.infeasible_bound or (it > 5 and _certificate(d, y)):
            status, message = INFEASIBLE, "primal infeasible (dual ray)"
            break
        if ps < -opts.infeasible_bound:
            status, message = INFEASIBLE, "dual infeasible (primal unbounded)"
            break
        if it == opts.max_iter:
            break

        try:
            Zinvs = [np.linalg.inv(Z) for Z in Zs]
            M = _schur(d, Xs, Zinvs, xl, zl, dense)
            kkt = _Kkt(d, M)
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            status, message = NUMERICAL_FAILURE, f"factorization failed: {exc}"
            break

        XRZ = [X @ R @ Zi for X, R, Zi in zip(Xs, Rd, Zinvs)]

        def direction(target, corr):
            if corr is None:
                T = [target * Zi - X - xrz for X, Zi, xrz in zip(Xs, Zinvs, XRZ)]
                ql = target / zl - xl
            else:
                cXZ, cl_ = corr
                T = [target * Zi - X - c @ Zi - xrz for X, Zi, xrz, c in zip(Xs, Zinvs, XRZ, cXZ)]
                ql = target / zl - xl - cl_ / zl
            ql = ql - (xl / zl) * rdl
            r1 = rp - _A_op(d, T, ql, np.zeros_like(xf))
            dy, dxf = kkt.solve(r1, rdf)

            def realize(dy, dxf):
                aty, atyl, atyf = _AT_op(d, dy)
                dX = [_sym(t + X @ a @ Zi) for t, X, a, Zi in zip(T, Xs, aty, Zinvs)]
                dxl = ql + (xl / zl) * atyl
                return aty, atyl, atyf, dX, dxl

            def residual(c):
                e1 = rp - _A_op(d, c[5], c[6], c[1])
                e2 = rdf - c[4]
                return e1, e2, np.linalg.norm(e1) + np.linalg.norm(e2)

            # iterative refinement on the linearized equations, kept only while it helps
            cur = (dy, dxf, *realize(dy, dxf))
            e1, e2, err = residual(cur)
            for _ in range(3):
                if err <= 1e-14 * (1.0 + np.linalg.norm(rp)):
                    break
                cy, cf = kkt.solve(e1, e2)
                cand = (cur[0] + cy, cur[1] + cf, *realize(cur[0] + cy, cur[1] + cf))
                c1, c2, cerr = residual(cand)
                if cerr >= 0.5 * err:
                    if cerr < err:
                        cur = cand
                    break
                cur, e1, e2, err = cand, c1, c2, cerr
            dy, dxf, aty, atyl, atyf, dX, dxl = cur
            dZ = [R - a for R, a in zip(Rd, aty)]
            dzl = rdl - atyl
            return dX, dxl, dxf, dy, dZ, dzl

        try:
            dX, dxl, dxf, dy, dZ, dzl = direction(0.0, None)
            ap = min(1.0, _max_step(Xs, dX, xl, dxl))
            ad = min(1.0, _max_step(Zs, dZ, zl, dzl))
            mu_aff = (_inner([X + ap * a for X, a in zip(Xs, dX)], [Z + ad * b for Z, b in zip(Zs, dZ)])
                      + float((xl + ap * dxl) @ (zl + ad * dzl))) / max(d.nu, 1)
            sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3 if mu > 0 else 0.0
            corr = ([a @ b for a, b in zip(dX, dZ)], dxl * dzl)
            dX, dxl, dxf, dy, dZ, dzl = direction(sigma * mu, corr)
            ap = min(1.0, opts.step_fraction * _max_step(Xs, dX, xl, dxl))
            ad = min(1.0, opts.step_fraction * _max_step(Zs, dZ, zl, dzl))
        except (np.linalg.LinAlgError, ValueError) as exc:
            status, message = NUMERICAL_FAILURE, f"step computation failed: {exc}"
            break
        if not (np.isfinite(ap) and np.isfinite(ad)) or not np.all(np.isfinite(dy)):
            status, message = NUMERICAL_FAILURE, "non-finite search direction"
            break

        log.debug("steps ap %.3e ad %.3e sigma %.3e", ap, ad, sigma)
        Xs = [X + ap * a for X, a in zip(Xs, dX)]
        xl = xl + ap * dxl
        xf = xf + ap * dxf
        y = y + ad * dy
        Zs = [Z + ad * b for Z, b in zip(Zs, dZ)]
        zl = zl + ad * dzl

        if max(ap, ad) < 1e-9:
            small_steps += 1
            if small_steps >= 3:
                status, message = NUMERICAL_FAILURE, "step length stalled"
                break
        else:
            small_steps = 0

    if status != OPTIMAL and best is not None and best[1] != it:
        # fall back to the best iterate seen
        merit, bit, Xs, xl, xf, y, Zs, zl, relgap, pinf, dinf, pobj, dobj = best
        if merit <= 1.0:
            status, message = OPTIMAL, ""
        elif status == NUMERICAL_FAILURE:
            message += f" (best iterate {bit} returned)"
    return _package(problem, d, Xs, xl, xf, y, Zs, zl, status, message, it,
                    relgap, pinf, dinf, pobj, dobj, history)


def _package(problem, d, Xs, xl, xf, y, Zs, zl, status, message, it,
             relgap, pinf, dinf, pobj, dobj, history):
    nb = len(problem.block_dims)
    blocks = [None] * nb
    dual_blocks = [None] * nb
    for b in range(nb):
        gi, k = d.block_loc[b]
        blocks[b] = Xs[gi][k] * d.rhs_scale
        dual_blocks[b] = Zs[gi][k] * d.obj_scale
    scalars = np.zeros(problem.n_scalars)
    scalars[d.lp_idx] = xl * d.rhs_scale
    scalars[d.free_idx] = xf * d.rhs_scale
    dual_sc = np.zeros(problem.n_scalars)
    dual_sc[d.lp_idx] = zl * d.obj_scale
    y_orig = y * d.row_scale * d.obj_scale
    return SdpSolution(
        blocks=tuple(blocks),
        scalars=scalars,
        y=y_orig,
        dual_blocks=tuple(dual_blocks),
        dual_scalars=dual_sc,
        primal_objective=float(pobj + problem.obj_const),
        dual_objective=float(dobj + problem.obj_const),
        status=status,
        iterations=it,
        gap=float(relgap),
        primal_residual=float(pinf),
        dual_residual=float(dinf),
        message=message,
        history=tuple(history),
    )


# --------------------------------------------------------------------------
# Hermitian embedding and eigen utilities

@dataclass(frozen=True)
class HermitianEmbedding:
    """Real ``2n x 2n`` block ``[[A, -B], [B, A]]`` standing for ``H = A + jB``.

    ``re(k, m)`` and ``im(k, m)`` are linear reads of ``Re H[k, m]`` and
    ``Im H[k, m]``; they average the two copies so they stay exact on any
    feasible point.
    """

    n: int
    block: int

    @property
    def dim(self) -> int:
        return 2 * self.n

    def re(self, k: int, m: int, coef: float = 1.0) -> Lin:
        n, b = self.n, self.block
        return Lin.entry(b, k, m, 0.5 * coef) + Lin.entry(b, n + k, n + m, 0.5 * coef)

    def im(self, k: int, m: int, coef: float = 1.0) -> Lin:
        if k == m:
            return Lin()
        n, b = self.n, self.block
        # X[n+k, m] = B[k, m], X[k, n+m] = -B[k, m]
        return Lin.entry(b, n + k, m, 0.5 * coef) + Lin.entry(b, k, n + m, -0.5 * coef)

    def trace(self, coef: float = 1.0) -> Lin:
        return Lin.inner(self.block, 0.5 * coef * np.eye(self.dim))

    def quad(self, w: np.ndarray, coef: float = 1.0) -> Lin:
        """``coef * w^H H w`` as a functional of the real block."""
        w = np.asarray(w, dtype=complex)
        u = np.concatenate([w.real, w.imag])
        v = np.concatenate([-w.imag, w.real])
        return Lin.inner(self.block, 0.5 * coef * (np.outer(u, u) + np.outer(v, v)))

    def structure_rows(self) -> list[Lin]:
        n, b = self.n, self.block
        rows = []
        for k in range(n):
            for m in range(k, n):
                rows.append(Lin.entry(b, k, m) - Lin.entry(b, n + k, n + m))
        for k in range(n):
            for m in range(k, n):
                rows.append(Lin.entry(b, n + k, m) + Lin.entry(b, n + m, k))
        return rows

    def hermitian(self, X: np.ndarray) -> np.ndarray:
        n = self.n
        A = 0.5 * (X[:n, :n] + X[n:, n:])
        B = 0.5 * (X[n:, :n] - X[:n, n:])
        H = A + 1j * B
        return 0.5 * (H + H.conj().T)

    @staticmethod
    def real_block(H: np.ndarray) -> np.ndarray:
        A, B = H.real, H.imag
        return np.block([[A, -B], [B, A]])


def embed_hermitian(n: int, builder: SdpBuilder | None = None, tag: str = "hermitian",
                    structure: bool = True) -> HermitianEmbedding:
    """Declare a ``2n x 2n`` real block for an ``n x n`` Hermitian variable.

    With a builder, the block is added and, if ``structure``, the structure
    rows (A symmetric copies equal, B antisymmetric) are appended as
    equalities.  The rows can be left out when every functional touching
    the block is built from ``re``/``im``/``trace``/``quad``: those reads are
    invariant under ``X -> J^T X J``, so the central path stays in the
    structured subspace and ``hermitian`` projects onto it.  Dropping them
    removes a source of degeneracy in the Newton system.
    """
    if n < 1:
        raise SdpError("n must be >= 1")
    if builder is None:
        return HermitianEmbedding(n, -1)
    emb = HermitianEmbedding(n, builder.add_block(2 * n))
    for row in emb.structure_rows() if structure else ():
        builder.add_constraint(row, EQ, 0.0, tag=tag)
    return emb


def max_eigpair(M: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and a unit eigenvector of a symmetric/Hermitian matrix."""
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    M = 0.5 * (M + M.conj().T)
    lam, vec = np.linalg.eigh(M)
    w = vec[:, -1]
    # fix the sign/phase so the result is reproducible
    idx = int(np.argmax(np.abs(w)))
    w = w * (abs(w[idx]) / w[idx])
    return float(lam[-1]), w


def eigenvalues(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    return np.linalg.eigvalsh(0.5 * (M + M.conj().T))


def blocks_psd(solution: SdpSolution, tol: float) -> bool:
    return all(eigenvalues(X)[0] >= -tol * max(1.0, abs(eigenvalues(X)[-1])) for X in solution.blocks)


def iter_rows(problem: SdpProblem, tag: str) -> Iterable[int]:
    return (i for i, t in enumerate(problem.tags) if t == tag)
