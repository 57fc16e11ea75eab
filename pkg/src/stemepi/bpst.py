"""Bivariate penalized splines over triangulations (BPST).

Each triangle carries the ``(d+1)(d+2)/2`` Bernstein polynomials of degree
``d`` in its barycentric coordinates. Global smoothness ``C^r`` is imposed by
linear conditions ``H @ theta = 0`` across interior edges, and the roughness
of a spline is the thin-plate energy ``theta' P theta``.
"""

import io
import json
import warnings
from dataclasses import dataclass, field
from math import factorial

import numpy as np
import scipy.linalg

from ._validation import InputError, check_points, frozen
from .mesh import locate_all

RANK_TOL = 1e-10


class OutsideDomainError(InputError):
    """Raised when evaluation points fall outside the triangulated domain."""

    def __init__(self, indices):
        self.indices = list(map(int, indices))
        super().__init__(f"points outside the triangulation at indices {self.indices[:20]}"
                         + (" ..." if len(self.indices) > 20 else ""))


class RankError(ArithmeticError):
    pass


def multi_indices(d):
    """Exponent triples ``(i, j, k)`` with ``i + j + k = d``, in basis order."""
    return [(i, j, d - i - j) for i in range(d, -1, -1) for j in range(d - i, -1, -1)]


def bernstein(bary, d, deriv=(0, 0, 0)):
    """Evaluate (partial derivatives of) degree-``d`` Bernstein polynomials.

    ``deriv`` gives derivative orders with respect to the three barycentric
    variables, treating them as independent. Returns shape (n, n_loc).
    """
    bary = np.atleast_2d(bary)
    idx = np.array(multi_indices(d))
    coef = np.array([factorial(d) / (factorial(i) * factorial(j) * factorial(k)) for i, j, k in idx])
    out = np.ones((len(bary), len(idx))) * coef
    for axis in range(3):
        e = idx[:, axis]
        m = deriv[axis]
        fall = np.ones(len(idx))
        for q in range(m):
            fall *= e - q
        power = np.clip(e - m, 0, None)
        out *= fall * bary[:, axis:axis + 1] ** power
    return out


def _bary_gradients(corners):
    """Rows are the Cartesian gradients of the three barycentric coordinates."""
    T = np.vstack([np.ones(3), corners.T])  # [1; x; y] = T @ b
    return np.linalg.inv(T)[:, 1:]


def triangle_quadrature(n):
    """Collapsed Gauss rule on the reference triangle.

    Returns barycentric nodes (m, 3) and weights summing to one; exact for
    polynomials of total degree ``2n - 2``.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = (x + 1) / 2, w / 2
    s, t = np.meshgrid(x, x, indexing="ij")
    ws = np.outer(w, w) * (1 - s)
    u1, u2 = s.ravel(), (t * (1 - s)).ravel()
    return np.column_stack([1 - u1 - u2, u1, u2]), 2 * ws.ravel()


def _cartesian_second(bary, d, G):
    """Second Cartesian derivatives (xx, xy, yy) of local Bernstein polynomials."""
    n_loc = (d + 1) * (d + 2) // 2
    out = np.zeros((3, len(bary), n_loc))
    if d < 2:
        return out
    for l in range(3):
        for m in range(3):
            order = [0, 0, 0]
            order[l] += 1
            order[m] += 1
            B = bernstein(bary, d, tuple(order))
            out[0] += B * G[l, 0] * G[m, 0]
            out[1] += B * G[l, 0] * G[m, 1]
            out[2] += B * G[l, 1] * G[m, 1]
    return out


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Bernstein basis on a mesh with its penalty, constraints and null space."""

    mesh: object
    d: int
    r_s: int
    penalty: np.ndarray = field(repr=False)
    constraints: np.ndarray = field(repr=False)
    nullspace: np.ndarray = field(repr=False)
    rank: int = 0

    @property
    def n_loc(self):
        return (self.d + 1) * (self.d + 2) // 2

    @property
    def n_basis(self):
        return self.mesh.M * self.n_loc

    @property
    def n_reduced(self):
        return self.nullspace.shape[1]

    def reduced_penalty(self):
        """``Q2' P Q2``, the penalty acting on reduced coefficients."""
        K = self.nullspace.T @ self.penalty @ self.nullspace
        return (K + K.T) / 2

    def save(self, file):
        """Write the basis to an ``.npz`` blob keyed by the mesh digest."""
        meta = {"d": self.d, "r_s": self.r_s, "rank": self.rank, "mesh": self.mesh.digest}
        np.savez_compressed(file, meta=json.dumps(meta), penalty=self.penalty,
                            constraints=self.constraints, nullspace=self.nullspace)

    @classmethod
    def load(cls, file, mesh):
        with np.load(file) as z:
            meta = json.loads(str(z["meta"]))
            if meta["mesh"] != mesh.digest:
                raise InputError("cached basis was built on a different mesh")
            return cls(mesh, meta["d"], meta["r_s"], frozen(z["penalty"]),
                       frozen(z["constraints"]), frozen(z["nullspace"]), meta["rank"])


@dataclass(frozen=True)
class SplineCoefficients:
    values: np.ndarray
    reduced: bool = False


def local_index(d):
    """Map exponent triple -> position within a triangle's block."""
    return {e: k for k, e in enumerate(multi_indices(d))}


def energy_matrix(mesh, d):
    """Block-diagonal thin-plate energy matrix of the Bernstein basis.

    ``theta' P theta`` integrates
    ``beta_xx**2 + 2 beta_xy**2 + beta_yy**2`` over the mesh exactly.
    """
    n_loc = (d + 1) * (d + 2) // 2
    P = np.zeros((mesh.M * n_loc, mesh.M * n_loc))
    if d < 2:
        warnings.warn("energy is identically zero for degree < 2", RuntimeWarning, stacklevel=2)
        return P
    nodes, weights = triangle_quadrature(max(d - 1, 1) + 1)
    areas = mesh.areas()
    for m in range(mesh.M):
        G = _bary_gradients(mesh.corners(m))
        xx, xy, yy = _cartesian_second(nodes, d, G)
        w = weights * areas[m]
        block = (xx.T * w) @ xx + 2 * (xy.T * w) @ xy + (yy.T * w) @ yy
        sl = slice(m * n_loc, (m + 1) * n_loc)
        P[sl, sl] = (block + block.T) / 2
    return P


def smoothness_constraints(mesh, d, r_s):
    """Rows of ``H`` enforcing ``C^r_s`` continuity across every interior edge."""
    lidx = local_index(d)
    n_loc = len(lidx)
    rows = []
    for (a, b), (t1, t2) in sorted(mesh.interior_edges().items()):
        tri1 = list(mesh.triangles[t1])
        tri2 = list(mesh.triangles[t2])
        opp1 = next(v for v in tri1 if v not in (a, b))
        opp2 = next(v for v in tri2 if v not in (a, b))
        order1 = (opp1, a, b)
        corners = mesh.vertices[list(order1)]
        T = np.vstack([np.ones(3), corners.T])
        beta = np.linalg.solve(T, np.r_[1.0, mesh.vertices[opp2]])

        def col(tri_id, tri, verts, exps):
            pos = [tri.index(v) for v in verts]
            e = [0, 0, 0]
            for p, x in zip(pos, exps):
                e[p] = x
            return tri_id * n_loc + lidx[tuple(e)]

        for i in range(r_s + 1):
            sub = multi_indices(i)
            sub_coef = bernstein(beta[None, :], i)[0] if i > 0 else np.ones(1)
            for j in range(d - i, -1, -1):
                k = d - i - j
                row = np.zeros(mesh.M * n_loc)
                row[col(t2, tri2, (opp2, a, b), (i, j, k))] += 1.0
                for (nu, mu, ka), c in zip(sub, sub_coef):
                    row[col(t1, tri1, order1, (nu, j + mu, k + ka))] -= c
                rows.append(row)
    if not rows:
        return np.zeros((0, mesh.M * n_loc))
    return np.array(rows)


def nullspace_qr(H, n, tol=RANK_TOL):
    """Orthonormal basis of ``ker H`` from a pivoted QR factorisation of ``H'``."""
    if H.shape[0] == 0:
        return np.eye(n), 0
    Q, R, _ = scipy.linalg.qr(H.T, pivoting=True, mode="full")
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.eye(n), 0
    rank = int(np.sum(diag > tol * diag[0]))
    Q2 = Q[:, rank:]
    resid = np.abs(H @ Q2).max() if Q2.size else 0.0
    if resid > 1e3 * tol * max(1.0, np.abs(H).max()):
        raise RankError(f"rank determination failed: numerical rank {rank} at tolerance "
                        f"{tol:g} leaves |H Q2| = {resid:.3g}")
    return Q2, rank


def build_basis(mesh, d, r_s):
    """Assemble the spline space ``S^{r_s}_d`` on ``mesh``."""
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise InputError(f"degree must be an integer >= 1, got {d}")
    if not 0 <= r_s < d:
        raise InputError(f"smoothness must satisfy 0 <= r_s < d, got r_s={r_s}, d={d}")
    with warnings.catch_warnings():
        if d < 2:
            warnings.simplefilter("ignore", RuntimeWarning)
        P = energy_matrix(mesh, d)
    H = smoothness_constraints(mesh, d, r_s)
    Q2, rank = nullspace_qr(H, mesh.M * (d + 1) * (d + 2) // 2)
    return SplineBasis(mesh, int(d), int(r_s), frozen(P), frozen(H), frozen(Q2), rank)


_BASIS_CACHE = {}


def cached_basis(mesh, d, r_s):
    key = (mesh.digest, int(d), int(r_s))
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = build_basis(mesh, d, r_s)
    return _BASIS_CACHE[key]


def eval_basis(basis, points):
    """Matrix of all basis functions at ``points`` (rows sum to one)."""
    pts = check_points(points)
    ids, bary = locate_all(basis.mesh, pts)
    if np.any(ids < 0):
        raise OutsideDomainError(np.flatnonzero(ids < 0))
    n_loc = basis.n_loc
    out = np.zeros((len(pts), basis.n_basis))
    local = bernstein(bary, basis.d)
    cols = ids[:, None] * n_loc + np.arange(n_loc)[None, :]
    np.put_along_axis(out, cols, local, axis=1)
    return out


def eval_spline(basis, coeffs, points):
    """Evaluate a spline given full or reduced (``theta*``) coefficients."""
    if isinstance(coeffs, SplineCoefficients):
        vals, reduced = np.asarray(coeffs.values, float), coeffs.reduced
    else:
        vals = np.asarray(coeffs, float)
        reduced = vals.shape[0] == basis.n_reduced and vals.shape[0] != basis.n_basis
    if reduced:
        if vals.shape[0] != basis.n_reduced:
            raise InputError(f"expected {basis.n_reduced} reduced coefficients, got {vals.shape[0]}")
        vals = basis.nullspace @ vals
    elif vals.shape[0] != basis.n_basis:
        raise InputError(f"expected {basis.n_basis} coefficients, got {vals.shape[0]}")
    return eval_basis(basis, points) @ vals


def eval_spline_derivatives(basis, theta, points, triangle_ids=None):
    """Value and gradient of the spline, optionally forcing the triangle used."""
    pts = check_points(points)
    mesh = basis.mesh
    if triangle_ids is None:
        ids, _ = locate_all(mesh, pts)
        if np.any(ids < 0):
            raise OutsideDomainError(np.flatnonzero(ids < 0))
    else:
        ids = np.broadcast_to(np.asarray(triangle_ids), (len(pts),))
    n_loc = basis.n_loc
    out = np.zeros((len(pts), 3))
    for m in np.unique(ids):
        sel = ids == m
        corners = mesh.corners(m)
        T = np.vstack([np.ones(3), corners.T])
        bary = np.linalg.solve(T, np.vstack([np.ones(sel.sum()), pts[sel].T])).T
        G = _bary_gradients(corners)
        c = theta[m * n_loc:(m + 1) * n_loc]
        out[sel, 0] = bernstein(bary, basis.d) @ c
        for l in range(3):
            order = [0, 0, 0]
            order[l] = 1
            dB = bernstein(bary, basis.d, tuple(order)) @ c
            out[sel, 1] += dB * G[l, 0]
            out[sel, 2] += dB * G[l, 1]
    return out


def basis_to_bytes(basis):
    buf = io.BytesIO()
    basis.save(buf)
    return buf.getvalue()
