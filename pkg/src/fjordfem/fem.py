"""Continuous Lagrange finite elements on triangles, degrees 1 through 4.

Scalar- and vector-valued spaces share one node layout: vertex nodes first,
then edge nodes (edges ordered by their sorted vertex pair, nodes running from
the lower-numbered vertex to the higher), then per-cell interior nodes.  Vector
degrees of freedom interleave components node by node.

Assembly is vectorized over cells: reference bases are tabulated once per
quadrature rule, per-cell blocks are produced with einsum, and a precomputed
scatter pattern turns them into CSR data without touching Python loops.
"""

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .quadrature import interval_rule, triangle_rule


class OutOfDomainError(Exception):
    """Raised when a point evaluation falls outside the mesh."""


# ---------------------------------------------------------------------------
# reference element


def _monomial_exponents(degree):
    return [(a, b) for total in range(degree + 1) for a in range(total, -1, -1)
            for b in [total - a]]


def _monomial_matrix(points, exps):
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    a = np.array([e[0] for e in exps])[None, :]
    b = np.array([e[1] for e in exps])[None, :]
    return x ** a * y ** b


class ReferenceElement:
    """Equispaced Lagrange basis on the unit triangle."""

    def __init__(self, degree):
        if not 1 <= degree <= 4:
            raise ValueError("element degree must be between 1 and 4")
        self.degree = degree
        k = degree
        nodes = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
        # edge nodes follow the local edges (0,1), (1,2), (0,2)
        for i in range(1, k):
            nodes.append((i / k, 0.0))
        for i in range(1, k):
            nodes.append((1.0 - i / k, i / k))
        for i in range(1, k):
            nodes.append((0.0, i / k))
        interior = []
        for b in range(1, k):
            for c in range(1, k - b):
                interior.append((b / k, c / k))
        nodes.extend(interior)
        self.nodes = np.array(nodes)
        self.nloc = len(nodes)
        self.n_edge = k - 1
        self.n_interior = len(interior)
        self._exps = _monomial_exponents(k)
        vand = _monomial_matrix(self.nodes, self._exps)
        self._coeffs = np.linalg.inv(vand)

    def tabulate(self, points):
        return _monomial_matrix(np.atleast_2d(points), self._exps) @ self._coeffs

    def tabulate_grad(self, points):
        pts = np.atleast_2d(points)
        x = pts[:, 0][:, None]
        y = pts[:, 1][:, None]
        a = np.array([e[0] for e in self._exps])[None, :]
        b = np.array([e[1] for e in self._exps])[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0) * y ** b, 0.0)
            dy = np.where(b > 0, b * x ** a * y ** np.maximum(b - 1, 0), 0.0)
        out = np.empty((pts.shape[0], self.nloc, 2))
        out[:, :, 0] = dx @ self._coeffs
        out[:, :, 1] = dy @ self._coeffs
        return out

    def tabulate_hess(self, points):
        """Second derivatives, shape (npts, nloc, 2, 2)."""
        pts = np.atleast_2d(points)
        x = pts[:, 0][:, None]
        y = pts[:, 1][:, None]
        a = np.array([e[0] for e in self._exps])[None, :]
        b = np.array([e[1] for e in self._exps])[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            dxx = np.where(a > 1, a * (a - 1) * x ** np.maximum(a - 2, 0) * y ** b, 0.0)
            dyy = np.where(b > 1, b * (b - 1) * x ** a * y ** np.maximum(b - 2, 0), 0.0)
            dxy = np.where(
                (a > 0) & (b > 0),
                a * b * x ** np.maximum(a - 1, 0) * y ** np.maximum(b - 1, 0),
                0.0,
            )
        out = np.empty((pts.shape[0], self.nloc, 2, 2))
        out[:, :, 0, 0] = dxx @ self._coeffs
        out[:, :, 1, 1] = dyy @ self._coeffs
        out[:, :, 0, 1] = dxy @ self._coeffs
        out[:, :, 1, 0] = out[:, :, 0, 1]
        return out


@lru_cache(maxsize=None)
def reference_element(degree):
    return ReferenceElement(degree)


# ---------------------------------------------------------------------------
# function space


class FunctionSpace:
    """Continuous piecewise-polynomial space on a triangle mesh."""

    def __init__(self, mesh, degree, ncomp=1):
        self.mesh = mesh
        self.degree = int(degree)
        self.ncomp = int(ncomp)
        self.ref = reference_element(self.degree)
        k = self.degree
        nv = mesh.num_vertices
        nc = mesh.num_cells
        edges = mesh.edges()
        ne = edges.shape[0]
        npe = k - 1
        nint = self.ref.n_interior

        self.num_nodes = nv + ne * npe + nc * nint
        coords = np.empty((self.num_nodes, 2))
        coords[:nv] = mesh.vertices
        if npe > 0:
            t = (np.arange(1, k) / k)[None, :, None]
            lo = mesh.vertices[edges[:, 0]][:, None, :]
            hi = mesh.vertices[edges[:, 1]][:, None, :]
            coords[nv:nv + ne * npe] = ((1 - t) * lo + t * hi).reshape(-1, 2)

        cells = mesh.cells
        cell_nodes = np.empty((nc, self.ref.nloc), dtype=np.int64)
        cell_nodes[:, 0:3] = cells

        if npe > 0:
            codes = edges[:, 0] * nv + edges[:, 1]
            local_edges = [(0, 1), (1, 2), (0, 2)]
            for le, (la, lb) in enumerate(local_edges):
                ga, gb = cells[:, la], cells[:, lb]
                lo = np.minimum(ga, gb)
                hi = np.maximum(ga, gb)
                eidx = np.searchsorted(codes, lo * nv + hi)
                base = nv + eidx[:, None] * npe
                fwd = base + np.arange(npe)[None, :]
                rev = base + np.arange(npe - 1, -1, -1)[None, :]
                ascending = (ga < gb)[:, None]
                block = np.where(ascending, fwd, rev)
                cell_nodes[:, 3 + le * npe:3 + (le + 1) * npe] = block

        if nint > 0:
            base = nv + ne * npe
            ids = base + np.arange(nc)[:, None] * nint + np.arange(nint)[None, :]
            cell_nodes[:, 3 + 3 * npe:] = ids
            jac, _, _ = mesh.geometry()
            refs = self.ref.nodes[3 + 3 * npe:]
            phys = mesh.vertices[cells[:, 0]][:, None, :] + np.einsum(
                "cde,ie->cid", jac, refs)
            coords[base:] = phys.reshape(-1, 2)

        self.node_coords = coords
        self.cell_nodes = cell_nodes
        self.ndof = self.num_nodes * self.ncomp
        dofs = cell_nodes[:, :, None] * self.ncomp + np.arange(self.ncomp)[None, None, :]
        self.cell_dofs = dofs.reshape(nc, -1)
        self._tabs = {}
        self._facet_nodes_cache = {}

    # -- bookkeeping ------------------------------------------------------

    def new_field(self, values=None):
        vec = np.zeros(self.ndof) if values is None else np.asarray(values, dtype=np.float64).copy()
        if vec.shape != (self.ndof,):
            raise ValueError("field vector has wrong length")
        return Field(self, vec)

    def dof_at(self, node_ids, comp=0):
        return np.asarray(node_ids, dtype=np.int64) * self.ncomp + comp

    def tabulation(self, qdegree):
        tab = self._tabs.get(qdegree)
        if tab is None:
            tab = Tabulation(self, qdegree)
            self._tabs[qdegree] = tab
        return tab

    def default_qdegree(self, nonlinear=False):
        k = self.degree
        return 2 * k + 3 if nonlinear else 2 * k + 2

    # -- boundary node bookkeeping ---------------------------------------

    def facet_node_table(self, facet_ids):
        """(nf, degree+1) node ids per facet: both vertices plus the edge nodes."""
        key = tuple(np.asarray(facet_ids, dtype=np.int64).tolist())
        got = self._facet_nodes_cache.get(key)
        if got is not None:
            return got
        mesh = self.mesh
        k = self.degree
        nv = mesh.num_vertices
        edges = mesh.edges()
        codes = edges[:, 0] * nv + edges[:, 1]
        f = mesh.boundary_facets[np.asarray(facet_ids, dtype=np.int64)]
        lo = np.minimum(f[:, 0], f[:, 1])
        hi = np.maximum(f[:, 0], f[:, 1])
        eidx = np.searchsorted(codes, lo * nv + hi)
        out = np.empty((len(f), k + 1), dtype=np.int64)
        out[:, 0] = lo
        out[:, -1] = hi
        if k > 1:
            out[:, 1:-1] = nv + eidx[:, None] * (k - 1) + np.arange(k - 1)[None, :]
        self._facet_nodes_cache[key] = out
        return out

    def nodes_on_tags(self, tags):
        ids = []
        for tag in np.atleast_1d(tags):
            fids = self.mesh.facets_with_tag(tag)
            if len(fids):
                ids.append(self.facet_node_table(fids).ravel())
        if not ids:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(ids))

    def boundary_nodes(self):
        nf = self.mesh.num_facets
        return np.unique(self.facet_node_table(np.arange(nf)).ravel())


class Field:
    """Coefficient vector bound to a function space."""

    __slots__ = ("space", "vec")

    def __init__(self, space, vec):
        self.space = space
        self.vec = vec

    def copy(self):
        return Field(self.space, self.vec.copy())

    def nodal(self):
        """View shaped (num_nodes, ncomp) for vector spaces, (num_nodes,) for scalar."""
        if self.space.ncomp == 1:
            return self.vec
        return self.vec.reshape(self.space.num_nodes, self.space.ncomp)


# ---------------------------------------------------------------------------
# tabulation at quadrature points


class Tabulation:
    """Reference basis values and per-cell geometry at one quadrature rule."""

    def __init__(self, space, qdegree):
        self.space = space
        self.qdegree = qdegree
        self.qpts, self.qwts = triangle_rule(qdegree)
        self.phi = space.ref.tabulate(self.qpts)
        self.gradref = space.ref.tabulate_grad(self.qpts)
        self._phys_grads = None
        self._qpoints_phys = None
        jac, invjt, det = space.mesh.geometry()
        self.wdet = self.qwts[None, :] * det[:, None]

    def phys_grads(self):
        if self._phys_grads is None:
            _, invjt, _ = self.space.mesh.geometry()
            self._phys_grads = np.einsum("cde,qie->cqid", invjt, self.gradref)
        return self._phys_grads

    def qpoints_phys(self):
        if self._qpoints_phys is None:
            mesh = self.space.mesh
            jac, _, _ = mesh.geometry()
            v0 = mesh.vertices[mesh.cells[:, 0]]
            self._qpoints_phys = v0[:, None, :] + np.einsum("cde,qe->cqd", jac, self.qpts)
        return self._qpoints_phys

    def eval_scalar(self, vec):
        co = vec[self.space.cell_nodes]
        return np.einsum("ci,qi->cq", co, self.phi)

    def eval_vector(self, vec):
        co = vec.reshape(self.space.num_nodes, self.space.ncomp)[self.space.cell_nodes]
        return np.einsum("cid,qi->cqd", co, self.phi)

    def eval_grad_scalar(self, vec):
        co = vec[self.space.cell_nodes]
        return np.einsum("cqid,ci->cqd", self.phys_grads(), co)

    def eval_grad_vector(self, vec):
        co = vec.reshape(self.space.num_nodes, self.space.ncomp)[self.space.cell_nodes]
        return np.einsum("cqid,cie->cqde", self.phys_grads(), co)


# ---------------------------------------------------------------------------
# sparse assembly


class MatrixPattern:
    """Precomputed scatter map from per-cell dense blocks to global CSR data."""

    def __init__(self, test_space, trial_space):
        rows = np.repeat(test_space.cell_dofs[:, :, None], trial_space.cell_dofs.shape[1], axis=2)
        cols = np.repeat(trial_space.cell_dofs[:, None, :], test_space.cell_dofs.shape[1], axis=1)
        self.shape = (test_space.ndof, trial_space.ndof)
        keys = rows.astype(np.int64).ravel() * self.shape[1] + cols.ravel()
        uniq, slot = np.unique(keys, return_inverse=True)
        self.slot = slot
        self.nnz = len(uniq)
        self.indices = (uniq % self.shape[1]).astype(np.int32)
        rows_u = (uniq // self.shape[1]).astype(np.int64)
        self.indptr = np.zeros(self.shape[0] + 1, dtype=np.int32)
        np.add.at(self.indptr, rows_u + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        self.block_shape = (test_space.cell_dofs.shape[1], trial_space.cell_dofs.shape[1])

    def assemble(self, cell_blocks):
        data = np.bincount(self.slot, weights=cell_blocks.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


def load_vector(space, tab, values_q):
    """Assemble (f, v) for all test functions; values_q is (nc, nq[, ncomp])."""
    wdet = tab.wdet
    if space.ncomp == 1:
        cell = np.einsum("cq,qi->ci", values_q * wdet, tab.phi)
        out = np.zeros(space.ndof)
        np.add.at(out, space.cell_nodes.ravel(), cell.ravel())
        return out
    cell = np.einsum("cqd,qi->cid", values_q * wdet[:, :, None], tab.phi)
    out = np.zeros(space.ndof)
    np.add.at(out, space.cell_dofs.ravel(), cell.reshape(space.mesh.num_cells, -1).ravel())
    return out


def mass_matrix(space, qdegree=None, coeff_q=None, pattern=None):
    """(c u, v); scalar coefficient applies to every component."""
    tab = space.tabulation(qdegree or space.default_qdegree())
    w = tab.wdet if coeff_q is None else tab.wdet * coeff_q
    blocks = np.einsum("cq,qi,qj->cij", w, tab.phi, tab.phi)
    pattern = pattern or MatrixPattern(space, space)
    if space.ncomp == 1:
        return pattern.assemble(blocks)
    return pattern.assemble(_expand_identity_blocks(blocks, space.ncomp))


def _expand_identity_blocks(blocks, ncomp):
    nc, ni, nj = blocks.shape
    out = np.zeros((nc, ni, ncomp, nj, ncomp))
    for d in range(ncomp):
        out[:, :, d, :, d] = blocks
    return out.reshape(nc, ni * ncomp, nj * ncomp)


def stiffness_matrix(space, qdegree=None, tensor_q=None, coeff_q=None, pattern=None):
    """(c grad u, grad v) or, with tensor_q (nc, nq, 2), sum_d t_d du/dx_d dv/dx_d."""
    tab = space.tabulation(qdegree or space.default_qdegree())
    g = tab.phys_grads()
    if tensor_q is not None:
        w = tab.wdet[:, :, None] * tensor_q
        blocks = np.einsum("cqd,cqid,cqjd->cij", w, g, g)
    else:
        w = tab.wdet if coeff_q is None else tab.wdet * coeff_q
        blocks = np.einsum("cq,cqid,cqjd->cij", w, g, g)
    pattern = pattern or MatrixPattern(space, space)
    if space.ncomp == 1:
        return pattern.assemble(blocks)
    return pattern.assemble(_expand_identity_blocks(blocks, space.ncomp))


def apply_dirichlet(A, b, dofs, values):
    """Symmetric elimination: unit rows/columns at `dofs`, column action moved to b."""
    dofs = np.asarray(dofs, dtype=np.int64)
    if len(dofs) == 0:
        return A.tocsr(), b
    n = A.shape[0]
    full = np.zeros(n)
    full[dofs] = values
    b = b - A @ full
    A = A.tocsr().copy()
    bc = np.zeros(n, dtype=bool)
    bc[dofs] = True
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    kill = bc[rows] | bc[A.indices]
    A.data[kill] = 0.0
    A = A + sp.diags(bc.astype(np.float64))
    b[dofs] = values
    return A.tocsr(), b


# ---------------------------------------------------------------------------
# interpolation, evaluation, norms


def interpolate(space, fn):
    """Nodal interpolant of a callable fn(x, y) -> scalar or (..., ncomp)."""
    x = space.node_coords[:, 0]
    y = space.node_coords[:, 1]
    vals = np.asarray(fn(x, y), dtype=np.float64)
    if space.ncomp == 1:
        if vals.shape != x.shape:
            vals = np.broadcast_to(vals, x.shape).copy()
        return Field(space, vals.astype(np.float64).copy())
    if vals.shape == (space.ncomp,):
        vals = np.broadcast_to(vals, (len(x), space.ncomp))
    if vals.shape != (len(x), space.ncomp):
        raise ValueError(f"interpolant shape {vals.shape} does not match space")
    return Field(space, np.ascontiguousarray(vals, dtype=np.float64).reshape(-1))


class CellLocator:
    """Uniform background grid over cell bounding boxes for point location."""

    def __init__(self, mesh, target_per_bin=4):
        self.mesh = mesh
        v = mesh.vertices
        self.lo = v.min(axis=0)
        self.hi = v.max(axis=0)
        n = max(int(np.sqrt(mesh.num_cells / target_per_bin)), 1)
        self.nbin = (n, n)
        span = np.maximum(self.hi - self.lo, 1e-300)
        self.inv = np.array([self.nbin[0] / span[0], self.nbin[1] / span[1]])
        tri = v[mesh.cells]
        lo_ix = self._clip(((tri.min(axis=1) - self.lo) * self.inv).astype(int))
        hi_ix = self._clip(((tri.max(axis=1) - self.lo) * self.inv).astype(int))
        self.bins = {}
        for c in range(mesh.num_cells):
            for ix in range(lo_ix[c, 0], hi_ix[c, 0] + 1):
                for iy in range(lo_ix[c, 1], hi_ix[c, 1] + 1):
                    self.bins.setdefault((ix, iy), []).append(c)

    def _clip(self, ix):
        return np.clip(ix, [0, 0], [self.nbin[0] - 1, self.nbin[1] - 1])

    def candidates(self, point):
        ix = self._clip(((np.asarray(point) - self.lo) * self.inv).astype(int)[None, :])[0]
        return self.bins.get((ix[0], ix[1]), [])


def _locator(mesh):
    if mesh._locator is None:
        mesh._locator = CellLocator(mesh)
    return mesh._locator


def locate_points(mesh, points, tol=1e-10):
    """Return (cell index, reference coords) per point; -1 rows for misses."""
    points = np.atleast_2d(points)
    loc = _locator(mesh)
    jac, invjt, _ = mesh.geometry()
    v0 = mesh.vertices[mesh.cells[:, 0]]
    scale = max(loc.hi[0] - loc.lo[0], loc.hi[1] - loc.lo[1])
    out_cells = np.full(len(points), -1, dtype=np.int64)
    out_ref = np.zeros((len(points), 2))
    for p, pt in enumerate(points):
        best = None
        for c in loc.candidates(pt):
            d = pt - v0[c]
            # invjt is J^{-T}; J^{-1} d = invjt^T d
            xi = invjt[c].T @ d
            lam = min(xi[0], xi[1], 1.0 - xi[0] - xi[1])
            if lam >= -tol:
                best = (c, xi)
                if lam >= 0.0:
                    break
        if best is not None:
            out_cells[p] = best[0]
            out_ref[p] = best[1]
    return out_cells, out_ref


def point_evaluate(field, points):
    """Evaluate at arbitrary points; raises OutOfDomainError if any point misses."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    space = field.space
    cells, refs = locate_points(space.mesh, points)
    if np.any(cells < 0):
        bad = np.nonzero(cells < 0)[0]
        raise OutOfDomainError(f"{len(bad)} point(s) outside the mesh, first index {bad[0]}")
    phi = space.ref.tabulate(refs)  # (npts, nloc)
    conn = space.cell_nodes[cells]
    if space.ncomp == 1:
        return np.einsum("pi,pi->p", phi, field.vec[conn])
    co = field.vec.reshape(space.num_nodes, space.ncomp)[conn]
    return np.einsum("pi,pid->pd", phi, co)


def nearest_inside(mesh, points, pull=1e-9):
    """Project points onto the mesh: clamp to the nearest cell, nudged inward.

    Returns (projected points, number of points that needed projection).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cells, refs = locate_points(mesh, points)
    miss = np.nonzero(cells < 0)[0]
    if len(miss) == 0:
        return points, 0
    cent = mesh.vertices[mesh.cells].mean(axis=1)
    jac, _, _ = mesh.geometry()
    v0 = mesh.vertices[mesh.cells[:, 0]]
    out = points.copy()
    for p in miss:
        c = int(np.argmin(np.einsum("cd,cd->c", cent - points[p], cent - points[p])))
        # clamp barycentric coordinates onto the simplex
        d = points[p] - v0[c]
        invjt = mesh.geometry()[1]
        xi = invjt[c].T @ d
        lam = np.array([1.0 - xi[0] - xi[1], xi[0], xi[1]])
        lam = np.clip(lam, 0.0, None)
        s = lam.sum()
        lam = lam / s if s > 0 else np.full(3, 1 / 3)
        lam = (1.0 - pull) * lam + pull / 3.0
        out[p] = lam[0] * v0[c] + lam[1] * (v0[c] + jac[c][:, 0]) + lam[2] * (v0[c] + jac[c][:, 1])
    return out, len(miss)


def error_norms(field, exact, qdegree=None, normalized=False):
    """L1, L2, Linf of field - exact; vector fields use the pointwise 2-norm.

    Linf is taken over quadrature points and nodes.  With normalized=True each
    norm is divided by the matching norm of `exact`.
    """
    space = field.space
    tab = space.tabulation(qdegree or space.default_qdegree(nonlinear=True))
    pts = tab.qpoints_phys()
    x, y = pts[..., 0], pts[..., 1]
    if space.ncomp == 1:
        fh = tab.eval_scalar(field.vec)
        fe = np.asarray(exact(x, y), dtype=np.float64)
        fe = np.broadcast_to(fe, fh.shape)
        diff = np.abs(fh - fe)
        mag = np.abs(fe)
        nx, ny = space.node_coords[:, 0], space.node_coords[:, 1]
        node_diff = np.abs(field.vec - np.broadcast_to(np.asarray(exact(nx, ny), dtype=np.float64), field.vec.shape))
        node_mag = np.abs(np.broadcast_to(np.asarray(exact(nx, ny), dtype=np.float64), field.vec.shape))
    else:
        fh = tab.eval_vector(field.vec)
        fe = np.asarray(exact(x, y), dtype=np.float64)
        fe = np.broadcast_to(fe, fh.shape)
        diff = np.linalg.norm(fh - fe, axis=-1)
        mag = np.linalg.norm(fe, axis=-1)
        nx, ny = space.node_coords[:, 0], space.node_coords[:, 1]
        fen = np.asarray(exact(nx, ny), dtype=np.float64)
        fen = np.broadcast_to(fen, (space.num_nodes, space.ncomp))
        fhn = field.vec.reshape(space.num_nodes, space.ncomp)
        node_diff = np.linalg.norm(fhn - fen, axis=-1)
        node_mag = np.linalg.norm(fen, axis=-1)
    w = tab.wdet
    out = {
        "L1": float(np.sum(w * diff)),
        "L2": float(np.sqrt(np.sum(w * diff ** 2))),
        "Linf": float(max(diff.max(initial=0.0), node_diff.max(initial=0.0))),
    }
    if normalized:
        ref = {
            "L1": float(np.sum(w * mag)),
            "L2": float(np.sqrt(np.sum(w * mag ** 2))),
            "Linf": float(max(mag.max(initial=0.0), node_mag.max(initial=0.0))),
        }
        for k in out:
            out[k] = out[k] / ref[k] if ref[k] > 0 else out[k]
    return out


# ---------------------------------------------------------------------------
# weighted / smoothed projections


def project_qdata(space, f_q, weight_q=None, smooth_q=None, qdegree=None,
                  regularize=0.0, solver=None):
    """Solve (w p, v) + (s grad p, grad v) = (w f, v) over a scalar space.

    f_q, weight_q, smooth_q are values at the quadrature points of the rule,
    shaped (nc, nq).  A weight that vanishes identically yields a zero field
    with ok=False.  `regularize` adds that fraction of max(weight) to keep the
    weighted mass invertible where the weight has dead regions.

    Returns (Field, ok).
    """
    if space.ncomp != 1:
        raise ValueError("project_qdata expects a scalar space")
    qdeg = qdegree or space.default_qdegree()
    tab = space.tabulation(qdeg)
    if weight_q is None:
        w = np.ones_like(tab.wdet)
    else:
        w = np.asarray(weight_q, dtype=np.float64)
        wmax = w.max(initial=0.0)
        if wmax <= 0.0:
            return space.new_field(), False
        if regularize > 0.0:
            w = w + regularize * wmax
    A = mass_matrix(space, qdegree=qdeg, coeff_q=w)
    if smooth_q is not None:
        A = A + stiffness_matrix(space, qdegree=qdeg, coeff_q=smooth_q)
    rhs = load_vector(space, tab, w * f_q)
    if solver is None:
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError:
            return space.new_field(), False
        x = lu.solve(rhs)
    else:
        x = solver(A, rhs)
    return Field(space, x), True


def cellwise_to_q(tab, cell_values):
    return np.broadcast_to(np.asarray(cell_values, dtype=np.float64)[:, None],
                           tab.wdet.shape)


def compute_nodal_mesh_size(mesh, space, c_delta=10.0):
    """Smoothed nodal mesh-size field h solving
    (h, w) + c_delta (|K| grad h, grad w) = (|K|^{1/2} / k, w).
    """
    areas = mesh.cell_areas()
    k = space.degree
    tab = space.tabulation(space.default_qdegree())
    f_q = cellwise_to_q(tab, np.sqrt(areas) / k)
    s_q = cellwise_to_q(tab, c_delta * areas)
    field, ok = project_qdata(space, f_q, smooth_q=s_q)
    if not ok:
        raise RuntimeError("mesh size projection failed")
    return field


def boundary_normals(space, tag):
    """Length-weighted outward unit normals at the nodes of tagged facets.

    Returns (node ids, normals, ok mask); ok=False where the average normal
    came out with negligible length.
    """
    mesh = space.mesh
    fids = mesh.facets_with_tag(tag)
    table = space.facet_node_table(fids)
    nrm = mesh.facet_normals()[fids]
    ln = mesh.facet_lengths()[fids]
    nodes = np.unique(table.ravel())
    index = {int(n): i for i, n in enumerate(nodes)}
    acc = np.zeros((len(nodes), 2))
    for f in range(len(fids)):
        for n in table[f]:
            acc[index[int(n)]] += ln[f] * nrm[f]
    mag = np.hypot(acc[:, 0], acc[:, 1])
    ok = mag > 1e-12 * max(ln.max(initial=1.0), 1e-300)
    out = np.zeros_like(acc)
    out[ok] = acc[ok] / mag[ok, None]
    return nodes, out, ok


# ---------------------------------------------------------------------------
# boundary facet integration


class FacetTabulation:
    """Basis values and geometry on a set of boundary facets."""

    def __init__(self, space, facet_ids, qdegree):
        mesh = space.mesh
        self.space = space
        self.facet_ids = np.asarray(facet_ids, dtype=np.int64)
        self.qdegree = qdegree
        t, w = interval_rule(qdegree)
        self.qt, self.qw = t, w
        owner = mesh.facet_owner()[self.facet_ids]
        self.cells = owner[:, 0]
        local_edge = owner[:, 1]
        facets = mesh.boundary_facets[self.facet_ids]
        cellverts = mesh.cells[self.cells]
        local_pairs = np.array([(0, 1), (1, 2), (0, 2)])
        la = local_pairs[local_edge, 0]
        lb = local_pairs[local_edge, 1]
        ga = cellverts[np.arange(len(self.cells)), la]
        # facet stored order (a, b); flip reference direction when owner edge
        # starts at the other end
        flip = ga != facets[:, 0]

        # reference coordinates along each local edge at parameter t
        def edge_ref(le, tt):
            if le == 0:
                return np.column_stack([tt, np.zeros_like(tt)])
            if le == 1:
                return np.column_stack([1.0 - tt, tt])
            return np.column_stack([np.zeros_like(tt), tt])

        nq = len(t)
        nloc = space.ref.nloc
        self.phi = np.empty((len(self.facet_ids), nq, nloc))
        refc = np.empty((len(self.facet_ids), nq, 2))
        for le in range(3):
            for fl in (False, True):
                sel = np.nonzero((local_edge == le) & (flip == fl))[0]
                if len(sel) == 0:
                    continue
                tt = 1.0 - t if fl else t
                rc = edge_ref(le, tt)
                self.phi[sel] = space.ref.tabulate(rc)[None, :, :]
                refc[sel] = rc[None, :, :]
        p0 = mesh.vertices[facets[:, 0]]
        p1 = mesh.vertices[facets[:, 1]]
        self.points = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
        self.lengths = np.hypot(*(p1 - p0).T)
        self.normals = mesh.facet_normals()[self.facet_ids]
        self.wlen = w[None, :] * self.lengths[:, None]
        self.cell_dofs = space.cell_dofs[self.cells]
        self.cell_nodes = space.cell_nodes[self.cells]

    def eval_scalar(self, vec):
        co = vec[self.cell_nodes]
        return np.einsum("fi,fqi->fq", co, self.phi)

    def eval_vector(self, vec):
        co = vec.reshape(self.space.num_nodes, self.space.ncomp)[self.cell_nodes]
        return np.einsum("fid,fqi->fqd", co, self.phi)

    def load(self, values_q):
        """Assemble (f, v) over the facets; values_q (nf, nq[, ncomp])."""
        space = self.space
        out = np.zeros(space.ndof)
        if space.ncomp == 1:
            cell = np.einsum("fq,fqi->fi", values_q * self.wlen, self.phi)
            np.add.at(out, self.cell_nodes.ravel(), cell.ravel())
        else:
            cell = np.einsum("fqd,fqi->fid", values_q * self.wlen[:, :, None], self.phi)
            np.add.at(out, self.cell_dofs.ravel(), cell.reshape(len(self.cells), -1).ravel())
        return out

    def integrate(self, values_q):
        return float(np.sum(values_q * self.wlen))
