"""Sparse linear solvers for the coupled flow and tracer systems.

Two access patterns are supported.  A :class:`DirectSolver` factorizes the
matrix it is given and reuses the factorization until the caller hands it a
new matrix; this is the cheapest option when the system matrix is constant
across time steps.  A :class:`PreconditionedKrylov` keeps an LU factorization
of a reference matrix and uses it as a preconditioner for GMRES on the
current matrix, refreshing the factorization only when convergence degrades;
this suits runs where the matrix drifts slowly from step to step.

Both produce bitwise-reproducible results for identical inputs: SuperLU with
a fixed column ordering and unpreconditioned arithmetic have no run-to-run
nondeterminism in a fixed-thread configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised when a linear solve fails or produces non-finite values."""


def check_finite(vec, blocks=None, context=""):
    """Raise :class:`SolverError` if ``vec`` contains NaN or Inf.

    ``blocks`` is an optional list of ``(name, start, stop)`` triples used to
    report which unknown block the bad entries fall in, which is far more
    useful than a bare row index when debugging a coupled system.
    """
    bad = ~np.isfinite(vec)
    if not bad.any():
        return
    idx = np.flatnonzero(bad)
    where = f"rows {idx[0]}..{idx[-1]} ({idx.size} entries)"
    if blocks:
        names = []
        for name, start, stop in blocks:
            if ((idx >= start) & (idx < stop)).any():
                names.append(name)
        if names:
            where = f"block(s) {', '.join(names)}; " + where
    prefix = f"{context}: " if context else ""
    raise SolverError(f"{prefix}non-finite solution values in {where}")


def append_constraint(matrix, constraint, rhs_value=0.0):
    """Border a square system with one Lagrange-multiplier row and column.

    Returns the ``(n+1, n+1)`` CSR matrix ``[[A, c], [c^T, 0]]``.  Used to pin
    the mean of a field whose equation only determines it up to a constant.
    """
    c = np.asarray(constraint, dtype=float).reshape(-1, 1)
    col = sp.csr_matrix(c)
    row = sp.csr_matrix(c.T)
    corner = sp.csr_matrix((1, 1))
    return sp.bmat([[matrix, col], [row, corner]], format="csr")


def _factorize(matrix):
    csc = sp.csc_matrix(matrix)
    csc.sum_duplicates()
    try:
        return spla.splu(csc, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"LU factorization failed: {exc}") from exc


class DirectSolver:
    """Sparse LU solve with factorization reuse.

    ``update`` installs a new matrix and invalidates the factorization; the
    factorization itself happens lazily on the first ``solve`` so callers can
    update unconditionally without paying for unused factorizations.
    """

    def __init__(self):
        self._matrix = None
        self._lu = None
        self.factor_count = 0

    def update(self, matrix):
        self._matrix = matrix
        self._lu = None

    def solve(self, rhs, blocks=None, context=""):
        if self._matrix is None:
            raise SolverError("solve called before update")
        if self._lu is None:
            self._lu = _factorize(self._matrix)
            self.factor_count += 1
        x = self._lu.solve(np.asarray(rhs, dtype=float))
        check_finite(x, blocks=blocks, context=context)
        return x


@dataclass
class KrylovSettings:
    """Tuning knobs for the preconditioned GMRES path."""

    rtol: float = 1e-11
    atol: float = 0.0
    restart: int = 40
    max_outer: int = 5
    # refresh the preconditioner when an accepted solve needed this many
    # inner iterations, so the next steps converge quickly again
    refresh_iters: int = 60


class PreconditionedKrylov:
    """GMRES on the current matrix, preconditioned by a frozen LU.

    The LU factorization of some earlier matrix serves as preconditioner
    while the matrix drifts; when GMRES needs too many iterations or fails
    to converge the factorization is refreshed at the current matrix and the
    solve is completed exactly with it.
    """

    def __init__(self, settings=None):
        self.settings = settings or KrylovSettings()
        self._matrix = None
        self._lu = None
        self.factor_count = 0
        self.last_iters = 0

    def update(self, matrix):
        self._matrix = matrix

    def _refresh(self):
        self._lu = _factorize(self._matrix)
        self.factor_count += 1

    def solve(self, rhs, blocks=None, context=""):
        if self._matrix is None:
            raise SolverError("solve called before update")
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is None:
            self._refresh()
            x = self._lu.solve(rhs)
            check_finite(x, blocks=blocks, context=context)
            self.last_iters = 0
            return x
        st = self.settings
        n = rhs.size
        prec = spla.LinearOperator((n, n), matvec=self._lu.solve)
        counter = {"iters": 0}

        def cb(_pr_norm):
            counter["iters"] += 1

        x, info = spla.gmres(
            self._matrix,
            rhs,
            M=prec,
            rtol=st.rtol,
            atol=st.atol,
            restart=st.restart,
            maxiter=st.max_outer,
            callback=cb,
            callback_type="pr_norm",
        )
        self.last_iters = counter["iters"]
        if info != 0 or counter["iters"] >= st.refresh_iters:
            # convergence degraded: refactor at the current matrix, which
            # makes the preconditioned solve exact
            self._refresh()
            x = self._lu.solve(rhs)
            self.last_iters = 0
        check_finite(x, blocks=blocks, context=context)
        return x


def make_solver(kind, settings=None):
    if kind == "direct":
        return DirectSolver()
    if kind == "krylov":
        return PreconditionedKrylov(settings)
    raise ValueError(f"unknown solver kind {kind!r}")
