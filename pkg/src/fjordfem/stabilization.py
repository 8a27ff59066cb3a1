"""Residual-driven artificial viscosity and high-order dissipation fields.

The transport operators are stabilized by a blend of two mechanisms.  A
first-order tensor viscosity, active where a nodal discontinuity indicator
flags the solution as underresolved, scales like h|u_i| per direction.  A
complementary high-order term penalizes the distance between the discrete
gradient and its weighted L2 projection onto the solution space, which
vanishes on resolved scales; its weight takes over where the indicator is
small.  The indicator itself is built from nodal PDE residuals, normalized
so it lives in [0, 1], then smoothed by an elliptic projection.

Everything here produces nodal fields on the scalar tracer space; the
assembly layer evaluates them at quadrature points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .fem import (
    Field,
    load_vector,
    mass_matrix,
    project_qdata,
    reference_element,
    stiffness_matrix,
)


@dataclass
class StabilizationConfig:
    """Tuning constants for the residual-viscosity machinery."""

    c_max: float = 1.0
    c_max_vms: float = 0.05
    c_delta: float = 10.0
    c_flat: float = 0.1
    eps_norm: float = 1e-5
    f_rv: str = "quadratic:15"
    # regularization fraction for weighted projections with dead regions
    regularize: float = 1e-10


def activation_function(spec):
    """Parse an activation spec like 'quadratic:15' or 'linear:2'."""
    name, _, amp = spec.partition(":")
    a = float(amp) if amp else 1.0
    if name == "quadratic":
        return lambda r: a * r * r
    if name == "linear":
        return lambda r: a * r
    raise ValueError(f"unknown activation {spec!r}")


class RunningMax:
    """Running maximum-in-time accumulator, keyed per monitored field."""

    def __init__(self):
        self.values = {}

    def update(self, key, value):
        new = max(float(value), self.values.get(key, 0.0))
        self.values[key] = new
        return new


def glob_normalization(w_nodes, key, run, eps):
    """Oscillation-based global normalization with a running-in-time floor."""
    w = np.asarray(w_nodes, dtype=float)
    osc = float(w.max() - w.min()) if w.size else 0.0
    run_linf = run.update(key, np.abs(w).max(initial=0.0))
    denom = osc + eps * run_linf
    return osc * osc / denom if denom > 0.0 else 0.0


class NodalSampler:
    """Cell-averaged field and derivative values at a scalar space's nodes.

    Derivatives of continuous finite element fields jump between cells;
    values at a node are taken as the arithmetic average over the cells
    meeting there.  Plain values are continuous, so the average is exact.
    """

    def __init__(self, space):
        if space.ncomp != 1:
            raise ValueError("NodalSampler targets a scalar space")
        self.space = space
        self.mesh = space.mesh
        self.points = reference_element(space.degree).nodes
        self.cells = space.cell_nodes
        nn = space.num_nodes
        counts = np.bincount(self.cells.ravel(), minlength=nn).astype(float)
        self._inv_counts = 1.0 / counts
        self._tabs = {}

    def _tab(self, degree):
        got = self._tabs.get(degree)
        if got is None:
            ref = reference_element(degree)
            got = (
                ref.tabulate(self.points),
                ref.tabulate_grad(self.points),
                ref.tabulate_hess(self.points),
            )
            self._tabs[degree] = got
        return got

    def _average(self, per_cell):
        # per_cell: (nc, nloc_target, ...)
        out_shape = (self.space.num_nodes,) + per_cell.shape[2:]
        out = np.zeros(out_shape)
        np.add.at(out, self.cells.ravel(), per_cell.reshape((-1,) + per_cell.shape[2:]))
        w = self._inv_counts.reshape((-1,) + (1,) * (out.ndim - 1))
        return out * w

    def _coefs(self, fld):
        sp = fld.space
        if sp.ncomp == 1:
            return [fld.vec[sp.cell_nodes]]
        return [fld.vec[sp.cell_nodes * sp.ncomp + c] for c in range(sp.ncomp)]

    def values(self, fld):
        phi, _, _ = self._tab(fld.space.degree)
        comps = [np.einsum("ji,ci->cj", phi, co) for co in self._coefs(fld)]
        out = [self._average(c) for c in comps]
        return out[0] if len(out) == 1 else np.stack(out, axis=-1)

    def gradients(self, fld):
        """Scalar: (nn, 2).  Vector: (nn, 2, 2) with [d, e] = d_d u_e."""
        _, gref, _ = self._tab(fld.space.degree)
        _, invjt, _ = self.mesh.geometry()
        comps = []
        for co in self._coefs(fld):
            ref_grad = np.einsum("jie,ci->cje", gref, co)
            comps.append(self._average(np.einsum("cde,cje->cjd", invjt, ref_grad)))
        return comps[0] if len(comps) == 1 else np.stack(comps, axis=-1)

    def hessians(self, fld):
        """Scalar: (nn, 2, 2).  Vector: (nn, 2, 2, 2) with [a, b, e] = d_a d_b u_e."""
        _, _, href = self._tab(fld.space.degree)
        _, invjt, _ = self.mesh.geometry()
        comps = []
        for co in self._coefs(fld):
            ref_h = np.einsum("jipq,ci->cjpq", href, co)
            phys = np.einsum("cap,cbq,cjpq->cjab", invjt, invjt, ref_h)
            comps.append(self._average(phys))
        return comps[0] if len(comps) == 1 else np.stack(comps, axis=-1)


class IndicatorSmoother:
    """Elliptic smoothing of nodal indicator ratios over the tracer space.

    Solves (s, w) + c_delta (h^2 grad s, grad w) = (f, w); the system matrix
    depends only on the mesh-size field, so its factorization is cached for
    the lifetime of a run.
    """

    def __init__(self, space, h_field, c_delta, qdegree=None):
        qdeg = qdegree or space.default_qdegree()
        tab = space.tabulation(qdeg)
        h_q = tab.eval_scalar(h_field.vec)
        self.space = space
        self.mass = mass_matrix(space, qdegree=qdeg)
        stiff = stiffness_matrix(space, qdegree=qdeg, coeff_q=c_delta * h_q * h_q)
        self._lu = spla.splu((self.mass + stiff).tocsc())

    def apply(self, nodal_values, clip=True):
        raw = self._lu.solve(self.mass @ np.asarray(nodal_values, dtype=float))
        if clip:
            raw = np.minimum(1.0, np.abs(raw))
        return Field(self.space, raw)


def _safe_ratio(num, den):
    out = np.zeros_like(num)
    ok = den > 0.0
    out[ok] = num[ok] / den[ok]
    return np.minimum(out, 1.0)


def tracer_indicator_ratio(
    sampler, phi, u, dphi_dt_nodes, kappa, h_nodes, cfg, run, key,
    zeta_nodes=None, phi_res_nodes=None,
):
    """Normalized nodal residual of a tracer transport equation, in [0, 1].

    ``dphi_dt_nodes`` is the discrete time derivative of the tracer at the
    nodes (a combination of history levels).  ``zeta_nodes``/``phi_res_nodes``
    carry the restoring source when the scenario has one.
    """
    grad = sampler.gradients(phi)
    lap = np.trace(sampler.hessians(phi), axis1=1, axis2=2)
    uv = sampler.values(u)
    speed = np.linalg.norm(uv, axis=1)
    grad_norm = np.linalg.norm(grad, axis=1)
    conv = np.einsum("nd,nd->n", uv, grad)
    diff = kappa * lap
    if zeta_nodes is None:
        restore = np.zeros_like(conv)
    else:
        restore = zeta_nodes * (phi_res_nodes - sampler.values(phi))
    resid = np.abs(dphi_dt_nodes + conv - diff - restore)
    n_loc = np.abs(dphi_dt_nodes) + speed * grad_norm + np.abs(diff) + np.abs(restore)
    w = sampler.values(phi) * speed
    n_glob = glob_normalization(w, key, run, cfg.eps_norm)
    flat = h_nodes * grad_norm > cfg.c_flat
    norm = np.where(flat, n_loc, np.maximum(n_glob / h_nodes, n_loc))
    return _safe_ratio(resid, norm)


def momentum_indicator_ratio(
    sampler, u, p, du_dt_nodes, nu, h_nodes, cfg, run, key,
    delta_rho_nodes=None, grad_delta_rho=None, g_over_rho0=0.0, y_nodes=None,
):
    """Normalized nodal residual of the momentum equation, in [0, 1].

    The gravity and potential-energy-correction contributions enter when
    ``delta_rho_nodes`` (with its nodal gradient) is given.
    """
    uv = sampler.values(u)
    grad = sampler.gradients(u)  # [d, e] = d_d u_e
    speed = np.linalg.norm(uv, axis=1)
    grad_norm = np.linalg.norm(grad, axis=(1, 2))
    adv = np.einsum("nd,nde->ne", uv, grad)
    rot = np.einsum("ne,nde->nd", uv, grad)
    grad_p = sampler.gradients(p)
    hess = sampler.hessians(u)  # [a, b, e] = d_a d_b u_e
    # div of the symmetric gradient: lap(u_e) + d_e(div u)
    lap_u = np.einsum("naae->ne", hess)
    grad_div = np.einsum("nedd->ne", hess)
    visc = nu * (lap_u + grad_div)

    resid_vec = du_dt_nodes + adv + rot + grad_p - visc
    n_loc = (
        np.linalg.norm(du_dt_nodes, axis=1)
        + 2.0 * speed * grad_norm
        + np.linalg.norm(grad_p, axis=1)
        + np.linalg.norm(visc, axis=1)
    )
    if delta_rho_nodes is not None:
        grav = np.zeros_like(resid_vec)
        grav[:, 1] = g_over_rho0 * delta_rho_nodes
        corr = 0.5 * g_over_rho0 * (
            y_nodes[:, None] * grad_delta_rho + np.stack(
                [np.zeros_like(delta_rho_nodes), delta_rho_nodes], axis=1
            )
        )
        resid_vec = resid_vec + grav - corr
        n_loc = n_loc + np.linalg.norm(grav, axis=1) + np.linalg.norm(corr, axis=1)
    resid = np.linalg.norm(resid_vec, axis=1)
    n_glob = glob_normalization(speed * speed, key, run, cfg.eps_norm)
    flat = h_nodes * grad_norm > cfg.c_flat
    norm = np.where(flat, n_loc, np.maximum(n_glob / h_nodes, n_loc))
    return _safe_ratio(resid, norm)


@dataclass
class ViscosityFields:
    """Nodal stabilization coefficients on the tracer space.

    Per-direction arrays have shape (n_nodes, 2); gamma is (n_nodes,).
    """

    nu_h: np.ndarray
    nu_vms: np.ndarray
    kappa_t: np.ndarray
    kappa_t_vms: np.ndarray
    kappa_s: np.ndarray
    kappa_s_vms: np.ndarray
    gamma: np.ndarray

    @classmethod
    def zero(cls, n):
        z2 = np.zeros((n, 2))
        return cls(
            nu_h=z2, nu_vms=z2.copy(), kappa_t=z2.copy(), kappa_t_vms=z2.copy(),
            kappa_s=z2.copy(), kappa_s_vms=z2.copy(), gamma=np.zeros(n),
        )


def viscosity_fields(u_nodes, h_nodes, sigma_u, sigma_t, sigma_s, cfg):
    """Blend first-order and high-order coefficients from the indicators.

    Per direction i the first-order part is sigma c_max h |u_i| and the
    high-order weight the complementary (1 - sigma) c_max_vms h |u_i|; the
    divergence penalty scales with the full speed and ignores the indicator.
    """
    au = np.abs(np.asarray(u_nodes, dtype=float))
    h = np.asarray(h_nodes, dtype=float)[:, None]
    base = h * au
    speed = np.linalg.norm(u_nodes, axis=1)

    def blend(sigma):
        s = np.asarray(sigma, dtype=float)[:, None]
        return cfg.c_max * s * base, cfg.c_max_vms * (1.0 - s) * base

    nu_h, nu_vms = blend(sigma_u)
    kap_t, kap_t_vms = blend(sigma_t)
    kap_s, kap_s_vms = blend(sigma_s)
    return ViscosityFields(
        nu_h=nu_h, nu_vms=nu_vms, kappa_t=kap_t, kappa_t_vms=kap_t_vms,
        kappa_s=kap_s, kappa_s_vms=kap_s_vms,
        gamma=cfg.c_max * np.asarray(h_nodes, dtype=float) * speed,
    )


def project_gradient_tracer(space, grad_q, weight_q, regularize, solvers=None):
    """Weighted componentwise L2 projection of a tracer gradient.

    grad_q: (nc, nq, 2) gradient values; weight_q: (nc, nq, 2) per-direction
    weights.  Returns a list of two scalar Fields (the projected gradient
    components); a direction whose weight vanishes identically projects to
    zero, which drops the high-order term there exactly as intended.
    """
    out = []
    for d in range(2):
        solver = None if solvers is None else solvers[d]
        f, _ok = project_qdata(
            space, grad_q[:, :, d], weight_q=weight_q[:, :, d],
            regularize=regularize, solver=solver,
        )
        out.append(f)
    return out


def project_gradient_velocity(scalar_space, grad_q, weight_q, regularize, solvers=None):
    """Two-sided weighted projection of a velocity gradient, entry by entry.

    grad_q: (nc, nq, 2, 2) with [d, e] = d_d u_e; weight_q: (nc, nq, 2)
    per-direction weights nu_vms_i.  Entry (d, e) is projected with weight
    sqrt(nu_d nu_e) onto the scalar space underlying the velocity.
    Returns a 2x2 nested list of scalar Fields.
    """
    w = np.sqrt(np.maximum(weight_q, 0.0))
    out = [[None, None], [None, None]]
    for d in range(2):
        for e in range(2):
            solver = None if solvers is None else solvers[d][e]
            f, _ok = project_qdata(
                scalar_space, grad_q[:, :, d, e], weight_q=w[:, :, d] * w[:, :, e],
                regularize=regularize, solver=solver,
            )
            out[d][e] = f
    return out
