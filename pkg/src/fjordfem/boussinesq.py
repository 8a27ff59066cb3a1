"""Semi-implicit solver for buoyancy-driven incompressible flow.

The momentum equation uses a balanced convective form whose trilinear term
drops out of the kinetic energy balance, a modified pressure absorbing the
dynamic and hydrostatic heads, and an optional load that closes the exchange
between kinetic and potential energy at the discrete level.  Tracers advect
with a divergence shift that keeps constants exact steady states and feed
back through a linear equation of state.  Open boundaries carry a
directional penalty plus an external hydrostatic traction; ice boundaries
inject melt fluxes.  Residual-driven first-order viscosity and a
projection-based high-order term stabilize under-resolved transport.
"""

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    Field,
    FunctionSpace,
    FacetTabulation,
    MatrixPattern,
    apply_dirichlet,
    boundary_normals,
    compute_nodal_mesh_size,
    interpolate,
    load_vector,
    mass_matrix,
)
from .linsolve import SolverError, append_constraint, make_solver
from .melt import (
    MeltError,
    compute_fluxes,
    sample_mixed_layer,
    smooth_fluxes,
    solve_three_equation,
)
from .stabilization import (
    IndicatorSmoother,
    NodalSampler,
    RunningMax,
    StabilizationConfig,
    activation_function,
    momentum_indicator_ratio,
    tracer_indicator_ratio,
    viscosity_fields,
)
from .timestepping import (
    StepController,
    TimestepError,
    cfl_timestep,
    derivative_weights,
    extrapolation_weights,
    ramp_steps,
)

DAY = 86400.0


@dataclass
class PhysicalParams:
    """Material constants, reference state and forcing profile parameters.

    Units are SI throughout except ``zeta0``, a restoring rate per day.
    """

    nu: float = 1.95e-6
    kappa_t: float = 1.41e-7
    kappa_s: float = 8.01e-10
    g: float = 9.81
    rho0: float = 999.8
    t_ref: float = 0.0
    s_ref: float = 35.0
    alpha_t: float = 0.4e-4
    beta_s: float = 8e-4
    # ice-ocean interface closure
    c_d: float = 1.5e-3
    karman: float = 0.40
    c_i: float = 2009.0
    c_m: float = 3974.0
    lambda1: float = 3.34e5
    lambda2: float = -0.0573
    lambda3: float = 0.0939
    xi_n: float = 0.052
    pi_t: float = 13.8
    pi_s: float = 2432.0
    latent_heat: float = 3.34e5
    t_ice: float = -10.0
    h_eps: float = 10.0 / 3.0
    mole_form: str = "literal"
    # open-boundary restoring: rate in 1/day, active width in meters
    zeta0: float = 1.0
    x_r: float = 2000.0
    # far-field water masses and stratification geometry
    t_aw: float = 0.2
    t_pw: float = -1.6
    s_aw: float = 35.0
    s_pw: float = 34.0
    d_pycno: float = 800.0
    d_total: float = 1000.0


class FormulationKind(enum.Enum):
    """Gravity handling in the momentum equation.

    ``SI_MEEDMAC`` adds the divergence-weighted density-height load that
    makes the kinetic-potential energy exchange discretely conservative;
    ``SI_MEDMAC`` omits it.
    """

    SI_MEDMAC = "si-medmac"
    SI_MEEDMAC = "si-meedmac"


def equation_of_state(t, s, params):
    """Linear density deviation from the reference state."""
    return params.rho0 * (
        -params.alpha_t * (np.asarray(t) - params.t_ref)
        + params.beta_s * (np.asarray(s) - params.s_ref)
    )


def hydrostatic_profile(params, delta_rho_fn, y_min, segment=10.0):
    """External hydrostatic head, zero at the surface.

    Returns a vectorized callable ``P(y)`` equal to the integral of
    ``g delta_rho / rho0`` from ``y`` up to zero, evaluated by composite
    Gauss quadrature on segments no longer than ``segment`` meters.
    """
    nseg = max(1, int(np.ceil(-y_min / segment)))
    edges = np.linspace(y_min, 0.0, nseg + 1)
    xi, wt = np.polynomial.legendre.leggauss(12)
    xi = 0.5 * (xi + 1.0)
    wt = 0.5 * wt

    def integrand(y):
        return params.g * np.asarray(delta_rho_fn(y)) / params.rho0

    lo = edges[:-1]
    width = np.diff(edges)
    pts = lo[:, None] + width[:, None] * xi[None, :]
    seg = width * (integrand(pts) @ wt)
    # cumulative integral from each left edge up to the surface
    upward = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    def profile(y):
        y = np.asarray(y, dtype=float)
        flat = np.atleast_1d(y).ravel()
        j = np.clip(np.searchsorted(edges, flat, side="right") - 1, 0, nseg - 1)
        hi = edges[j + 1]
        w = hi - flat
        qp = flat[:, None] + w[:, None] * xi[None, :]
        partial = w * (integrand(qp) @ wt)
        out = partial + upward[j + 1]
        return out.reshape(np.shape(y)) if np.shape(y) else float(out[0])

    return profile


def zeta_profile(x, x_oc, params):
    """Restoring rate in 1/s, ramping linearly over the last ``x_r`` meters."""
    x = np.asarray(x, dtype=float)
    z0 = params.zeta0 / DAY
    return z0 * np.maximum(0.0, (x - (x_oc - params.x_r)) / params.x_r)


@dataclass
class BoussinesqState:
    """Velocity, modified pressure and the two tracers at one time level."""

    u: Field
    p: Field
    t: Field
    s: Field
    time: float = 0.0


# ---------------------------------------------------------------------------
# projection-based high-order stabilization actions


def _weighted_mass_lu(space, tab, pattern, w_q):
    blocks = np.einsum("mq,qi,qj->mij", tab.wdet * w_q, tab.phi, tab.phi)
    return spla.splu(pattern.assemble(blocks).tocsc())


def _project_with_lu(space, tab, lu, w_q, f_q):
    rhs = load_vector(space, tab, w_q * f_q)
    return lu.solve(rhs)


def vms_tracer_action(space, tab, kappa_q, phi, symmetric, regularize=0.0,
                      pattern=None):
    """Residual of the projected-gradient diffusion term for a tracer.

    Assembles ``(kappa_d (d_d phi - proj_d phi), d_d w)`` over all test
    functions; with ``symmetric`` the test gradient is replaced by its own
    projection complement, which changes nothing when the projection solves
    and the integrals share one quadrature rule.
    """
    pattern = pattern or MatrixPattern(space, space)
    g = tab.phys_grads()
    grad_q = tab.eval_grad_scalar(phi.vec)
    out = np.zeros(space.ndof)
    for d in range(2):
        w = np.asarray(kappa_q[:, :, d], dtype=float)
        wmax = w.max(initial=0.0)
        if wmax <= 0.0:
            continue
        wreg = w + regularize * wmax if regularize > 0.0 else w
        lu = _weighted_mass_lu(space, tab, pattern, wreg)
        pi_vec = _project_with_lu(space, tab, lu, wreg, grad_q[:, :, d])
        r_q = grad_q[:, :, d] - tab.eval_scalar(pi_vec)
        cell = np.einsum("mq,mqi->mi", tab.wdet * w * r_q, g[:, :, :, d])
        np.add.at(out, space.cell_nodes.ravel(), cell.ravel())
        if symmetric:
            z = load_vector(space, tab, w * r_q)
            gd = pattern.assemble(
                np.einsum("mq,qk,mqj->mkj", tab.wdet * wreg, tab.phi, g[:, :, :, d])
            )
            out -= gd.T @ lu.solve(z)
    return out


def vms_momentum_action(vel_space, scalar_space, tab, nu_q, u, symmetric,
                        regularize=0.0, pattern=None):
    """Residual of the projected symmetric-gradient viscosity term.

    Entry (d, e) of the velocity gradient is projected with the two-sided
    weight ``sqrt(nu_d nu_e)``; the assembled load pairs the weighted
    deviation of the symmetric gradient with the test gradient (or, with
    ``symmetric``, its projection complement, an algebraic no-op under a
    shared quadrature rule).
    """
    stt = scalar_space.tabulation(tab.qdegree)
    pattern = pattern or MatrixPattern(scalar_space, scalar_space)
    g = stt.phys_grads()
    gu = tab.eval_grad_vector(u.vec)
    w_s = np.sqrt(np.maximum(np.asarray(nu_q, dtype=float), 0.0))
    lus = {}
    proj = np.zeros_like(gu)
    for d in range(2):
        for e in range(2):
            key = (min(d, e), max(d, e))
            if key not in lus:
                w = w_s[:, :, key[0]] * w_s[:, :, key[1]]
                wmax = w.max(initial=0.0)
                if wmax <= 0.0:
                    lus[key] = None
                else:
                    wreg = w + regularize * wmax if regularize > 0.0 else w
                    lus[key] = (_weighted_mass_lu(scalar_space, stt, pattern, wreg), wreg)
            ent = lus[key]
            if ent is None:
                continue
            lu, wreg = ent
            vec = _project_with_lu(scalar_space, stt, lu, wreg, gu[:, :, d, e])
            proj[:, :, d, e] = stt.eval_scalar(vec)
    sym = gu + np.transpose(gu, (0, 1, 3, 2))
    wfull = w_s[:, :, :, None] * w_s[:, :, None, :]
    dev = wfull * (sym - proj - np.transpose(proj, (0, 1, 3, 2)))
    cell = np.einsum("mq,mqdb,mqjd->mjb", tab.wdet, dev, g)
    out = np.zeros(vel_space.ndof)
    np.add.at(out, vel_space.cell_dofs.ravel(),
              cell.reshape(cell.shape[0], -1).ravel())
    if symmetric:
        all_nodes = np.arange(vel_space.num_nodes)
        for b in range(2):
            dofs_b = vel_space.dof_at(all_nodes, b)
            for d in range(2):
                ent = lus[(min(d, b), max(d, b))]
                if ent is None:
                    continue
                lu, wreg = ent
                z = load_vector(scalar_space, stt, dev[:, :, d, b])
                gd = pattern.assemble(
                    np.einsum("mq,qk,mqj->mkj", stt.wdet * wreg, stt.phi, g[:, :, :, d])
                )
                out[dofs_b] -= gd.T @ lu.solve(z)
    return out


# ---------------------------------------------------------------------------
# coupled problem


class BoussinesqProblem:
    """Discrete operators for one mesh, element order and parameter set.

    Velocity lives one polynomial degree above pressure and the tracers
    (an inf-sup stable pairing); all bilinear forms share one quadrature
    rule so cross-space point data can be reused.
    """

    def __init__(self, mesh, order=2, params=None, kind=FormulationKind.SI_MEEDMAC,
                 stab=None, gravity=True, nu=None, kappa_t=None, kappa_s=None,
                 noslip_tags=None, ocean_tag=None, ice_tag=None,
                 t_res_fn=None, s_res_fn=None, zeta_fn=None, p_hyd_fn=None,
                 solver="direct", krylov=None, qdegree=None):
        self.mesh = mesh
        self.order = int(order)
        self.params = params or PhysicalParams()
        self.kind = kind
        self.stab = stab or StabilizationConfig()
        self.gravity = gravity
        p = self.params
        self.nu = p.nu if nu is None else nu
        self.kappa_t = p.kappa_t if kappa_t is None else kappa_t
        self.kappa_s = p.kappa_s if kappa_s is None else kappa_s

        k = self.order
        self.vel = FunctionSpace(mesh, k + 1, ncomp=2)
        self.pres = FunctionSpace(mesh, k)
        self.trac = FunctionSpace(mesh, k)
        self.vels = FunctionSpace(mesh, k + 1)
        # one rule covering the trilinear terms of the highest-degree space
        self.qdeg = qdegree or (2 * k + 5)
        self.tv = self.vel.tabulation(self.qdeg)
        self.tp = self.pres.tabulation(self.qdeg)
        self.tt = self.trac.tabulation(self.qdeg)
        self.ts = self.vels.tabulation(self.qdeg)

        self.pat_vv = MatrixPattern(self.vel, self.vel)
        self.pat_vp = MatrixPattern(self.vel, self.pres)
        self.pat_tt = MatrixPattern(self.trac, self.trac)
        self.pat_ss = MatrixPattern(self.vels, self.vels)

        self.nv = self.vel.ndof
        self.npres = self.pres.ndof
        tv = self.tv
        self._wdet = tv.wdet
        self._gv = tv.phys_grads()
        self._gt = self.tt.phys_grads()
        self._yq = tv.qpoints_phys()[:, :, 1]
        self._mass_blocks_v = np.einsum("mq,qi,qj->mij", tv.wdet, tv.phi, tv.phi)
        self._mass_blocks_t = np.einsum("mq,qi,qj->mij", tv.wdet, self.tt.phi, self.tt.phi)
        self._mass_v = mass_matrix(self.vel, qdegree=self.qdeg, pattern=self.pat_vv)
        self._mass_t = mass_matrix(self.trac, qdegree=self.qdeg, pattern=self.pat_tt)
        nc = mesh.num_cells
        nloc = self.vel.ref.nloc
        bp = -np.einsum("mq,mqib,qj->mibj", tv.wdet, self._gv, self.tp.phi)
        self._grad_p = self.pat_vp.assemble(bp.reshape(nc, nloc * 2, -1))

        # strong no-slip everywhere except the open boundary unless told
        present = [int(t) for t in np.unique(mesh.facet_tags)]
        if noslip_tags is None:
            noslip_tags = [t for t in present if ocean_tag is None or t != int(ocean_tag)]
        self.noslip_tags = tuple(noslip_tags)
        if self.noslip_tags:
            nodes = self.vel.nodes_on_tags(self.noslip_tags)
            self.noslip_dofs = np.sort(np.concatenate(
                [self.vel.dof_at(nodes, 0), self.vel.dof_at(nodes, 1)]))
        else:
            self.noslip_dofs = np.zeros(0, dtype=np.int64)

        self.ocean_tag = ocean_tag
        self.p_hyd_fn = p_hyd_fn
        self._ftab_oc_v = None
        self._trac_bc = {"t": None, "s": None}
        if ocean_tag is not None:
            fids = mesh.facets_with_tag(ocean_tag)
            if fids.size == 0:
                raise ValueError(f"no facets carry the open-boundary tag {ocean_tag}")
            self._ftab_oc_v = FacetTabulation(self.vel, fids, self.qdeg)
            dofs = self._ftab_oc_v.cell_dofs
            n2 = dofs.shape[1]
            self._oc_rows = np.repeat(dofs, n2, axis=1).ravel()
            self._oc_cols = np.tile(dofs, (1, n2)).ravel()
            if p_hyd_fn is not None:
                yq = self._ftab_oc_v.points[:, :, 1]
                self._phyd_f = np.asarray(p_hyd_fn(yq), dtype=float)
            else:
                self._phyd_f = None
            for which, fn in (("t", t_res_fn), ("s", s_res_fn)):
                if fn is None:
                    continue
                nodes = self.trac.nodes_on_tags([ocean_tag])
                xy = self.trac.node_coords[nodes]
                self._trac_bc[which] = (self.trac.dof_at(nodes),
                                        np.asarray(fn(xy[:, 0], xy[:, 1]), dtype=float))

        self.ice_tag = ice_tag
        self._ftab_ice_t = None
        if ice_tag is not None:
            fids = mesh.facets_with_tag(ice_tag)
            if fids.size == 0:
                raise ValueError(f"no facets carry the ice tag {ice_tag}")
            self.ice_facets = fids
            self._ftab_ice_t = FacetTabulation(self.trac, fids, self.qdeg)
            nodes, normals, ok = boundary_normals(self.trac, ice_tag)
            self.ice_nodes = nodes
            self.ice_normals = normals
            self.ice_normal_ok = ok

        # restoring profile and far-field tracers at quadrature points and at
        # the tracer nodes (the latter feed the residual indicators)
        xyq = tv.qpoints_phys()
        xyn = self.trac.node_coords
        self._zeta_q = None
        self.zeta_nodes = None
        if zeta_fn is not None:
            self._zeta_q = np.asarray(zeta_fn(xyq[:, :, 0], xyq[:, :, 1]), dtype=float)
            self.zeta_nodes = np.asarray(zeta_fn(xyn[:, 0], xyn[:, 1]), dtype=float)
        self._res_q = {"t": None, "s": None}
        self.res_nodes = {"t": None, "s": None}
        for which, fn in (("t", t_res_fn), ("s", s_res_fn)):
            if fn is not None:
                self._res_q[which] = np.asarray(
                    fn(xyq[:, :, 0], xyq[:, :, 1]), dtype=float)
                self.res_nodes[which] = np.asarray(
                    fn(xyn[:, 0], xyn[:, 1]), dtype=float)

        self.enclosed = ocean_tag is None
        if self.enclosed:
            ones = np.ones((nc, tv.wdet.shape[1]))
            self._constraint = np.concatenate(
                [np.zeros(self.nv), load_vector(self.pres, self.tp, ones)])
        self.nsys = self.nv + self.npres + (1 if self.enclosed else 0)

        self.flow_solver = make_solver(solver, krylov)
        self.tracer_solvers = {"t": make_solver(solver, krylov),
                               "s": make_solver(solver, krylov)}
        self._flow_blocks = [("velocity", 0, self.nv),
                             ("pressure", self.nv, self.nv + self.npres)]

    # -- state helpers ----------------------------------------------------

    def state(self, u=None, p=None, t=None, s=None, time=0.0,
              u_fn=None, t_fn=None, s_fn=None):
        if u_fn is not None:
            u = interpolate(self.vel, u_fn)
        if t_fn is not None:
            t = interpolate(self.trac, t_fn)
        if s_fn is not None:
            s = interpolate(self.trac, s_fn)
        return BoussinesqState(
            u=u or self.vel.new_field(),
            p=p or self.pres.new_field(),
            t=t or self.trac.new_field(),
            s=s or self.trac.new_field(),
            time=time,
        )

    def pack_flow(self, u, p, lam=0.0):
        parts = [u.vec, p.vec]
        if self.enclosed:
            parts.append(np.array([lam]))
        return np.concatenate(parts)

    def free_velocity_dofs(self):
        mask = np.ones(self.nv, dtype=bool)
        mask[self.noslip_dofs] = False
        return np.nonzero(mask)[0]

    def delta_rho_q(self, t_field, s_field):
        return equation_of_state(self.tt.eval_scalar(t_field.vec),
                                 self.tt.eval_scalar(s_field.vec), self.params)

    # -- momentum ---------------------------------------------------------

    def emac_load(self, u_field):
        """Load vector of the balanced convective trio at ``u_field``."""
        uq = self.tv.eval_vector(u_field.vec)
        gq = self.tv.eval_grad_vector(u_field.vec)
        div = np.einsum("mqdd->mq", gq)
        conv = np.einsum("mqd,mqde->mqe", uq, gq)
        rot = np.einsum("mqe,mqde->mqd", uq, gq)
        vals = conv + rot + div[:, :, None] * uq
        return load_vector(self.vel, self.tv, vals)

    def _viscosity_weights(self, visc):
        """Entrywise weights nu + sqrt(h_d h_e) + sqrt(v_d v_e) at the points."""
        nc, nq = self._wdet.shape
        if visc is None:
            w = np.full((nc, nq, 2, 2), self.nu)
            return w, None, None
        snu = np.sqrt(np.maximum(np.stack(
            [self.tt.eval_scalar(visc.nu_h[:, d]) for d in range(2)], axis=2), 0.0))
        svms = np.sqrt(np.maximum(np.stack(
            [self.tt.eval_scalar(visc.nu_vms[:, d]) for d in range(2)], axis=2), 0.0))
        w = (self.nu
             + snu[:, :, :, None] * snu[:, :, None, :]
             + svms[:, :, :, None] * svms[:, :, None, :])
        gamma_q = self.tt.eval_scalar(visc.gamma)
        return w, gamma_q, svms

    def assemble_flow_system(self, dt_terms, u_star, t_star, s_star, visc=None):
        """Linearized momentum/continuity system about the given iterate.

        ``dt_terms`` is ``(w0, [(w_j, u_j), ...])`` for the discrete time
        derivative, or None for the bare spatial operator.  The convective
        trio enters through its linearization about ``u_star`` with the
        matching correction on the right-hand side; buoyancy uses the
        tracer iterates.  Returns the bordered/constrained ``(A, b)``.
        """
        nc = self.mesh.num_cells
        nloc = self.vel.ref.nloc
        wdet = self._wdet
        gv = self._gv
        phiv = self.tv.phi
        p = self.params

        full = np.zeros((nc, nloc, 2, nloc, 2))
        if dt_terms is not None:
            w0 = dt_terms[0]
            for b_ in range(2):
                full[:, :, b_, :, b_] += w0 * self._mass_blocks_v

        uq = self.tv.eval_vector(u_star.vec)
        gq = self.tv.eval_grad_vector(u_star.vec)
        divq = np.einsum("mqdd->mq", gq)
        tmp = np.einsum("mqd,mqjd->mqj", uq, gv)
        adv = np.einsum("mq,qi,mqj->mij", wdet, phiv, tmp)
        dmass = np.einsum("mq,qi,qj->mij", wdet * divq, phiv, phiv)
        r_blk = np.einsum("mq,qi,mqjd,mqe->mijde", wdet, phiv, gv, uq)
        t_blk = np.einsum("mq,qi,qj,mqde->mijde", wdet, phiv, phiv, gq)
        for b_ in range(2):
            full[:, :, b_, :, b_] += adv + dmass
            for c_ in range(2):
                full[:, :, b_, :, c_] += r_blk[:, :, :, b_, c_] + r_blk[:, :, :, c_, b_]
                full[:, :, b_, :, c_] += t_blk[:, :, :, c_, b_] + t_blk[:, :, :, b_, c_]

        wvisc, gamma_q, svms = self._viscosity_weights(visc)
        for b_ in range(2):
            lap = np.einsum("mqd,mqid,mqjd->mij",
                            wdet[:, :, None] * wvisc[:, :, :, b_], gv, gv)
            full[:, :, b_, :, b_] += lap
            for c_ in range(2):
                cross = np.einsum("mq,mqi,mqj->mij", wdet * wvisc[:, :, c_, b_],
                                  gv[:, :, :, c_], gv[:, :, :, b_])
                full[:, :, b_, :, c_] += cross
                if gamma_q is not None:
                    gd = np.einsum("mq,mqi,mqj->mij", wdet * gamma_q,
                                   gv[:, :, :, b_], gv[:, :, :, c_])
                    full[:, :, b_, :, c_] += gd

        a_vv = self.pat_vv.assemble(full.reshape(nc, nloc * 2, nloc * 2))

        ftab = self._ftab_oc_v
        if ftab is not None:
            uf = ftab.eval_vector(u_star.vec)
            un = np.einsum("fqd,fd->fq", uf, ftab.normals)
            fb = np.einsum("fq,fqi,fqj->fij", -0.5 * np.abs(un) * ftab.wlen,
                           ftab.phi, ftab.phi)
            nf, nl = fb.shape[0], fb.shape[1]
            ffull = np.zeros((nf, nl, 2, nl, 2))
            for b_ in range(2):
                ffull[:, :, b_, :, b_] = fb
            a_vv = a_vv + sp.coo_matrix(
                (ffull.reshape(nf, -1).ravel(), (self._oc_rows, self._oc_cols)),
                shape=(self.nv, self.nv)).tocsr()

        a = sp.bmat([[a_vv, self._grad_p], [self._grad_p.T, None]], format="csr")

        b_v = np.zeros(self.nv)
        if dt_terms is not None and dt_terms[1]:
            acc = np.zeros(self.nv)
            for w_j, f_j in dt_terms[1]:
                acc += w_j * f_j.vec
            b_v -= self._mass_v @ acc
        b_v += self.emac_load(u_star)

        if self.gravity:
            drho_q = self.delta_rho_q(t_star, s_star)
            gvals = np.zeros((nc, wdet.shape[1], 2))
            gvals[:, :, 1] = -(p.g / p.rho0) * drho_q
            b_v += load_vector(self.vel, self.tv, gvals)
            if self.kind is FormulationKind.SI_MEEDMAC:
                coef = -0.5 * p.g / p.rho0 * drho_q * self._yq
                cell = np.einsum("mq,mqib->mib", wdet * coef, gv)
                np.add.at(b_v, self.vel.cell_dofs.ravel(),
                          cell.reshape(nc, -1).ravel())

        if ftab is not None and self._phyd_f is not None:
            fvals = -self._phyd_f[:, :, None] * ftab.normals[:, None, :]
            b_v += ftab.load(fvals)

        if visc is not None and svms is not None and float(np.max(visc.nu_vms)) > 0.0:
            b_v += self._vms_explicit_momentum(gq, svms)

        b = np.concatenate([b_v, np.zeros(self.npres)])
        if self.enclosed:
            a = append_constraint(a, self._constraint)
            b = np.append(b, 0.0)
        if self.noslip_dofs.size:
            a, b = apply_dirichlet(a, b, self.noslip_dofs, 0.0)
        return a, b

    def _vms_explicit_momentum(self, gq, svms):
        """Lagged projected-gradient load: the high-order term splits into an
        implicit full-gradient part (in the matrix) minus this projection."""
        stt = self.ts
        reg = self.stab.regularize
        lus = {}
        proj = np.zeros_like(gq)
        for d in range(2):
            for e in range(2):
                key = (min(d, e), max(d, e))
                if key not in lus:
                    w = svms[:, :, key[0]] * svms[:, :, key[1]]
                    wmax = w.max(initial=0.0)
                    if wmax <= 0.0:
                        lus[key] = None
                    else:
                        wreg = w + reg * wmax
                        lus[key] = (_weighted_mass_lu(self.vels, stt, self.pat_ss, wreg),
                                    wreg)
                ent = lus[key]
                if ent is None:
                    continue
                lu, wreg = ent
                vec = _project_with_lu(self.vels, stt, lu, wreg, gq[:, :, d, e])
                proj[:, :, d, e] = stt.eval_scalar(vec)
        wfull = svms[:, :, :, None] * svms[:, :, None, :]
        lagged = wfull * (proj + np.transpose(proj, (0, 1, 3, 2)))
        cell = np.einsum("mq,mqdb,mqjd->mjb", self._wdet, lagged, self._gv)
        out = np.zeros(self.nv)
        np.add.at(out, self.vel.cell_dofs.ravel(),
                  cell.reshape(cell.shape[0], -1).ravel())
        return out

    def solve_flow(self, a, b):
        self.flow_solver.update(a)
        x = self.flow_solver.solve(b, blocks=self._flow_blocks, context="flow")
        return Field(self.vel, x[: self.nv]), Field(self.pres, x[self.nv: self.nv + self.npres])

    # -- tracers ----------------------------------------------------------

    def assemble_tracer_system(self, which, dt_terms, u_new, visc=None,
                               phi_bar=0.0, flux=None, phi_star=None):
        """Advection-diffusion system for one tracer with the new velocity.

        The divergence shift subtracts ``phi_bar`` so a spatially constant
        tracer with matching history is an exact steady state for any
        advecting field.  ``flux`` adds the ice-boundary load and requires
        an ice boundary on the problem.
        """
        if which not in ("t", "s"):
            raise ValueError(f"unknown tracer {which!r}")
        if flux is not None and self._ftab_ice_t is None:
            raise ValueError("melt flux given but the problem has no ice boundary")
        kappa = self.kappa_t if which == "t" else self.kappa_s
        nc = self.mesh.num_cells
        tt = self.tt
        gt = self._gt
        wdet = self._wdet
        phit = tt.phi

        uq = self.tv.eval_vector(u_new.vec)
        divq = np.einsum("mqdd->mq", self.tv.eval_grad_vector(u_new.vec))
        tmp = np.einsum("mqd,mqjd->mqj", uq, gt)
        blocks = np.einsum("mq,qi,mqj->mij", wdet, phit, tmp)
        if dt_terms is not None:
            blocks += dt_terms[0] * self._mass_blocks_t
        blocks += np.einsum("mq,qi,qj->mij", 0.5 * wdet * divq, phit, phit)

        if visc is None:
            kq = np.full(wdet.shape + (2,), kappa)
            kvq = None
        else:
            kh = visc.kappa_t if which == "t" else visc.kappa_s
            kv = visc.kappa_t_vms if which == "t" else visc.kappa_s_vms
            kh_q = np.stack([tt.eval_scalar(kh[:, d]) for d in range(2)], axis=2)
            kvq = np.stack([tt.eval_scalar(kv[:, d]) for d in range(2)], axis=2)
            kq = kappa + np.maximum(kh_q, 0.0) + np.maximum(kvq, 0.0)
        blocks += np.einsum("mqd,mqid,mqjd->mij", wdet[:, :, None] * kq, gt, gt)

        if self._zeta_q is not None:
            blocks += np.einsum("mq,qi,qj->mij", wdet * self._zeta_q, phit, phit)

        a = self.pat_tt.assemble(blocks)

        b = np.zeros(self.trac.ndof)
        if dt_terms is not None and dt_terms[1]:
            acc = np.zeros(self.trac.ndof)
            for w_j, f_j in dt_terms[1]:
                acc += w_j * f_j.vec
            b -= self._mass_t @ acc
        if phi_bar != 0.0:
            b += load_vector(self.trac, tt, 0.5 * divq * phi_bar)
        if self._zeta_q is not None and self._res_q[which] is not None:
            b += load_vector(self.trac, tt, self._zeta_q * self._res_q[which])
        if kvq is not None and phi_star is not None and float(np.max(kvq)) > 0.0:
            b += self._vms_explicit_tracer(phi_star, kvq)
        if flux is not None:
            b -= self._ftab_ice_t.load(self._ftab_ice_t.eval_scalar(flux.vec))

        bc = self._trac_bc[which]
        if bc is not None:
            a, b = apply_dirichlet(a, b, bc[0], bc[1])
        return a, b

    def _vms_explicit_tracer(self, phi_star, kvq):
        tt = self.tt
        reg = self.stab.regularize
        grad_q = tt.eval_grad_scalar(phi_star.vec)
        out = np.zeros(self.trac.ndof)
        for d in range(2):
            w = kvq[:, :, d]
            wmax = w.max(initial=0.0)
            if wmax <= 0.0:
                continue
            wreg = w + reg * wmax
            lu = _weighted_mass_lu(self.trac, tt, self.pat_tt, wreg)
            vec = _project_with_lu(self.trac, tt, lu, wreg, grad_q[:, :, d])
            pi_q = tt.eval_scalar(vec)
            cell = np.einsum("mq,mqi->mi", self._wdet * w * pi_q, self._gt[:, :, :, d])
            np.add.at(out, self.trac.cell_nodes.ravel(), cell.ravel())
        return out

    def solve_tracer(self, which, a, b):
        solver = self.tracer_solvers[which]
        solver.update(a)
        x = solver.solve(b, blocks=[(f"tracer {which}", 0, self.trac.ndof)],
                         context=f"tracer {which}")
        return Field(self.trac, x)

    def tracer_mean(self, phi_field):
        tt = self.tt
        area = float(np.sum(tt.wdet))
        return float(np.sum(tt.wdet * tt.eval_scalar(phi_field.vec))) / area


# ---------------------------------------------------------------------------
# time integration


@dataclass
class StepReport:
    """What one accepted step did."""

    time: float
    dt: float
    order: int
    rejects: int = 0
    sweeps: int = 1
    melt_mean: float = 0.0
    melt_max: float = 0.0


class TimeIntegrator:
    """Multistep driver coupling flow, tracers, stabilization and melt.

    Each step extrapolates the state, evaluates the interface melt closure
    and the residual indicators from history, solves one linearized flow
    system followed by both tracer systems with the new velocity, and
    accepts or halves the step.  ``scheme='cn'`` solves at the interval
    midpoint with optional fixed-point sweeps and reflects the result,
    which conserves the discrete energy exchange exactly in the
    conservative formulation.
    """

    def __init__(self, problem, order=2, scheme="bdf", dt=None, cfl=None,
                 dt_max=np.inf, stab_on=True, melt=False, sweeps=1,
                 ramp=False, melt_smoothing=10.0, sweep_tol=1e-13,
                 controller=None):
        if scheme not in ("bdf", "cn"):
            raise ValueError(f"unknown scheme {scheme!r}")
        if dt is None and cfl is None:
            raise ValueError("need a step size or a CFL number")
        self.problem = problem
        self.order = int(order)
        self.scheme = scheme
        self.dt = dt
        self.cfl = cfl
        self.dt_max = dt_max
        self.stab_on = stab_on
        self.melt = melt
        self.sweeps = max(1, int(sweeps))
        self.sweep_tol = sweep_tol
        self.melt_smoothing = melt_smoothing
        if melt and problem.ice_tag is None:
            raise ValueError("melt enabled but the problem has no ice boundary")

        self.times = []
        self.u_hist = []
        self.t_hist = []
        self.s_hist = []
        self.p = problem.pres.new_field()
        self._samp = NodalSampler(problem.trac)
        self._h = None
        self._smoother = None
        self._run = RunningMax()
        self._act = activation_function(problem.stab.f_rv)
        self.last_visc = None
        self.last_melt = None
        self.step_count = 0
        self._ramp_queue = []
        if controller is None and (cfl is not None):
            controller = StepController(dt_init=dt if dt is not None else dt_max,
                                        dt_max=dt_max)
        self.controller = controller
        if ramp and dt is not None and self.order > 1 and scheme == "bdf":
            self._ramp_queue = ramp_steps(dt, self.order)

        # per-cell sizes for the CFL candidate
        verts = problem.mesh.vertices[problem.mesh.cells]
        e0 = np.linalg.norm(verts[:, 1] - verts[:, 0], axis=1)
        e1 = np.linalg.norm(verts[:, 2] - verts[:, 1], axis=1)
        e2 = np.linalg.norm(verts[:, 0] - verts[:, 2], axis=1)
        self._cell_h = np.minimum(np.minimum(e0, e1), e2)

    # -- state ------------------------------------------------------------

    def initialize(self, state):
        self.times = [state.time]
        self.u_hist = [state.u.copy()]
        self.t_hist = [state.t.copy()]
        self.s_hist = [state.s.copy()]
        self.p = state.p.copy()
        prob = self.problem
        if self.stab_on and self._h is None:
            self._h = compute_nodal_mesh_size(prob.mesh, prob.trac,
                                              prob.stab.c_delta)
            self._smoother = IndicatorSmoother(prob.trac, self._h,
                                               prob.stab.c_delta)

    @property
    def state(self):
        return BoussinesqState(u=self.u_hist[0], p=self.p, t=self.t_hist[0],
                               s=self.s_hist[0], time=self.times[0])

    # -- pieces -----------------------------------------------------------

    def _candidate_dt(self):
        if self._ramp_queue:
            return self._ramp_queue[0]
        if self.cfl is None:
            return self.dt
        u = self.u_hist[0]
        sp_nodes = np.linalg.norm(
            u.vec.reshape(self.problem.vel.num_nodes, 2), axis=1)
        cell_speed = sp_nodes[self.problem.vel.cell_nodes].max(axis=1)
        dt = cfl_timestep(self._cell_h, cell_speed, self.cfl, self.dt_max)
        if self.controller is not None:
            dt = min(dt, self.controller.growth * self.controller.dt)
        return dt

    def _extrapolate(self, hist, weights):
        out = hist[0].space.new_field()
        for w, f in zip(weights, hist):
            out.vec += w * f.vec
        return out

    def _stab_fields(self, u_star):
        prob = self.problem
        cfg = prob.stab
        samp = self._samp
        h = self._h.vec
        m = min(self.order, len(self.times) - 1)
        if m >= 1:
            w = derivative_weights(self.times[: m + 1])
            du_dt = np.zeros((prob.trac.num_nodes, 2))
            dt_t = np.zeros(prob.trac.num_nodes)
            dt_s = np.zeros(prob.trac.num_nodes)
            for j in range(m + 1):
                du_dt += w[j] * samp.values(self.u_hist[j])
                dt_t += w[j] * self.t_hist[j].vec
                dt_s += w[j] * self.s_hist[j].vec
        else:
            du_dt = np.zeros((prob.trac.num_nodes, 2))
            dt_t = np.zeros(prob.trac.num_nodes)
            dt_s = np.zeros(prob.trac.num_nodes)

        u0, t0, s0 = self.u_hist[0], self.t_hist[0], self.s_hist[0]
        zeta_t = prob.zeta_nodes if prob.res_nodes["t"] is not None else None
        zeta_s = prob.zeta_nodes if prob.res_nodes["s"] is not None else None
        ratio_t = tracer_indicator_ratio(samp, t0, u0, dt_t, prob.kappa_t, h,
                                         cfg, self._run, "t",
                                         zeta_nodes=zeta_t,
                                         phi_res_nodes=prob.res_nodes["t"])
        ratio_s = tracer_indicator_ratio(samp, s0, u0, dt_s, prob.kappa_s, h,
                                         cfg, self._run, "s",
                                         zeta_nodes=zeta_s,
                                         phi_res_nodes=prob.res_nodes["s"])
        p = prob.params
        drho_vec = equation_of_state(t0.vec, s0.vec, p)
        drho_field = Field(prob.trac, drho_vec)
        grad_drho = samp.gradients(drho_field)
        ratio_u = momentum_indicator_ratio(
            samp, u0, self.p, du_dt, prob.nu, h, cfg, self._run, "u",
            delta_rho_nodes=drho_vec if prob.gravity else None,
            grad_delta_rho=grad_drho if prob.gravity else None,
            g_over_rho0=p.g / p.rho0,
            y_nodes=prob.trac.node_coords[:, 1],
        )
        sig_u = self._smoother.apply(self._act(ratio_u))
        sig_t = self._smoother.apply(self._act(ratio_t))
        sig_s = self._smoother.apply(self._act(ratio_s))
        u_nodes = samp.values(u0)
        visc = viscosity_fields(u_nodes, h, sig_u, sig_t, sig_s, cfg)
        self.last_sigma = {"u": sig_u, "t": sig_t, "s": sig_s}
        return visc

    def _melt_fluxes(self, u_star, t_star, s_star):
        prob = self.problem
        coords = prob.trac.node_coords[prob.ice_nodes]
        sample = sample_mixed_layer(u_star, t_star, s_star, coords,
                                    prob.ice_normals, prob.params)
        sol = solve_three_equation(sample, prob.params)
        f_t, f_s = compute_fluxes(sol, sample, prob.params)
        raw_t = np.zeros(prob.trac.ndof)
        raw_s = np.zeros(prob.trac.ndof)
        raw_t[prob.trac.dof_at(prob.ice_nodes)] = f_t
        raw_s[prob.trac.dof_at(prob.ice_nodes)] = f_s
        flux_t = smooth_fluxes(prob.trac, prob.ice_facets, raw_t, self.melt_smoothing)
        flux_s = smooth_fluxes(prob.trac, prob.ice_facets, raw_s, self.melt_smoothing)
        self.last_melt = {"m_b": sol.m_b, "t_b": sol.t_b, "s_b": sol.s_b,
                          "f_t": f_t, "f_s": f_s, "nodes": prob.ice_nodes,
                          "nmiss": sample.nmiss}
        return flux_t, flux_s

    # -- stepping ---------------------------------------------------------

    def step(self):
        rejects = 0
        while True:
            dt = self._candidate_dt()
            if self.controller is not None:
                dt = min(dt, self.controller.dt)
            try:
                report = self._try_step(dt)
            except (SolverError, MeltError) as exc:
                rejects += 1
                if self.controller is not None:
                    self.controller.reject()
                elif rejects > 8:
                    raise TimestepError(
                        f"step at t={self.times[0]:.6g} kept failing: {exc}")
                else:
                    self.dt = 0.5 * dt
                continue
            if self._ramp_queue:
                self._ramp_queue.pop(0)
            if self.controller is not None:
                self.controller.accept(dt)
            report.rejects = rejects
            self.step_count += 1
            return report

    def _try_step(self, dt):
        if self.scheme == "cn":
            return self._midpoint_step(dt)
        return self._bdf_step(dt)

    def _push(self, t_new, u_new, p_new, tt_new, ss_new):
        keep = self.order + 1
        self.times = [t_new] + self.times[: keep - 1]
        self.u_hist = [u_new] + self.u_hist[: keep - 1]
        self.t_hist = [tt_new] + self.t_hist[: keep - 1]
        self.s_hist = [ss_new] + self.s_hist[: keep - 1]
        self.p = p_new

    def _bdf_step(self, dt):
        prob = self.problem
        t_new = self.times[0] + dt
        m = min(self.order, len(self.times))
        w = derivative_weights([t_new] + self.times[:m])
        hist_u = [(w[j + 1], self.u_hist[j]) for j in range(m)]
        hist_t = [(w[j + 1], self.t_hist[j]) for j in range(m)]
        hist_s = [(w[j + 1], self.s_hist[j]) for j in range(m)]

        ew = extrapolation_weights(self.times[:m], t_new)
        u_star = self._extrapolate(self.u_hist[:m], ew)
        t_star = self._extrapolate(self.t_hist[:m], ew)
        s_star = self._extrapolate(self.s_hist[:m], ew)

        flux_t = flux_s = None
        if self.melt:
            flux_t, flux_s = self._melt_fluxes(u_star, t_star, s_star)
        visc = self._stab_fields(u_star) if self.stab_on else None
        self.last_visc = visc

        sweeps_done = 0
        u_new = p_new = t_sol = s_sol = None
        for sweep in range(self.sweeps):
            a, b = prob.assemble_flow_system((w[0], hist_u), u_star, t_star,
                                             s_star, visc=visc)
            u_new, p_new = prob.solve_flow(a, b)
            tbar = prob.tracer_mean(self.t_hist[0])
            sbar = prob.tracer_mean(self.s_hist[0])
            at, bt = prob.assemble_tracer_system(
                "t", (w[0], hist_t), u_new, visc=visc, phi_bar=tbar,
                flux=flux_t, phi_star=t_star)
            t_sol = prob.solve_tracer("t", at, bt)
            as_, bs = prob.assemble_tracer_system(
                "s", (w[0], hist_s), u_new, visc=visc, phi_bar=sbar,
                flux=flux_s, phi_star=s_star)
            s_sol = prob.solve_tracer("s", as_, bs)
            sweeps_done = sweep + 1
            if sweep + 1 < self.sweeps:
                du = np.linalg.norm(u_new.vec - u_star.vec)
                scale = max(np.linalg.norm(u_new.vec), 1e-30)
                u_star, t_star, s_star = u_new, t_sol, s_sol
                if du <= self.sweep_tol * scale:
                    break

        self._push(t_new, u_new, p_new, t_sol, s_sol)
        report = StepReport(time=t_new, dt=dt, order=m, sweeps=sweeps_done)
        if self.last_melt is not None:
            report.melt_mean = float(np.mean(self.last_melt["m_b"]))
            report.melt_max = float(np.max(self.last_melt["m_b"]))
        return report

    def _midpoint_step(self, dt):
        prob = self.problem
        t_old = self.times[0]
        t_new = t_old + dt
        w0 = 2.0 / dt
        hist_u = [(-w0, self.u_hist[0])]
        hist_t = [(-w0, self.t_hist[0])]
        hist_s = [(-w0, self.s_hist[0])]

        u_star = self.u_hist[0].copy()
        t_star = self.t_hist[0].copy()
        s_star = self.s_hist[0].copy()

        flux_t = flux_s = None
        if self.melt:
            flux_t, flux_s = self._melt_fluxes(u_star, t_star, s_star)
        visc = self._stab_fields(u_star) if self.stab_on else None
        self.last_visc = visc

        sweeps_done = 0
        u_mid = p_mid = t_mid = s_mid = None
        for sweep in range(self.sweeps):
            a, b = prob.assemble_flow_system((w0, hist_u), u_star, t_star,
                                             s_star, visc=visc)
            u_mid, p_mid = prob.solve_flow(a, b)
            tbar = prob.tracer_mean(self.t_hist[0])
            sbar = prob.tracer_mean(self.s_hist[0])
            at, bt = prob.assemble_tracer_system(
                "t", (w0, hist_t), u_mid, visc=visc, phi_bar=tbar,
                flux=flux_t, phi_star=t_star)
            t_mid = prob.solve_tracer("t", at, bt)
            as_, bs = prob.assemble_tracer_system(
                "s", (w0, hist_s), u_mid, visc=visc, phi_bar=sbar,
                flux=flux_s, phi_star=s_star)
            s_mid = prob.solve_tracer("s", as_, bs)
            sweeps_done = sweep + 1
            du = np.linalg.norm(u_mid.vec - u_star.vec)
            scale = max(np.linalg.norm(u_mid.vec), 1e-30)
            u_star, t_star, s_star = u_mid, t_mid, s_mid
            if du <= self.sweep_tol * scale:
                break

        u_new = prob.vel.new_field(2.0 * u_mid.vec - self.u_hist[0].vec)
        t_new_f = prob.trac.new_field(2.0 * t_mid.vec - self.t_hist[0].vec)
        s_new_f = prob.trac.new_field(2.0 * s_mid.vec - self.s_hist[0].vec)
        self._push(t_new, u_new, p_mid, t_new_f, s_new_f)
        report = StepReport(time=t_new, dt=dt, order=2, sweeps=sweeps_done)
        if self.last_melt is not None:
            report.melt_mean = float(np.mean(self.last_melt["m_b"]))
            report.melt_max = float(np.max(self.last_melt["m_b"]))
        return report
