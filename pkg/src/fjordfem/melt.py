"""Ice-ocean interface melt parameterization.

The interface state couples three relations: the pressure- and
salinity-dependent freezing point, a heat balance between turbulent ocean
heat flux and latent/sensible heat of melting, and a salt balance between
turbulent salt flux and meltwater dilution.  Eliminating the interface
temperature and melt rate leaves a quadratic in the interface salinity,
solved here in closed form per boundary node.

Ocean-side inputs are sampled a boundary-layer thickness into the water
column; the resulting heat and salt fluxes are smoothed along the ice
boundary by a small elliptic projection before entering the tracer
equations as flux boundary data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import nearest_inside, point_evaluate
from .quadrature import interval_rule

SPEED_FLOOR = 1e-3


class MeltError(RuntimeError):
    """Raised when the interface salinity equation has no positive root."""


@dataclass
class MixedLayerSample:
    """Ocean state driving the interface balance, one entry per ice node."""

    u_m: np.ndarray
    t_m: np.ndarray
    s_m: np.ndarray
    p_b: np.ndarray
    nmiss: int = 0


@dataclass
class MeltSolution:
    """Interface state and melt fluxes, one entry per ice node."""

    s_b: np.ndarray
    t_b: np.ndarray
    m_b: np.ndarray
    f_t: np.ndarray = field(default=None)
    f_s: np.ndarray = field(default=None)


def turbulent_transfer_constant(params):
    """Stability-driven part of the transfer resistance, shared by both tracers."""
    return 1.0 / (2.0 * params.xi_n) - 1.0 / params.karman


def exchange_velocities(u_m, params):
    """Heat and salt exchange velocities (gamma_T, gamma_S) from the speed.

    The molecular resistance uses the tabulated linear-in-Prandtl/Schmidt
    form by default; ``params.mole_form = "cited"`` selects the two-thirds
    power law common in the boundary-layer literature.
    """
    u_m = np.asarray(u_m, dtype=float)
    g_turb = turbulent_transfer_constant(params)
    form = getattr(params, "mole_form", "literal")
    if form == "literal":
        mole_t = 12.5 * params.pi_t
        mole_s = 12.5 * params.pi_s
    elif form == "cited":
        mole_t = 12.5 * params.pi_t ** (2.0 / 3.0) - 6.0
        mole_s = 12.5 * params.pi_s ** (2.0 / 3.0) - 6.0
    else:
        raise ValueError(f"unknown molecular-transfer form {form!r}")
    star = np.sqrt(params.c_d) * u_m
    return star / (g_turb + mole_t), star / (g_turb + mole_s)


def freezing_temperature(s, p_b, params):
    return params.lambda1 * s + params.lambda2 + params.lambda3 * p_b


def solve_three_equation(sample, params):
    """Interface salinity, temperature and melt rate for each sampled node.

    The heat and salt balances reduce to ``a s_b^2 + b s_b + c = 0``; the
    physically admissible root is the positive one, whose existence is
    checked and reported as a hard error with the offending inputs if it
    ever fails.  Exact freezing-point equilibrium short-circuits to a melt
    rate of exactly zero.
    """
    u_m = np.asarray(sample.u_m, dtype=float)
    t_m = np.asarray(sample.t_m, dtype=float)
    s_m = np.asarray(sample.s_m, dtype=float)
    p_b = np.asarray(sample.p_b, dtype=float)
    g_t, g_s = exchange_velocities(u_m, params)

    lam1, lam2, lam3 = params.lambda1, params.lambda2, params.lambda3
    lat, t_i = params.latent_heat, params.t_ice
    c_i, c_m = params.c_i, params.c_m

    # freezing-point offset at zero salinity, and ice-to-interface heat term
    off = lam2 + lam3 * p_b
    d = off - t_i
    a = lam1 * (c_m * g_t - c_i * g_s)
    b = g_s * (c_i * lam1 * s_m - lat - c_i * d) - c_m * g_t * (t_m - off)
    c = g_s * s_m * (lat + c_i * d)

    a_arr = np.broadcast_to(np.asarray(a, dtype=float), b.shape)
    disc = b * b - 4.0 * a_arr * c
    bad_disc = disc < 0.0
    if bad_disc.any():
        i = int(np.flatnonzero(bad_disc)[0])
        raise MeltError(
            "negative discriminant in interface salinity solve: "
            f"u_m={u_m.flat[i]}, t_m={t_m.flat[i]}, s_m={s_m.flat[i]}, p_b={p_b.flat[i]}"
        )
    sq = np.sqrt(disc)
    # sign-stable quadratic roots: q/a and c/q never cancel
    q = -0.5 * (b + np.where(b >= 0.0, sq, -sq))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(a_arr != 0.0, q / np.where(a_arr != 0.0, a_arr, 1.0), np.inf)
        r2 = np.where(q != 0.0, c / np.where(q != 0.0, q, 1.0), np.inf)
        lin = np.where(b != 0.0, -c / np.where(b != 0.0, b, 1.0), np.nan)
    r1 = np.where(a_arr != 0.0, r1, lin)
    r2 = np.where(a_arr != 0.0, r2, lin)

    s_b = np.where(r1 > 0.0, r1, r2)
    good = np.isfinite(s_b) & (s_b > 0.0)
    if not good.all():
        i = int(np.flatnonzero(~good)[0])
        raise MeltError(
            "no positive interface salinity root: "
            f"u_m={u_m.flat[i]}, t_m={t_m.flat[i]}, s_m={s_m.flat[i]}, p_b={p_b.flat[i]}"
        )

    t_b = freezing_temperature(s_b, p_b, params)
    m_b = g_s * (s_m - s_b) / s_b

    # exact equilibrium: mixed layer already at its freezing point
    eq = t_m == freezing_temperature(s_m, p_b, params)
    if np.any(eq):
        s_b = np.where(eq, s_m, s_b)
        t_b = np.where(eq, t_m, t_b)
        m_b = np.where(eq, 0.0, m_b)
    return MeltSolution(s_b=s_b, t_b=t_b, m_b=m_b)


def compute_fluxes(sol, sample, params):
    """Virtual heat and salt fluxes implied by the interface solution.

    Positive values draw the tracer toward the ice, consistent with a flux
    boundary condition written against the outward normal.
    """
    g_t, g_s = exchange_velocities(sample.u_m, params)
    f_t = (g_t + sol.m_b) * (sample.t_m - sol.t_b)
    f_s = (g_s + sol.m_b) * (sample.s_m - sol.s_b)
    sol.f_t = f_t
    sol.f_s = f_s
    return f_t, f_s


def sample_mixed_layer(u_field, t_field, s_field, coords, normals, params):
    """Sample velocity and tracers a boundary-layer thickness off the ice.

    ``coords`` are ice-node positions, ``normals`` the unit outward normals
    there; the sampling point sits ``h_eps`` into the ocean.  Points that
    land outside the mesh (sharp corners, very coarse meshes) are clamped to
    the nearest interior location and counted in ``nmiss``.  The interface
    pressure is hydrostatic at the node's depth below the rigid lid.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    probe = coords - params.h_eps * normals
    probe, nmiss = nearest_inside(u_field.space.mesh, probe)
    uvals = point_evaluate(u_field, probe)
    speed = np.linalg.norm(uvals, axis=1)
    u_m = np.maximum(speed, SPEED_FLOOR)
    t_m = point_evaluate(t_field, probe)
    s_m = point_evaluate(s_field, probe)
    depth = np.maximum(0.0, -coords[:, 1])
    p_b = params.rho0 * params.g * depth
    return MixedLayerSample(u_m=u_m, t_m=t_m, s_m=s_m, p_b=p_b, nmiss=nmiss)


def smooth_fluxes(space, facet_ids, raw, c_delta):
    """Elliptic smoothing of nodal flux values along a boundary curve.

    Solves (F, w) + c_delta (dF/ds, dw/ds) = (F_raw, w) with line integrals
    over the given facets, in the trace of the scalar space on that curve.
    Taking w = 1 shows the line integral of the flux is preserved exactly.
    Off-curve coefficients of the returned field are zero.
    """
    if space.ncomp != 1:
        raise ValueError("smooth_fluxes expects a scalar space")
    out = space.new_field()
    facet_ids = np.asarray(facet_ids, dtype=np.int64)
    if facet_ids.size == 0:
        return out
    raw = np.asarray(raw, dtype=float)
    k = space.degree
    ftab = space.facet_node_table(facet_ids)
    nodes, inv = np.unique(ftab, return_inverse=True)
    inv = inv.reshape(ftab.shape)
    lengths = space.mesh.facet_lengths()[facet_ids]

    # 1D reference basis on [0, 1]: endpoint nodes first and last, interior
    # equispaced, matching the facet node table layout
    tpos = np.concatenate([[0.0], np.arange(1, k) / k, [1.0]])
    qp, qw = interval_rule(2 * k + 2)
    vand = np.vander(tpos, k + 1, increasing=True)
    coeff = np.linalg.inv(vand)
    powers = np.vander(qp, k + 1, increasing=True)
    dpowers = np.zeros_like(powers)
    for m in range(1, k + 1):
        dpowers[:, m] = m * qp ** (m - 1)
    phi = powers @ coeff
    dphi = dpowers @ coeff

    mass_ref = phi.T @ (qw[:, None] * phi)
    stiff_ref = dphi.T @ (qw[:, None] * dphi)
    nloc = k + 1
    blocks_a = (
        lengths[:, None, None] * mass_ref[None, :, :]
        + (c_delta / lengths)[:, None, None] * stiff_ref[None, :, :]
    )
    blocks_m = lengths[:, None, None] * mass_ref[None, :, :]

    n = nodes.size
    rows = np.repeat(inv, nloc, axis=1).ravel()
    cols = np.tile(inv, (1, nloc)).ravel()
    a = sp.coo_matrix((blocks_a.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    raw_local = raw[space.dof_at(nodes)]
    rhs = np.zeros(n)
    np.add.at(rhs, inv.ravel(), np.einsum("fij,fj->fi", blocks_m, raw_local[inv]).ravel())
    sol = spla.splu(a).solve(rhs)
    out.vec[space.dof_at(nodes)] = sol
    return out
