import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fjordfem import fem
from fjordfem.mesh import BoundaryTag, generate_triangulation
from fjordfem.quadrature import triangle_rule


def unit_square(nx, ny=None, **kw):
    return generate_triangulation((0, 0, 1, 1), nx, ny or nx, **kw)


# -- space construction -----------------------------------------------------

def test_dof_counts_two_cell_mesh():
    m = unit_square(1, diagonal="right")
    assert fem.FunctionSpace(m, 1).ndof == 4
    assert fem.FunctionSpace(m, 2).ndof == 9
    assert fem.FunctionSpace(m, 3, ncomp=2).ndof == 32


def test_dof_counts_structured():
    nx = 4
    m = unit_square(nx)
    nv, ne, nc = m.num_vertices, len(m.edges()), m.num_cells
    assert fem.FunctionSpace(m, 2).ndof == nv + ne
    assert fem.FunctionSpace(m, 3).ndof == nv + 2 * ne + nc
    assert fem.FunctionSpace(m, 4).ndof == nv + 3 * ne + 3 * nc


def test_shared_edge_nodes_consistent():
    # nodal coordinates referenced from both sides of an interior edge agree
    m = unit_square(3, perturbation=0.2, seed=1)
    for k in (2, 3, 4):
        space = fem.FunctionSpace(m, k)
        seen = {}
        for c in range(m.num_cells):
            for ln, node in enumerate(space.cell_nodes[c]):
                ref = space.ref.nodes[ln]
                jac, _, _ = m.geometry()
                phys = m.vertices[m.cells[c, 0]] + jac[c] @ ref
                if node in seen:
                    assert np.allclose(seen[node], phys, atol=1e-12)
                else:
                    seen[node] = phys


def test_partition_of_unity():
    m = unit_square(3, perturbation=0.15, seed=4)
    for k in (1, 2, 3, 4):
        space = fem.FunctionSpace(m, k)
        tab = space.tabulation(2 * k + 2)
        assert np.allclose(tab.phi.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(tab.gradref.sum(axis=1), 0.0, atol=1e-11)


# -- interpolation and evaluation -------------------------------------------

def test_interpolate_exact_for_polynomials():
    m = unit_square(3, perturbation=0.2, seed=9)
    for k in (1, 2, 3, 4):
        space = fem.FunctionSpace(m, k)

        def f(x, y, k=k):
            return (x + 0.5 * y) ** k - 2.0 * x * y ** (k - 1)

        field = fem.interpolate(space, f)
        err = fem.error_norms(field, f)
        assert err["L2"] < 1e-12
        assert err["Linf"] < 1e-11


def test_point_evaluate_linear():
    m = unit_square(4, perturbation=0.1, seed=2)
    space = fem.FunctionSpace(m, 1)
    field = fem.interpolate(space, lambda x, y: x + 2 * y)
    got = fem.point_evaluate(field, [(0.3, 0.4)])
    assert got[0] == pytest.approx(1.1, abs=1e-12)


def test_point_evaluate_outside_raises():
    m = unit_square(2)
    space = fem.FunctionSpace(m, 1)
    field = fem.interpolate(space, lambda x, y: x)
    with pytest.raises(fem.OutOfDomainError):
        fem.point_evaluate(field, [(1.5, 0.5)])


def test_nearest_inside_projects():
    m = unit_square(2)
    pts, nmiss = fem.nearest_inside(m, [(1.5, 0.5), (0.25, 0.25)])
    assert nmiss == 1
    cells, _ = fem.locate_points(m, pts)
    assert np.all(cells >= 0)
    assert np.allclose(pts[1], (0.25, 0.25))


def test_error_norms_constant_mismatch():
    m = unit_square(2)
    space = fem.FunctionSpace(m, 1)
    zero = space.new_field()
    err = fem.error_norms(zero, lambda x, y: np.ones_like(x))
    assert err["L1"] == pytest.approx(1.0, abs=1e-13)
    assert err["L2"] == pytest.approx(1.0, abs=1e-13)
    assert err["Linf"] == pytest.approx(1.0, abs=1e-13)


def test_interpolation_rate_tanh_disk():
    # smooth but localized profile; degree-2 interpolation converges at order 3
    def f(x, y):
        d2 = (x - 0.5) ** 2 + (y - 0.5) ** 2
        return 2.0 + 0.5 * (1.0 - np.tanh(d2 / 0.25 ** 2 - 1.0))

    errs, ns = [], []
    for nx in (8, 16, 32):
        m = unit_square(nx)
        space = fem.FunctionSpace(m, 2)
        errs.append(fem.error_norms(fem.interpolate(space, f), f)["L2"])
        ns.append(space.ndof)
    r1 = np.log(errs[0] / errs[1]) / np.log(np.sqrt(ns[1] / ns[0]))
    r2 = np.log(errs[1] / errs[2]) / np.log(np.sqrt(ns[2] / ns[1]))
    assert 2.5 < r1 < 3.6
    assert 2.7 < r2 < 3.3


# -- assembly ---------------------------------------------------------------

def test_mass_matrix_total_area():
    m = unit_square(3, perturbation=0.2, seed=6)
    for k in (1, 2, 3):
        space = fem.FunctionSpace(m, k)
        M = fem.mass_matrix(space)
        ones = np.ones(space.ndof)
        assert ones @ (M @ ones) == pytest.approx(1.0, abs=1e-12)


def test_stiffness_kernel_contains_constants():
    m = unit_square(3, perturbation=0.1, seed=8)
    space = fem.FunctionSpace(m, 2)
    K = fem.stiffness_matrix(space)
    ones = np.ones(space.ndof)
    assert np.abs(K @ ones).max() < 1e-12


def test_stiffness_quadratic_energy():
    # int |grad(x^2)|^2 over unit square = int 4 x^2 = 4/3
    m = unit_square(4, perturbation=0.15, seed=3)
    space = fem.FunctionSpace(m, 2)
    f = fem.interpolate(space, lambda x, y: x ** 2)
    K = fem.stiffness_matrix(space)
    assert f.vec @ (K @ f.vec) == pytest.approx(4.0 / 3.0, rel=1e-12)


def test_vector_mass_block_structure():
    m = unit_square(2)
    space = fem.FunctionSpace(m, 2, ncomp=2)
    M = fem.mass_matrix(space)
    u = fem.interpolate(space, lambda x, y: np.stack([x, -y], axis=-1))
    # int (x^2 + y^2) = 2/3
    assert u.vec @ (M @ u.vec) == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_apply_dirichlet_symmetric():
    m = unit_square(4)
    space = fem.FunctionSpace(m, 1)
    A = fem.stiffness_matrix(space) + fem.mass_matrix(space)
    b = np.ones(space.ndof)
    bnd = space.boundary_nodes()
    A2, b2 = fem.apply_dirichlet(A, b, bnd, np.zeros(len(bnd)))
    assert np.abs((A2 - A2.T)).max() < 1e-14
    x = np.linalg.solve(A2.toarray(), b2)
    assert np.abs(x[bnd]).max() == 0.0


def test_apply_dirichlet_inhomogeneous_quadratic():
    # -laplace u = 0 with u = x on the boundary has exact solution u = x
    m = unit_square(3, perturbation=0.1, seed=5)
    space = fem.FunctionSpace(m, 2)
    A = fem.stiffness_matrix(space)
    b = np.zeros(space.ndof)
    bnd = space.boundary_nodes()
    vals = space.node_coords[bnd, 0]
    A2, b2 = fem.apply_dirichlet(A, b, bnd, vals)
    x = np.linalg.solve(A2.toarray(), b2)
    assert np.allclose(x, space.node_coords[:, 0], atol=1e-11)


# -- projections ------------------------------------------------------------

def test_projection_reproduces_polynomials():
    m = unit_square(3, perturbation=0.2, seed=12)
    space = fem.FunctionSpace(m, 2)
    tab = space.tabulation(space.default_qdegree())
    pts = tab.qpoints_phys()
    f_q = (pts[..., 0] + 2 * pts[..., 1]) ** 2
    proj, ok = fem.project_qdata(space, f_q)
    assert ok
    err = fem.error_norms(proj, lambda x, y: (x + 2 * y) ** 2)
    assert err["L2"] < 1e-12


def test_weighted_projection_zero_weight_flag():
    m = unit_square(2)
    space = fem.FunctionSpace(m, 1)
    tab = space.tabulation(space.default_qdegree())
    f_q = np.ones_like(tab.wdet)
    proj, ok = fem.project_qdata(space, f_q, weight_q=np.zeros_like(f_q))
    assert not ok
    assert np.all(proj.vec == 0.0)


def test_weighted_projection_constant():
    m = unit_square(3, perturbation=0.1, seed=2)
    space = fem.FunctionSpace(m, 2)
    tab = space.tabulation(space.default_qdegree())
    pts = tab.qpoints_phys()
    w_q = 1.0 + pts[..., 0] ** 2
    f_q = np.full_like(w_q, 3.25)
    proj, ok = fem.project_qdata(space, f_q, weight_q=w_q)
    assert ok
    assert np.allclose(proj.vec, 3.25, atol=1e-11)


def test_smoothing_shrinks_spike_maximum():
    m = unit_square(5)
    space = fem.FunctionSpace(m, 1)
    spike = space.new_field()
    mid = np.argmin(np.einsum("nd,nd->n", space.node_coords - 0.5, space.node_coords - 0.5))
    spike.vec[mid] = 1.0
    tab = space.tabulation(space.default_qdegree())
    f_q = tab.eval_scalar(spike.vec)
    h2 = fem.cellwise_to_q(tab, np.full(m.num_cells, (1.0 / 5.0) ** 2))
    prev = 1.0
    for c_delta in (0.0, 1.0, 10.0):
        proj, ok = fem.project_qdata(space, f_q, smooth_q=c_delta * h2)
        assert ok
        mx = proj.vec.max()
        if c_delta > 0:
            assert mx < prev
        prev = mx


# -- nodal mesh size --------------------------------------------------------

def test_mesh_size_uniform_equals_sqrt_area():
    m = unit_square(1, diagonal="right")
    for k in (1, 2):
        space = fem.FunctionSpace(m, k)
        h = fem.compute_nodal_mesh_size(m, space, c_delta=10.0)
        assert np.allclose(h.vec, np.sqrt(0.5) / k, atol=1e-12)


def test_mesh_size_two_cell_hand_system():
    # dense oracle: assemble the 4x4 system (M + 10 K_A) h = M_rhs directly
    m = unit_square(1, diagonal="right")
    space = fem.FunctionSpace(m, 1)
    tab = space.tabulation(space.default_qdegree())
    areas = m.cell_areas()
    M = fem.mass_matrix(space).toarray()
    KA = fem.stiffness_matrix(space, coeff_q=fem.cellwise_to_q(tab, areas)).toarray()
    rhs = fem.load_vector(space, tab, fem.cellwise_to_q(tab, np.sqrt(areas)))
    hand = np.linalg.solve(M + 10.0 * KA, rhs)
    h = fem.compute_nodal_mesh_size(m, space, c_delta=10.0)
    assert np.allclose(h.vec, hand, atol=1e-12)


def test_mesh_size_positive_and_scales():
    m = unit_square(8, perturbation=0.2, seed=21)
    space = fem.FunctionSpace(m, 2)
    h = fem.compute_nodal_mesh_size(m, space)
    assert np.all(h.vec > 0)
    m2 = unit_square(16, perturbation=0.2, seed=21)
    h2 = fem.compute_nodal_mesh_size(m2, fem.FunctionSpace(m2, 2))
    assert h2.vec.mean() == pytest.approx(0.5 * h.vec.mean(), rel=0.1)


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=8, deadline=None)
def test_mesh_size_invariant_under_renumbering(seed):
    rng = np.random.default_rng(seed)
    m = unit_square(3)
    perm = rng.permutation(m.num_vertices)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    from fjordfem.mesh import Mesh
    m2 = Mesh(m.vertices[perm], inv[m.cells], inv[m.boundary_facets], m.facet_tags)
    s1 = fem.FunctionSpace(m, 1)
    s2 = fem.FunctionSpace(m2, 1)
    h1 = fem.compute_nodal_mesh_size(m, s1)
    h2 = fem.compute_nodal_mesh_size(m2, s2)
    # degree-1 nodes are the vertices; m2 vertex j sits at m vertex perm[j]
    assert np.allclose(h1.vec[perm], h2.vec, atol=1e-10)


# -- boundary machinery -----------------------------------------------------

def test_boundary_normals_square_sides():
    m = unit_square(3, side_tags={"left": BoundaryTag.GROUNDING_LINE})
    space = fem.FunctionSpace(m, 2)
    nodes, normals, ok = fem.boundary_normals(space, BoundaryTag.GROUNDING_LINE)
    assert np.all(ok)
    # interior-of-side nodes average two collinear facets: exactly (-1, 0)
    for n, nrm in zip(nodes, normals):
        x, y = space.node_coords[n]
        assert x == pytest.approx(0.0, abs=1e-12)
        if 1e-6 < y < 1 - 1e-6:
            assert np.allclose(nrm, (-1.0, 0.0), atol=1e-12)


def test_boundary_normals_corner_average():
    m = unit_square(2)
    space = fem.FunctionSpace(m, 1)
    nodes, normals, ok = fem.boundary_normals(space, BoundaryTag.WALL)
    corner = np.nonzero((space.node_coords[nodes, 0] == 0.0) & (space.node_coords[nodes, 1] == 0.0))[0]
    assert len(corner) == 1
    got = normals[corner[0]]
    expect = np.array([-1.0, -1.0]) / np.sqrt(2.0)
    assert np.allclose(got, expect, atol=1e-12)


def test_facet_tabulation_integrates_lengths():
    m = unit_square(4, side_tags={"top": BoundaryTag.ICE})
    space = fem.FunctionSpace(m, 2)
    ft = fem.FacetTabulation(space, m.facets_with_tag(BoundaryTag.ICE), 5)
    assert ft.integrate(np.ones_like(ft.wlen)) == pytest.approx(1.0, abs=1e-13)
    # integrate x over the top edge: 1/2
    vals = ft.points[..., 0]
    assert ft.integrate(vals) == pytest.approx(0.5, abs=1e-13)


def test_facet_eval_matches_field():
    m = unit_square(3, perturbation=0.1, seed=13, side_tags={"right": BoundaryTag.OPEN_OCEAN})
    space = fem.FunctionSpace(m, 3)
    field = fem.interpolate(space, lambda x, y: x ** 3 - y ** 2 + 0.5)
    ft = fem.FacetTabulation(space, m.facets_with_tag(BoundaryTag.OPEN_OCEAN), 7)
    got = ft.eval_scalar(field.vec)
    pts = ft.points
    want = pts[..., 0] ** 3 - pts[..., 1] ** 2 + 0.5
    assert np.allclose(got, want, atol=1e-12)
