import numpy as np
import pytest

from tpmhdg.exceptions import UnsupportedOrder
from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import Triangulation
from tpmhdg.geometry import extract_interior_mesh
from tpmhdg.geometry import generate_background_mesh
from tpmhdg.polybasis import ElementPoly
from tpmhdg.polybasis import PolySpace
from tpmhdg.polybasis import admissibility_constants
from tpmhdg.polybasis import edge_basis
from tpmhdg.polybasis import element_quadrature
from tpmhdg.polybasis import ext_constant
from tpmhdg.polybasis import facet_quadrature
from tpmhdg.polybasis import extrapolate_eval
from tpmhdg.polybasis import inv_constant
from tpmhdg.polybasis import lambda_bounds
from tpmhdg.polybasis import lambda_eval
from tpmhdg.polybasis import poly_dim
from tpmhdg.polybasis import quadrature
from tpmhdg.polybasis import trace_constant
from tpmhdg.polybasis import triple_norm
from tpmhdg.transfer import TransferMap
from tpmhdg.transfer import build_transfer_map
from tpmhdg.verification import quadrature_suite


def square_mesh(n=2):
    square = ImplicitDomain.square()
    return extract_interior_mesh(generate_background_mesh(square.bbox, n), square)


def test_quadrature_monomials():
    rows = quadrature_suite()
    worst = max(row['value'] for row in rows)
    assert worst <= 1e-10


def test_quadrature_weights():
    for exactness in range(13):
        np.testing.assert_allclose(quadrature('triangle', exactness).weights.sum(), 0.5)
        np.testing.assert_allclose(quadrature('segment', exactness).weights.sum(), 1.)


def test_quadrature_unsupported():
    with pytest.raises(UnsupportedOrder):
        quadrature('triangle', 13)


def test_poly_dim():
    assert [poly_dim(k) for k in range(4)] == [1, 3, 6, 10]


def test_gram_identity():
    mesh = square_mesh(3)
    for k in range(4):
        basis = PolySpace(k).basis(mesh)
        assert np.abs(basis.mass(mesh) - np.eye(poly_dim(k))).max() <= 1e-10


def test_basis_nested():
    mesh = square_mesh(2)
    points, _ = element_quadrature(mesh, 4)
    low = PolySpace(1).basis(mesh).eval(points)
    high = PolySpace(3).basis(mesh).eval(points)
    np.testing.assert_allclose(high[..., :3], low, atol=1e-10)


def test_edge_basis_orthonormal():
    rule = quadrature('segment', 8)
    mu = edge_basis(rule.nodes, 3)
    np.testing.assert_allclose(np.einsum('q,qi,qj->ij', rule.weights, mu, mu), np.eye(4), atol=1e-12)


def test_from_nodal_reproduces_polynomial():
    mesh = square_mesh(2)
    basis = PolySpace(2).basis(mesh)

    def fn(x):
        return 1. + x[..., 0] - 2. * x[..., 0] * x[..., 1] + x[..., 1] ** 2

    poly = ElementPoly.from_nodal(basis, mesh, 3, fn)
    pts = np.array([[0.2, 0.7], [2., -1.], [0.5, 0.5]])
    np.testing.assert_allclose(poly(pts), fn(pts), atol=1e-10)


def test_project_matches_gradient():
    mesh = square_mesh(2)
    basis = PolySpace(1).basis(mesh)
    poly = ElementPoly.project(basis, mesh, 0, lambda x: 3. * x[..., 0] - x[..., 1])
    np.testing.assert_allclose(poly.grad(np.array([[0.1, 0.1]])), [[3., -1.]], atol=1e-10)


def test_inverse_constant_k0():
    mesh = square_mesh(2)
    assert inv_constant(mesh, 0, 0) == 0.


def test_constants_fitted_square():
    mesh = square_mesh(2)
    tmap = build_transfer_map(mesh, ImplicitDomain.square(), quad_order=4)
    constants = admissibility_constants(mesh, tmap, 1)
    np.testing.assert_array_equal(constants['C_ext'], 0.)
    assert constants['C_tr'] > 0.
    assert np.all(constants['C_inv'] > 0.)


def test_lambda_empty_path():
    mesh = square_mesh(2)
    tmap = build_transfer_map(mesh, ImplicitDomain.square(), quad_order=4)
    basis = PolySpace(1).basis(mesh)
    poly = ElementPoly(basis, tmap.owners[0], np.ones((2, 3)))
    assert lambda_eval(poly, 0, tmap, 0) == 0.


def test_lambda_constant_field_vanishes():
    domain = ImplicitDomain.circle()
    mesh = extract_interior_mesh(generate_background_mesh(domain.bbox, 8), domain)
    tmap = build_transfer_map(mesh, domain, quad_order=4)
    basis = PolySpace(1).basis(mesh)
    b = int(np.argmax(tmap.r_e))
    coefs = np.zeros((2, 3))
    coefs[:, 0] = [1., -2.]
    poly = ElementPoly(basis, tmap.owners[b], coefs)
    for node in range(tmap.points.shape[1]):
        assert abs(lambda_eval(poly, b, tmap, node)) <= 1e-12


def test_lambda_bounds_random_fields():
    rng = np.random.RandomState(0)
    domain = ImplicitDomain.circle()
    mesh = extract_interior_mesh(generate_background_mesh(domain.bbox, 8), domain)
    k = 1
    tmap = build_transfer_map(mesh, domain, quad_order=2 * k + 2)
    basis = PolySpace(k).basis(mesh)
    constants = admissibility_constants(mesh, tmap, k, basis)
    patches = [b for b in range(tmap.n_facets) if tmap.r_e[b] > 0.][:5]
    assert patches
    for b in patches:
        for _ in range(10):
            poly = ElementPoly(basis, tmap.owners[b], rng.normal(size=(2, basis.dim)))
            lhs, rhs_a, rhs_b = lambda_bounds(poly, b, tmap, constants['C_ext'][b], constants['C_inv'][b], mesh)
            assert lhs <= rhs_a * (1. + 1e-9) + 1e-14
            assert lhs <= rhs_b * (1. + 1e-9) + 1e-14


def test_extrapolation_outside_element():
    mesh = square_mesh(2)
    basis = PolySpace(1).basis(mesh)
    poly = ElementPoly.from_nodal(basis, mesh, 0, lambda x: x[..., 0])
    np.testing.assert_allclose(extrapolate_eval(poly, np.array([[3., -2.]])), [3.], atol=1e-10)


def test_lambda_linear_closed_form():
    mesh = square_mesh(2)
    basis = PolySpace(1).basis(mesh)
    poly = ElementPoly.from_nodal(basis, mesh, 0, lambda x: np.stack([x[..., 0], np.zeros(len(x))], axis=-1))
    tmap = TransferMap(points=np.array([[[0.1, 0.1]]]), directions=np.array([[[1., 0.]]]),
                       lengths=np.array([[0.3]]))
    np.testing.assert_allclose(lambda_eval(poly, 0, tmap, 0), -0.15, atol=1e-12)


def circle_map(n=8, k=1):
    domain = ImplicitDomain.circle()
    mesh = extract_interior_mesh(generate_background_mesh(domain.bbox, n), domain)
    return mesh, build_transfer_map(mesh, domain, quad_order=2 * k + 2)


def test_gradient_shape_and_values():
    mesh = square_mesh(2)
    eps = 1e-6
    for k in range(4):
        basis = PolySpace(k).basis(mesh)
        points, _ = element_quadrature(mesh, 2)
        grad = basis.grad(points)
        assert grad.shape == basis.eval(points).shape + (2,)
        for d in range(2):
            shift = np.zeros(2)
            shift[d] = eps
            fd = (basis.eval(points + shift) - basis.eval(points - shift)) / (2. * eps)
            np.testing.assert_allclose(grad[..., d], fd, atol=1e-5)


def test_trace_constant_bounds_boundary_norm():
    rng = np.random.RandomState(1)
    mesh = Triangulation([[0., 0.], [1., 0.], [0., 1.]], [[0, 1, 2]])
    h = mesh.diameters[0]
    for k in range(4):
        basis = PolySpace(k).basis(mesh)
        c_tr = trace_constant(mesh, 0, k, basis)
        _, fpoints, fweights = facet_quadrature(mesh, 2 * k, mesh.element_facets[0])
        phif = basis.eval(fpoints.reshape(1, -1, 2))[0]
        worst = 0.
        for _ in range(200):
            coefs = rng.normal(size=basis.dim)
            boundary = np.sum(fweights.ravel() * (phif @ coefs) ** 2)
            # orthonormal basis: ||v||_K^2 = |coefs|^2
            worst = max(worst, h * boundary / np.sum(coefs ** 2))
        assert worst <= c_tr ** 2 * (1. + 1e-9)
        assert worst >= 0.25 * c_tr ** 2


def test_trace_constant_k0_closed_form():
    mesh = Triangulation([[0., 0.], [1., 0.], [0., 1.]], [[0, 1, 2]])
    perimeter = 2. + np.sqrt(2.)
    np.testing.assert_allclose(trace_constant(mesh, 0, 0) ** 2, np.sqrt(2.) * perimeter / 0.5)


def test_constants_scale_invariant():
    vertices = np.array([[0., 0.], [1., 0.2], [0.3, 0.9]])
    small = Triangulation(vertices, [[0, 1, 2]])
    large = Triangulation(2. * vertices + 5., [[0, 1, 2]])
    for k in range(1, 4):
        np.testing.assert_allclose(inv_constant(large, 0, k), inv_constant(small, 0, k), rtol=1e-10)
        np.testing.assert_allclose(trace_constant(large, 0, k), trace_constant(small, 0, k), rtol=1e-10)


def test_ext_constant_k0_closed_form():
    mesh, tmap = circle_map(k=0)
    for b in np.nonzero(tmap.r_e > 0.)[0][:5]:
        owner = tmap.owners[b]
        patch = np.sum(tmap.weights[b] * tmap.lengths[b])
        expected = np.sqrt(patch / (mesh.areas[owner] * tmap.r_e[b]))
        np.testing.assert_allclose(ext_constant(mesh, b, tmap, 0), expected, rtol=1e-10)


def test_triple_norm_constant_field():
    mesh, tmap = circle_map()
    basis = PolySpace(1).basis(mesh)
    b = int(np.argmax(tmap.r_e))
    owner = tmap.owners[b]
    coefs = np.zeros((2, 3))
    coefs[:, 0] = [3., 4.]
    poly = ElementPoly(basis, owner, coefs)
    patch = np.sum(tmap.weights[b] * tmap.lengths[b])
    np.testing.assert_allclose(triple_norm(poly, b, tmap), 5. * np.sqrt(patch / mesh.areas[owner]), rtol=1e-10)
    double = ElementPoly(basis, owner, 2. * coefs)
    np.testing.assert_allclose(triple_norm(double, b, tmap), 2. * triple_norm(poly, b, tmap))


def test_lambda_bounds_nonpositive_beta():
    mesh, tmap = circle_map()
    basis = PolySpace(1).basis(mesh)
    constants = admissibility_constants(mesh, tmap, 1, basis)
    b = int(np.argmax(tmap.r_e))
    tmap.beta_e = tmap.beta_e.copy()
    tmap.beta_e[b] = -0.2
    poly = ElementPoly(basis, tmap.owners[b], np.random.RandomState(0).normal(size=(2, 3)))
    lhs, rhs_a, rhs_b = lambda_bounds(poly, b, tmap, constants['C_ext'][b], constants['C_inv'][b], mesh)
    assert np.isnan(rhs_a)
    assert np.isfinite(lhs) and np.isfinite(rhs_b)
