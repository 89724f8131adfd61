import math

import numpy as np
import pytest

from tpmhdg.exceptions import SingularLocalSystem
from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import extract_interior_mesh
from tpmhdg.geometry import generate_background_mesh
from tpmhdg.polybasis import ElementPoly
from tpmhdg.polybasis import PolySpace
from tpmhdg.polybasis import element_quadrature
from tpmhdg.polybasis import quadrature
from tpmhdg.projections import eval_facet_l2
from tpmhdg.projections import project_facet_l2
from tpmhdg.projections import project_hdg_adjoint
from tpmhdg.projections import project_hdg_state


def square_mesh(n):
    square = ImplicitDomain.square()
    return extract_interior_mesh(generate_background_mesh(square.bbox, n), square)


def constant_beta(bx, by):
    def beta(points):
        shape = np.asarray(points).shape[:-1]
        return np.stack([np.full(shape, bx), np.full(shape, by)], axis=-1)
    return beta


def sine(points):
    return np.sin(math.pi * points[..., 0]) * np.cos(points[..., 1])


def sine_flux(points):
    return np.stack([-math.pi * np.cos(math.pi * points[..., 0]) * np.cos(points[..., 1]),
                     np.sin(math.pi * points[..., 0]) * np.sin(points[..., 1])], axis=-1)


def test_facet_projection_reproduces_polynomials():
    a, b = np.array([0.2, 0.1]), np.array([0.9, 0.5])

    def cubic(points):
        return 1. + points[:, 0] - points[:, 0] * points[:, 1] ** 2

    coefs = project_facet_l2(cubic, a, b, 3)
    s = np.linspace(0., 1., 7)
    length = np.linalg.norm(b - a)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    np.testing.assert_allclose(eval_facet_l2(coefs, s, length), cubic(pts), atol=1e-12)


def test_facet_projection_orthogonality():
    a, b = np.array([0., 0.]), np.array([0.3, 0.4])
    coefs = project_facet_l2(sine, a, b, 1)
    rule = quadrature('segment', 12)
    pts = a[None, :] + rule.nodes[:, None] * (b - a)[None, :]
    residual = sine(pts) - eval_facet_l2(coefs, rule.nodes, 0.5)
    for deg in range(2):
        np.testing.assert_allclose(np.sum(rule.weights * residual * rule.nodes ** deg), 0., atol=1e-8)


def test_state_reproduces_discrete_pairs():
    rng = np.random.RandomState(0)
    mesh = square_mesh(2)
    for k in range(4):
        basis = PolySpace(k).basis(mesh)
        qc, yc = rng.normal(size=(2, basis.dim)), rng.normal(size=basis.dim)
        q, y = ElementPoly(basis, 3, qc), ElementPoly(basis, 3, yc)
        pair = project_hdg_state(q, y, mesh, 3, 1., constant_beta(1., 1.), k, basis)
        np.testing.assert_allclose(pair.vector, qc, atol=1e-10)
        np.testing.assert_allclose(pair.scalar, yc, atol=1e-10)
        adjoint = project_hdg_adjoint(q, y, mesh, 3, constant_beta(1., 1.), k, tau1=1.5, basis=basis)
        np.testing.assert_allclose(adjoint.vector, qc, atol=1e-10)
        np.testing.assert_allclose(adjoint.scalar, yc, atol=1e-10)


def test_residuals_of_smooth_inputs():
    mesh = square_mesh(2)
    for k in range(4):
        pair = project_hdg_state(sine_flux, sine, mesh, 0, 1., constant_beta(1., 0.5), k)
        assert pair.max_residual <= 1e-9
        assert pair.vector.shape == (2, (k + 1) * (k + 2) // 2)
        adjoint = project_hdg_adjoint(sine_flux, sine, mesh, 0, constant_beta(1., 0.5), k)
        assert adjoint.max_residual <= 1e-9


def test_adjoint_equals_state_without_convection():
    mesh = square_mesh(2)
    beta = constant_beta(0., 0.)
    for k in range(3):
        state = project_hdg_state(sine_flux, sine, mesh, 5, 2., beta, k)
        adjoint = project_hdg_adjoint(sine_flux, sine, mesh, 5, beta, k, tau2=2.)
        np.testing.assert_allclose(adjoint.vector, state.vector, atol=1e-12)
        np.testing.assert_allclose(adjoint.scalar, state.scalar, atol=1e-12)


def test_volume_moments_are_kept():
    mesh = square_mesh(2)
    k = 2
    pair = project_hdg_state(sine_flux, sine, mesh, 1, 1., constant_beta(1., 1.), k)
    points, weights = element_quadrature(mesh, 10, [1])
    poly = pair.scalar_poly()
    diff = poly(points[0]) - sine(points[0])
    for a, b in ((0, 0), (1, 0), (0, 1)):
        moment = np.sum(weights[0] * diff * points[0][:, 0] ** a * points[0][:, 1] ** b)
        np.testing.assert_allclose(moment, 0., atol=1e-10)


def test_singular_local_system():
    mesh = square_mesh(1)
    with pytest.raises(SingularLocalSystem):
        project_hdg_state(sine_flux, sine, mesh, 0, 0., constant_beta(0., 0.), 0)


def test_ill_conditioned_local_system():
    mesh = square_mesh(1)
    with pytest.raises(SingularLocalSystem):
        project_hdg_state(sine_flux, sine, mesh, 0, 1e-15, constant_beta(0., 0.), 0)
    pair = project_hdg_state(sine_flux, sine, mesh, 0, 1e-3, constant_beta(0., 0.), 0)
    assert pair.max_residual <= 1e-9


def facet_error(a, b, k):
    coefs = project_facet_l2(sine, a, b, k)
    rule = quadrature('segment', 12)
    length = np.linalg.norm(b - a)
    pts = a[None, :] + rule.nodes[:, None] * (b - a)[None, :]
    residual = sine(pts) - eval_facet_l2(coefs, rule.nodes, length)
    return math.sqrt(length * np.sum(rule.weights * residual ** 2))


@pytest.mark.parametrize('k', [0, 1, 2])
def test_facet_projection_rate(k):
    a = np.array([0.1, 0.2])
    errors = [facet_error(a, a + np.array([0.8, 0.6]) / 2 ** i, k) for i in range(4)]
    rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    # L2 norm over the edge, h^{k+1} times h^{1/2}
    assert rates[-1] >= k + 1.5 - 0.3


@pytest.mark.slow
@pytest.mark.parametrize('adjoint', [False, True])
@pytest.mark.parametrize('k', [0, 1, 2])
def test_projection_rates(k, adjoint):
    beta = constant_beta(1., 1.)
    errors = {'vector': [], 'scalar': []}
    for n in (4, 8, 16):
        mesh = square_mesh(n)
        basis = PolySpace(k).basis(mesh)
        points, weights = element_quadrature(mesh, 8)
        total = {'vector': 0., 'scalar': 0.}
        for element in range(mesh.n_elements):
            if adjoint:
                pair = project_hdg_adjoint(sine_flux, sine, mesh, element, beta, k, tau1=3., basis=basis)
            else:
                pair = project_hdg_state(sine_flux, sine, mesh, element, 1., beta, k, basis)
            pts = points[element]
            diff = pair.scalar_poly()(pts) - sine(pts)
            total['scalar'] += np.sum(weights[element] * diff ** 2)
            vdiff = pair.vector_poly()(pts) - sine_flux(pts)
            total['vector'] += np.sum(weights[element][:, None] * vdiff ** 2)
        for key in errors:
            errors[key].append(math.sqrt(total[key]))
    for key, values in errors.items():
        rates = np.log2(np.array(values[:-1]) / np.array(values[1:]))
        assert rates[-1] >= k + 0.8, (key, rates)
