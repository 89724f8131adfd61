import numpy as np
import pandas as pd
import pytest

from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import extract_interior_mesh
from tpmhdg.geometry import generate_background_mesh
from tpmhdg.geometry import generate_interpolated_mesh
from tpmhdg.polybasis import admissibility_constants
from tpmhdg.transfer import build_transfer_map
from tpmhdg.transfer import check_closeness


def constant_beta(points):
    return np.ones(np.asarray(points).shape)


def circle_map(n=8, strategy='facet-normal'):
    domain = ImplicitDomain.circle()
    mesh = extract_interior_mesh(generate_background_mesh(domain.bbox, n), domain)
    return mesh, build_transfer_map(mesh, domain, strategy, quad_order=4)


def test_fitted_square_has_empty_paths():
    square = ImplicitDomain.square()
    mesh = extract_interior_mesh(generate_background_mesh(square.bbox, 4), square)
    tmap = build_transfer_map(mesh, square, quad_order=4)
    assert tmap.n_facets == 16
    np.testing.assert_allclose(tmap.lengths, 0., atol=1e-12)
    np.testing.assert_allclose(tmap.r_e, 0., atol=1e-10)
    np.testing.assert_allclose(tmap.mapped, tmap.points, atol=1e-12)
    assert tmap.R <= 1e-10


def test_fitted_square_is_admissible():
    square = ImplicitDomain.square()
    mesh = extract_interior_mesh(generate_background_mesh(square.bbox, 4), square)
    tmap = build_transfer_map(mesh, square, quad_order=4)
    constants = admissibility_constants(mesh, tmap, 1)
    report = check_closeness(tmap, 1., constant_beta, constants)
    assert report.passed


def test_circle_paths_end_on_boundary():
    mesh, tmap = circle_map()
    domain = ImplicitDomain.circle()
    assert np.all(tmap.lengths > 0.)
    np.testing.assert_allclose(domain.evaluate(tmap.mapped), 0., atol=1e-10)
    np.testing.assert_allclose(domain.evaluate(tmap.vertex_mapped), 0., atol=1e-10)
    assert tmap.segments_inside.all()
    assert tmap.n_nonbijective == 0


def test_facet_normal_directions():
    _, tmap = circle_map()
    np.testing.assert_allclose(tmap.beta_e, 1.)
    np.testing.assert_allclose(tmap.t_norm, 0., atol=1e-14)
    frame = tmap.m_conditions()
    assert frame['cond1'].all() and frame['cond2'].all() and frame['cond3'].all()


def test_vertex_averaged_directions():
    _, tmap = circle_map(strategy='vertex-averaged-normal')
    np.testing.assert_allclose(np.linalg.norm(tmap.directions, axis=2), 1.)
    assert np.all(tmap.beta_e > 0.)
    np.testing.assert_allclose(ImplicitDomain.circle().evaluate(tmap.mapped), 0., atol=1e-10)


def test_unknown_strategy():
    mesh, _ = circle_map(4)
    with pytest.raises(ValueError):
        build_transfer_map(mesh, ImplicitDomain.circle(), 'closest-point')


def test_proximity_exponent_interpolated_circle():
    domain = ImplicitDomain.circle()
    coarse = generate_interpolated_mesh(domain, domain.bbox, 16)
    fine = generate_interpolated_mesh(domain, domain.bbox, 32)
    tcoarse = build_transfer_map(coarse, domain, quad_order=4)
    tfine = build_transfer_map(fine, domain, quad_order=4)
    assert tfine.proximity_exponent(tcoarse) >= 0.8


def test_report_files(tmp_path):
    mesh, tmap = circle_map()
    constants = admissibility_constants(mesh, tmap, 1)
    report = check_closeness(tmap, 1., constant_beta, constants)
    filename = str(tmp_path / 'admissibility.csv')
    report.to_csv(filename)
    frame = pd.read_csv(filename)
    assert len(frame) == tmap.n_facets
    assert (tmp_path / 'admissibility.summary.csv').exists()


def test_path_lengths_bounded_by_mesh_size():
    mesh, tmap = circle_map()
    assert tmap.lengths.max() <= 2. * mesh.h_max
    assert tmap.vertex_lengths.max() <= 2. * mesh.h_max


@pytest.mark.parametrize('n', [16, 32])
def test_kidney_falls_back_near_notch(n):
    kidney = ImplicitDomain.kidney()
    mesh = extract_interior_mesh(generate_background_mesh(kidney.bbox, n), kidney)
    tmap = build_transfer_map(mesh, kidney, quad_order=4)
    assert tmap.n_fallback > 0
    np.testing.assert_allclose(kidney.evaluate(tmap.mapped), 0., atol=1e-9)
    np.testing.assert_allclose(kidney.evaluate(tmap.vertex_mapped), 0., atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(tmap.directions, axis=2), 1.)


def test_no_fallback_on_circle():
    _, tmap = circle_map()
    assert tmap.n_fallback == 0
