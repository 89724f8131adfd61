import math

import numpy as np
import pandas as pd
import pytest

from tpmhdg.exceptions import DegenerateRatio
from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import extract_interior_mesh
from tpmhdg.geometry import generate_background_mesh
from tpmhdg.hdg import HDGSolution
from tpmhdg.polybasis import PolySpace
from tpmhdg.verification import REPORT_COLUMNS
from tpmhdg.verification import ConvergenceRecord
from tpmhdg.verification import ExactSolution
from tpmhdg.verification import derive_data
from tpmhdg.verification import eoc
from tpmhdg.verification import eoc_pair
from tpmhdg.verification import example_solution
from tpmhdg.verification import l2_errors
from tpmhdg.verification import run_property_suites
from tpmhdg.verification import run_study
from tpmhdg.verification import write_study


def test_example_data():
    exact, domain = example_solution(1)
    data = derive_data(exact)
    np.testing.assert_allclose(data.f(np.array([0., 0.])), math.pi)
    np.testing.assert_allclose(data.y_d(np.array([0.5, 0.5])), 2. * math.pi ** 2 + 1.)
    assert domain.name == 'circle'


def test_example_velocity_is_solenoidal():
    pts = np.random.RandomState(0).uniform(-1., 1., size=(50, 2))
    for example in (1, 2):
        data = derive_data(example_solution(example)[0])
        np.testing.assert_allclose(data.divergence(pts), 0., atol=1e-8)


def test_derivatives():
    for example in (1, 2):
        exact, _ = example_solution(example)
        assert exact.check_derivatives(random_state=0) <= 1e-5


def test_unknown_example():
    with pytest.raises(ValueError):
        example_solution(3)


def test_eoc_value():
    np.testing.assert_allclose(eoc_pair(3.88e-4, 9.44e-5, 1680, 7000), 1.98, atol=5e-3)


def test_eoc_identical_errors():
    assert eoc_pair(1e-3, 1e-3, 100, 400) == 0.


def test_eoc_degenerate():
    with pytest.raises(DegenerateRatio):
        eoc_pair(1e-3, 1e-4, 400, 400)
    with pytest.raises(DegenerateRatio):
        eoc_pair(0., 1e-4, 100, 400)
    with pytest.raises(DegenerateRatio):
        eoc([ConvergenceRecord(1, 1, 100, 0.1, {})])


def test_eoc_records():
    errors = [{'e_' + v: 4. ** -i for v in ('y', 'q', 'yhat', 'z', 'p', 'zhat')} for i in range(3)]
    records = [ConvergenceRecord(1, 1, 100 * 4 ** i, 0.1 / 2 ** i, errors[i]) for i in range(3)]
    eoc(records)
    assert records[0].orders == {}
    np.testing.assert_allclose(records[2].orders['ord_q'], 2.)
    assert np.isnan(records[0].row()['ord_y'])


def test_error_homogeneity():
    square = ImplicitDomain.square()
    mesh = extract_interior_mesh(generate_background_mesh(square.bbox, 2), square)
    basis = PolySpace(1).basis(mesh)
    rng = np.random.RandomState(0)
    nel, nf = mesh.n_elements, mesh.n_facets
    fields = dict(q=rng.normal(size=(nel, 2, 3)), y=rng.normal(size=(nel, 3)), yhat=rng.normal(size=(nf, 2)),
                  p=rng.normal(size=(nel, 2, 3)), z=rng.normal(size=(nel, 3)), zhat=rng.normal(size=(nf, 2)))
    zero = ExactSolution('0', '0', (0, 0))
    one = l2_errors(HDGSolution(alpha=1., degree=1, basis=basis, **fields), zero, mesh)
    two = l2_errors(HDGSolution(alpha=1., degree=1, basis=basis, **{k: 2. * v for k, v in fields.items()}),
                    zero, mesh)
    for key in one:
        np.testing.assert_allclose(two[key], 2. * one[key])
    # orthonormal element bases
    np.testing.assert_allclose(one['e_y'], np.linalg.norm(fields['y']))


def test_study_report(tmp_path):
    records = run_study(1, 0, levels=[4, 8])
    assert all(rec.ok for rec in records)
    assert records[0].N < records[1].N
    frame = write_study(records, str(tmp_path), 'study')
    assert list(frame.columns) == REPORT_COLUMNS
    written = pd.read_csv(str(tmp_path / 'study.csv'))
    assert list(written.columns) == REPORT_COLUMNS
    assert np.isnan(written['ord_y'][0])
    assert np.isfinite(written['ord_y'][1])
    text = (tmp_path / 'study.md').read_text()
    assert 'order y' in text and 'order zhat' in text


def test_study_is_deterministic(tmp_path):
    first = write_study(run_study(1, 0, levels=[4, 8]), str(tmp_path), 'first')
    second = write_study(run_study(1, 0, levels=[4, 8], n_jobs=2), str(tmp_path), 'second')
    pd.testing.assert_frame_equal(first, second)
    assert (tmp_path / 'first.csv').read_bytes() == (tmp_path / 'second.csv').read_bytes()


def test_failed_level_is_recorded():
    records = run_study(1, 0, levels=[1, 4])
    assert not records[0].ok
    assert 'EmptyMesh' in records[0].status
    assert records[1].ok
    assert records[1].orders == {}


@pytest.mark.parametrize('k', [1, 2])
def test_property_suites(k):
    frame = run_property_suites(k, n=8, random_state=0)
    assert set(frame['suite']) >= {'quadrature', 'gram', 'projection', 'lambda'}
    assert frame['passed'].all()


RATE_TOL = 0.25
# finest-level orders reported for the circle at k = 2, above k + 1
K2_REFERENCE = {'z': 3.20, 'p': 3.46}


@pytest.mark.slow
@pytest.mark.parametrize('example,k', [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)])
def test_convergence_rates(example, k):
    records = run_study(example, k, levels=[8, 16, 32, 64])
    assert all(rec.ok for rec in records), [rec.status for rec in records]
    orders = records[-1].orders
    for var in ('y', 'q', 'z', 'p'):
        order = orders['ord_' + var]
        if example == 2 and k == 0 and var == 'z':
            # adjoint is pre-asymptotic at k = 0 on these levels
            assert order >= 0.5, var
            continue
        upper = max(k + 1, K2_REFERENCE.get(var, 0.) if k == 2 else 0.)
        assert k + 1 - RATE_TOL <= order <= upper + RATE_TOL, (var, order)
