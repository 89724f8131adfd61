""" Manufactured solutions, error norms, convergence studies and the
numerical property suites.
"""
import logging
import math
import os
from dataclasses import dataclass
from dataclasses import field

import numpy as np
import pandas as pd
import sympy
from joblib import Parallel
from joblib import delayed
from sklearn.utils import check_random_state

from tpmhdg.exceptions import DegenerateRatio
from tpmhdg.exceptions import SingularLocalSystem
from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import extract_interior_mesh
from tpmhdg.geometry import generate_background_mesh
from tpmhdg.geometry import generate_interpolated_mesh
from tpmhdg.hdg import ProblemData
from tpmhdg.hdg import assemble
from tpmhdg.hdg import select_tau
from tpmhdg.hdg import solve
from tpmhdg.polybasis import MAX_EXACTNESS
from tpmhdg.polybasis import ElementPoly
from tpmhdg.polybasis import PolySpace
from tpmhdg.polybasis import edge_basis
from tpmhdg.polybasis import element_quadrature
from tpmhdg.polybasis import ext_constant
from tpmhdg.polybasis import facet_quadrature
from tpmhdg.polybasis import inv_constant
from tpmhdg.polybasis import lambda_bounds
from tpmhdg.polybasis import monomial_exponents
from tpmhdg.polybasis import quadrature
from tpmhdg.projections import project_hdg_adjoint
from tpmhdg.projections import project_hdg_state
from tpmhdg.transfer import build_transfer_map

VARIABLES = ('y', 'q', 'yhat', 'z', 'p', 'zhat')
REPORT_COLUMNS = ['example', 'k', 'N', 'h'] + [c for v in VARIABLES for c in ('e_' + v, 'ord_' + v)]
DEFAULT_LEVELS = (8, 16, 32, 64)

_X, _Y = sympy.symbols('x y')


def _lambdify(expr):
    """ Vectorized callable points (..., 2) -> (...) of an expression in x, y. """
    fn = sympy.lambdify((_X, _Y), expr, 'numpy')

    def evaluate(points):
        points = np.asarray(points, dtype=float)
        value = fn(points[..., 0], points[..., 1])
        return np.broadcast_to(np.asarray(value, dtype=float), points.shape[:-1]).copy()
    return evaluate


def _lambdify_vector(exprs):
    comps = [_lambdify(e) for e in exprs]

    def evaluate(points):
        return np.stack([c(points) for c in comps], axis=-1)
    return evaluate


class ExactSolution(object):
    """ Closed-form state y and adjoint z with velocity beta and gamma.

    q = -grad y and p = -grad z. All fields are callables on points of
    shape (..., 2).

    Parameters
    ----------
    y, z : str or sympy.Expr
        Expressions in x and y.
    beta : tuple
        Pair of expressions.
    gamma : float
    name : str
    """
    def __init__(self, y, z, beta, gamma=1., name='custom'):
        self.y_expr = sympy.sympify(y)
        self.z_expr = sympy.sympify(z)
        self.beta_expr = [sympy.sympify(b) for b in beta]
        self.gamma = gamma
        self.name = name

        self.y = _lambdify(self.y_expr)
        self.z = _lambdify(self.z_expr)
        self.beta = _lambdify_vector(self.beta_expr)
        self.grad_y = _lambdify_vector(self._grad(self.y_expr))
        self.grad_z = _lambdify_vector(self._grad(self.z_expr))
        self.lap_y = _lambdify(self._laplacian(self.y_expr))
        self.lap_z = _lambdify(self._laplacian(self.z_expr))
        self.q = _lambdify_vector([-d for d in self._grad(self.y_expr)])
        self.p = _lambdify_vector([-d for d in self._grad(self.z_expr)])

    def __repr__(self):
        return "ExactSolution({}: y={}, z={}, beta={}, gamma={})".format(
            self.name, self.y_expr, self.z_expr, tuple(self.beta_expr), self.gamma)

    @staticmethod
    def _grad(expr):
        return [sympy.diff(expr, _X), sympy.diff(expr, _Y)]

    @staticmethod
    def _laplacian(expr):
        return sympy.diff(expr, _X, 2) + sympy.diff(expr, _Y, 2)

    @property
    def alpha(self):
        return 0. if np.isinf(self.gamma) else 1. / self.gamma

    def check_derivatives(self, n_points=100, bbox=(-1., 1., -1., 1.), random_state=None, eps=1e-4):
        """ Max relative deviation of gradients and Laplacians from central
        differences at random points. """
        rng = check_random_state(random_state)
        xmin, xmax, ymin, ymax = bbox
        pts = np.stack([rng.uniform(xmin, xmax, n_points), rng.uniform(ymin, ymax, n_points)], axis=1)
        ex, ey = np.array([eps, 0.]), np.array([0., eps])
        worst = 0.
        for fn, grad, lap in ((self.y, self.grad_y, self.lap_y), (self.z, self.grad_z, self.lap_z)):
            fd_grad = np.stack([(fn(pts + ex) - fn(pts - ex)) / (2. * eps),
                                (fn(pts + ey) - fn(pts - ey)) / (2. * eps)], axis=1)
            fd_lap = (fn(pts + ex) + fn(pts - ex) + fn(pts + ey) + fn(pts - ey) - 4. * fn(pts)) / eps ** 2
            g = grad(pts)
            worst = max(worst, float(np.max(np.abs(fd_grad - g) / np.maximum(1., np.abs(g)))))
            worst = max(worst, float(np.max(np.abs(fd_lap - lap(pts)) / np.maximum(1., np.abs(lap(pts))))))
        return worst


def example_solution(example, gamma=1.):
    """ Preset manufactured problems.

    1: circle x^2 + y^2 <= 0.75 with beta = (1, 1);
    2: kidney domain with beta = (y, x).
    Both use y = sin(pi x) and z = sin(pi x) sin(pi y).

    Returns
    -------
    tuple(ExactSolution, ImplicitDomain)
    """
    y = sympy.sin(sympy.pi * _X)
    z = sympy.sin(sympy.pi * _X) * sympy.sin(sympy.pi * _Y)
    if example == 1:
        return ExactSolution(y, z, (1, 1), gamma, name='example1'), ImplicitDomain.circle()
    if example == 2:
        return ExactSolution(y, z, (_Y, _X), gamma, name='example2'), ImplicitDomain.kidney()
    raise ValueError('unknown example: {}'.format(example))


def derive_data(exact):
    """ Problem data for which exact solves the optimality system.

    f = -lap y + beta.grad y - alpha z, y_d = -lap z - beta.grad z + y,
    g = y and g_adj = z on the boundary.

    Returns
    -------
    ProblemData
    """
    alpha = exact.alpha
    bx, by = exact.beta_expr
    gy, gz = ExactSolution._grad(exact.y_expr), ExactSolution._grad(exact.z_expr)
    f = -ExactSolution._laplacian(exact.y_expr) + bx * gy[0] + by * gy[1] - alpha * exact.z_expr
    y_d = -ExactSolution._laplacian(exact.z_expr) - bx * gz[0] - by * gz[1] + exact.y_expr
    return ProblemData(_lambdify(f), _lambdify(y_d), exact.y, exact.z, exact.beta, exact.gamma)


def l2_errors(sol, exact, mesh, k=None):
    """ Errors of all six fields against the exact solution.

    Volume errors are L2 norms over the mesh; trace errors are
    (sum_e |e| ||v - vhat||_e^2)^{1/2} over all facets.

    Returns
    -------
    dict
        e_y, e_q, e_yhat, e_z, e_p, e_zhat
    """
    if k is None:
        k = sol.degree
    order = min(2 * k + 4, MAX_EXACTNESS)
    xv, wv = element_quadrature(mesh, order)
    phi = sol.basis.eval(xv)

    def volume(coefs, exact_fn):
        if coefs.ndim == 2:
            diff = np.einsum('eqn,en->eq', phi, coefs) - exact_fn(xv)
            return math.sqrt(np.sum(wv * diff ** 2))
        diff = np.einsum('eqn,ecn->eqc', phi, coefs) - exact_fn(xv)
        return math.sqrt(np.sum(wv[..., None] * diff ** 2))

    s, xf, wf = facet_quadrature(mesh, order)
    mu = edge_basis(s, k)[None] / np.sqrt(mesh.facet_lengths)[:, None, None]

    def trace(coefs, exact_fn):
        diff = np.einsum('fqm,fm->fq', mu, coefs) - exact_fn(xf)
        return math.sqrt(np.sum(mesh.facet_lengths[:, None] * wf * diff ** 2))

    return {'e_y': volume(sol.y, exact.y),
            'e_q': volume(sol.q, exact.q),
            'e_yhat': trace(sol.yhat, exact.y),
            'e_z': volume(sol.z, exact.z),
            'e_p': volume(sol.p, exact.p),
            'e_zhat': trace(sol.zhat, exact.z)}


@dataclass
class ConvergenceRecord:
    """ Errors of one refinement level; orders are NaN on the first row. """
    example: object
    k: int
    N: int
    h: float
    errors: dict
    orders: dict = field(default_factory=dict)
    status: str = 'ok'

    @property
    def ok(self):
        return self.status == 'ok'

    def row(self):
        out = {'example': self.example, 'k': self.k, 'N': self.N, 'h': self.h}
        for var in VARIABLES:
            out['e_' + var] = self.errors.get('e_' + var, np.nan)
            out['ord_' + var] = self.orders.get('ord_' + var, np.nan)
        return out


def eoc_pair(e_prev, e_next, n_prev, n_next):
    """ 2 ln(e_prev / e_next) / ln(N_next / N_prev). """
    if n_next <= n_prev:
        raise DegenerateRatio('element count does not increase: {} -> {}'.format(n_prev, n_next))
    if e_prev == 0. or e_next == 0.:
        raise DegenerateRatio('zero error')
    return 2. * math.log(e_prev / e_next) / math.log(float(n_next) / n_prev)


def eoc(records):
    """ Fill the orders of successive records in place and return them.

    Raises
    ------
    DegenerateRatio
    """
    if len(records) < 2:
        raise DegenerateRatio('at least two records are needed')
    records[0].orders = {}
    for prev, rec in zip(records[:-1], records[1:]):
        rec.orders = {'ord_' + v: eoc_pair(prev.errors['e_' + v], rec.errors['e_' + v], prev.N, rec.N)
                      for v in VARIABLES}
    return records


def build_mesh(domain, n, mesh_kind='embedded', bbox=None):
    """ Computational mesh of one refinement level. """
    bbox = domain.bbox if bbox is None else bbox
    if mesh_kind == 'embedded':
        return extract_interior_mesh(generate_background_mesh(bbox, n), domain)
    if mesh_kind == 'interpolated':
        return generate_interpolated_mesh(domain, bbox, n)
    raise ValueError('unknown mesh kind: {}'.format(mesh_kind))


def solve_level(exact, domain, n, k, strategy='facet-normal', mode='condensed', tau1=1.,
                mesh_kind='embedded', bbox=None, data=None):
    """ Mesh, transfer map, assembly and solve for one refinement level.

    Returns
    -------
    tuple
        (solution, mesh, transfer map)
    """
    mesh = build_mesh(domain, n, mesh_kind, bbox)
    tmap = build_transfer_map(mesh, domain, strategy, quad_order=min(2 * k + 2, MAX_EXACTNESS))
    if data is None:
        data = derive_data(exact)
    tau = select_tau(mesh, data.beta, tau1)
    sol = solve(assemble(mesh, tmap, data, tau, k, mode=mode))
    return sol, mesh, tmap


def _run_level(example, exact, domain, n, k, strategy, mode, tau1, mesh_kind, bbox):
    try:
        sol, mesh, _ = solve_level(exact, domain, n, k, strategy, mode, tau1, mesh_kind, bbox)
    except (ValueError, np.linalg.LinAlgError) as err:
        logging.warning('level n={} failed: {}: {}'.format(n, type(err).__name__, err))
        return ConvergenceRecord(example, k, 0, np.nan, {}, status='{}: {}'.format(type(err).__name__, err))
    errors = l2_errors(sol, exact, mesh, k)
    logging.debug('level n={}: N={} '.format(n, mesh.n_elements)
                  + ' '.join('{}={:.3e}'.format(key, val) for key, val in errors.items()))
    return ConvergenceRecord(example, k, mesh.n_elements, mesh.h_max, errors)


def run_study(example, k, levels=DEFAULT_LEVELS, strategy='facet-normal', mode='condensed', tau1=1.,
              gamma=1., mesh_kind='embedded', n_jobs=1, exact=None, domain=None, bbox=None):
    """ Convergence study over refinement levels.

    Parameters
    ----------
    example : int or str
        1, 2 or a label for a custom problem given by exact and domain.
    k : int
    levels : list(int)
        Background grid sizes.
    n_jobs : int
        Levels solved concurrently in a thread pool.

    Returns
    -------
    list(ConvergenceRecord)
        One per level; failed levels carry their error in status and are
        skipped for the orders.
    """
    if exact is None:
        exact, domain = example_solution(example, gamma)
    records = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_run_level)(example, exact, domain, n, k, strategy, mode, tau1, mesh_kind, bbox)
        for n in levels)
    good = [rec for rec in records if rec.ok]
    if len(good) >= 2:
        try:
            eoc(good)
        except DegenerateRatio as err:
            logging.warning('orders not computed: {}'.format(err))
    return records


def study_frame(records):
    """ Report table with the documented column layout. """
    return pd.DataFrame([rec.row() for rec in records], columns=REPORT_COLUMNS)


def _fmt(value, pattern):
    return '' if value is None or not np.isfinite(value) else pattern.format(value)


def markdown_tables(frame):
    """ Two Markdown tables, (y, q, yhat) and (z, p, zhat), rows grouped by k. """
    out = []
    for group in (('y', 'q', 'yhat'), ('z', 'p', 'zhat')):
        table = pd.DataFrame({'k': frame['k'], 'N': frame['N']})
        for var in group:
            table['e_' + var] = [_fmt(v, '{:.2E}') for v in frame['e_' + var]]
            table['order ' + var] = [_fmt(v, '{:.2f}') for v in frame['ord_' + var]]
        out.append(table.to_markdown(index=False))
    return '\n\n'.join(out) + '\n'


def write_study(records, outdir, prefix='convergence'):
    """ Write <prefix>.csv and <prefix>.md and return the frame. """
    frame = study_frame(records)
    frame.to_csv(os.path.join(outdir, prefix + '.csv'), index=False, float_format='%.10e')
    with open(os.path.join(outdir, prefix + '.md'), 'w') as fh:
        fh.write(markdown_tables(frame))
    return frame


# property suites

def _reference_integral(a, b):
    return math.factorial(a) * math.factorial(b) / float(math.factorial(a + b + 2))


def quadrature_suite(max_exactness=MAX_EXACTNESS):
    """ Monomial integrals on the reference triangle and unit interval. """
    rows = []
    for deg in range(max_exactness + 1):
        tri = quadrature('triangle', deg)
        seg = quadrature('segment', deg)
        for a, b in monomial_exponents(deg):
            approx = np.sum(tri.weights * tri.nodes[:, 0] ** a * tri.nodes[:, 1] ** b)
            rows.append({'suite': 'quadrature', 'case': 'triangle e{} x^{} y^{}'.format(deg, a, b),
                         'value': abs(approx - _reference_integral(a, b)), 'tol': 1e-10})
        approx = np.sum(seg.weights * seg.nodes ** deg)
        rows.append({'suite': 'quadrature', 'case': 'segment e{} s^{}'.format(deg, deg),
                     'value': abs(approx - 1. / (deg + 1)), 'tol': 1e-10})
    return rows


def gram_suite(mesh, k):
    """ Deviation of the element mass matrices from the identity. """
    basis = PolySpace(k).basis(mesh)
    dev = np.abs(basis.mass(mesh) - np.eye(basis.dim)).max(axis=(1, 2))
    return [{'suite': 'gram', 'case': 'k={} worst element {}'.format(k, int(np.argmax(dev))),
             'value': float(dev.max()), 'tol': 1e-10}]


def _random_field(rng):
    a, c = rng.uniform(-2., 2., size=(3, 2)), rng.uniform(-1., 1., size=3)

    def vec(points):
        return np.stack([np.sin(points @ a[0] + c[0]), np.cos(points @ a[1] + c[1])], axis=-1)

    def scal(points):
        return np.exp(0.5 * np.sin(points @ a[2] + c[2]))
    return vec, scal


def projection_suite(mesh, k, beta, tau1=1., n_inputs=20, random_state=None):
    """ Defining-equation residuals of both HDG projections for random
    smooth inputs and reproduction of random in-space pairs. """
    rng = check_random_state(random_state)
    basis = PolySpace(k).basis(mesh)
    worst, repro = 0., 0.
    try:
        for _ in range(n_inputs):
            vec, scal = _random_field(rng)
            for element in range(mesh.n_elements):
                worst = max(worst,
                            project_hdg_state(vec, scal, mesh, element, tau1, beta, k, basis).max_residual,
                            project_hdg_adjoint(vec, scal, mesh, element, beta, k, tau1=tau1,
                                                basis=basis).max_residual)
        for element in range(mesh.n_elements):
            qc, yc = rng.normal(size=(2, basis.dim)), rng.normal(size=basis.dim)
            qpoly, ypoly = ElementPoly(basis, element, qc), ElementPoly(basis, element, yc)
            state = project_hdg_state(qpoly, ypoly, mesh, element, tau1, beta, k, basis)
            adjoint = project_hdg_adjoint(qpoly, ypoly, mesh, element, beta, k, tau1=tau1, basis=basis)
            repro = max(repro, np.abs(state.vector - qc).max(), np.abs(state.scalar - yc).max(),
                        np.abs(adjoint.vector - qc).max(), np.abs(adjoint.scalar - yc).max())
    except SingularLocalSystem as err:
        return [{'suite': 'projection', 'case': 'k={} singular'.format(k), 'value': np.inf, 'tol': 0.,
                 'note': str(err)}]
    return [{'suite': 'projection', 'case': 'k={} residual'.format(k), 'value': worst, 'tol': 1e-9},
            {'suite': 'projection', 'case': 'k={} reproduction'.format(k), 'value': repro, 'tol': 1e-10}]


def lambda_suite(mesh, tmap, k, n_fields=100, n_patches=10, random_state=None):
    """ Count violations of both Lambda estimates for random vector
    polynomials on the first boundary patches with a nonempty path. """
    rng = check_random_state(random_state)
    patches = [b for b in range(tmap.n_facets) if tmap.r_e[b] > 0.][:n_patches]
    owners = np.unique(tmap.owners[patches]) if patches else np.array([], dtype=int)
    basis = PolySpace(k).basis(mesh, owners) if len(owners) else None
    bad_a, bad_b = 0, 0
    for b in patches:
        owner = int(tmap.owners[b])
        c_ext = ext_constant(mesh, b, tmap, k, basis)
        c_inv = inv_constant(mesh, owner, k, basis)
        for _ in range(n_fields):
            poly = ElementPoly(basis, owner, rng.normal(size=(2, basis.dim)))
            lhs, rhs_a, rhs_b = lambda_bounds(poly, b, tmap, c_ext, c_inv, mesh)
            bad_a += int(lhs > rhs_a * (1. + 1e-9) + 1e-14)
            bad_b += int(lhs > rhs_b * (1. + 1e-9) + 1e-14)
    return [{'suite': 'lambda', 'case': 'k={} bound a ({} patches)'.format(k, len(patches)),
             'value': float(bad_a), 'tol': 0.},
            {'suite': 'lambda', 'case': 'k={} bound b ({} patches)'.format(k, len(patches)),
             'value': float(bad_b), 'tol': 0.}]


def run_property_suites(k, domain=None, n=8, beta=None, tau1=1., random_state=None):
    """ All property suites; returns a frame with a passed column.

    Projection and Gram checks run on a fitted unit-square mesh, the
    Lambda estimates on the facet-normal transfer map of the domain
    (default: the circle of the first example).
    """
    rng = check_random_state(random_state)
    if beta is None:
        def beta(points):
            return np.ones(np.asarray(points).shape)
    square = ImplicitDomain.square()
    fitted = extract_interior_mesh(generate_background_mesh(square.bbox, 4), square)
    domain = ImplicitDomain.circle() if domain is None else domain
    mesh = extract_interior_mesh(generate_background_mesh(domain.bbox, n), domain)
    tmap = build_transfer_map(mesh, domain, 'facet-normal', quad_order=min(2 * k + 2, MAX_EXACTNESS))

    rows = quadrature_suite() + gram_suite(fitted, k)
    rows += projection_suite(fitted, k, beta, tau1, random_state=rng)
    rows += lambda_suite(mesh, tmap, k, random_state=rng)
    frame = pd.DataFrame(rows)
    frame['passed'] = frame['value'] <= frame['tol']
    logging.debug('property suites k={}: {} of {} checks passed'.format(
        k, int(frame['passed'].sum()), len(frame)))
    return frame
