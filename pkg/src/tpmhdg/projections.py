""" Facet L2 projection and the element-local HDG projections of the
state pair (q, y) and the adjoint pair (p, z).
"""
import numpy as np
from scipy.linalg import lu_factor
from scipy.linalg import lu_solve

from tpmhdg.exceptions import SingularLocalSystem
from tpmhdg.polybasis import MAX_EXACTNESS
from tpmhdg.polybasis import PolySpace
from tpmhdg.polybasis import ElementPoly
from tpmhdg.polybasis import edge_basis
from tpmhdg.polybasis import element_quadrature
from tpmhdg.polybasis import poly_dim
from tpmhdg.polybasis import quadrature

# local systems above this condition number are treated as singular
LOCAL_COND_MAX = 1e13


def _exactness(k):
    return min(2 * k + 6, MAX_EXACTNESS)


def project_facet_l2(f, a, b, k, exactness=None):
    """ L2 projection onto P_k of the segment from a to b.

    Parameters
    ----------
    f : callable
        Scalar function, points (n, 2) -> (n,).
    a, b : array-like
        Segment end points.
    k : int
        Degree.

    Returns
    -------
    np.ndarray
        Coefficients in the orthonormal Legendre basis of the segment,
        parametrized from a to b.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    length = np.linalg.norm(b - a)
    rule = quadrature('segment', _exactness(k) if exactness is None else exactness)
    points = a[None, :] + rule.nodes[:, None] * (b - a)[None, :]
    mu = edge_basis(rule.nodes, k) / np.sqrt(length)
    return (rule.weights * length * np.asarray(f(points), dtype=float)) @ mu


def eval_facet_l2(coefs, s, length):
    """ Evaluate facet coefficients at parameters s in [0, 1]. """
    return edge_basis(s, len(coefs) - 1) @ np.asarray(coefs) / np.sqrt(length)


class ProjectedPair(object):
    """ Result of an HDG projection on one element.

    Attributes
    ----------
    element : int
    vector : np.ndarray
        Shape (2, N), coefficients of Pi_V q (or of the adjoint Pi_V p).
    scalar : np.ndarray
        Shape (N,), coefficients of Pi_W y (or Pi_W z).
    residuals : dict
        Max absolute residual of the volume vector ('a'), volume scalar
        ('b') and facet ('c') equations.
    """
    def __init__(self, element, vector, scalar, residuals, basis):
        self.element = element
        self.vector = vector
        self.scalar = scalar
        self.residuals = residuals
        self.basis = basis

    def __repr__(self):
        return "ProjectedPair(element={}, max residual={:.3e})".format(
            self.element, self.max_residual)

    @property
    def max_residual(self):
        return max(self.residuals.values())

    def vector_poly(self):
        return ElementPoly(self.basis, self.element, self.vector)

    def scalar_poly(self):
        return ElementPoly(self.basis, self.element, self.scalar)


def _facet_tau(tau, points, normal, local):
    if callable(tau):
        return np.asarray(tau(points, normal), dtype=float) * np.ones(len(points))
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 0:
        return np.full(len(points), float(tau))
    return np.full(len(points), float(tau[local]))


def _hdg_projection(vec, scal, mesh, element, tau, beta, k, sign, basis=None, tau_default=None):
    """ Common solver for both projections; sign = +1 for the state pair,
    -1 for the adjoint pair (flipped convection). """
    if basis is None:
        basis = PolySpace(k).basis(mesh, [element])
    n, nlow, nm = poly_dim(k), poly_dim(k - 1) if k > 0 else 0, k + 1
    order = _exactness(k)

    points, weights = element_quadrature(mesh, order, [element])
    points, weights = points[0], weights[0]
    phi = basis.eval(points[None], [element])[0]
    bvol = sign * np.asarray(beta(points), dtype=float)
    qv = np.asarray(vec(points), dtype=float)
    yv = np.asarray(scal(points), dtype=float)

    rows, rhs, tags = [], [], []
    if nlow > 0:
        test = phi[:, :nlow]
        mass = np.einsum('q,qj,qi->ji', weights, test, phi)
        for d in range(2):
            row = np.zeros((nlow, 3 * n))
            row[:, d * n:(d + 1) * n] = mass
            row[:, 2 * n:] = np.einsum('q,q,qj,qi->ji', weights, bvol[:, d], test, phi)
            rows.append(row)
            rhs.append(np.einsum('q,q,qj->j', weights, qv[:, d] + bvol[:, d] * yv, test))
            tags += ['a'] * nlow
        row = np.zeros((nlow, 3 * n))
        row[:, 2 * n:] = mass
        rows.append(row)
        rhs.append(np.einsum('q,q,qj->j', weights, yv, test))
        tags += ['b'] * nlow

    rule = quadrature('segment', order)
    tri = mesh.triangles[element]
    for l in range(3):
        a, b = mesh.vertices[tri[(l + 1) % 3]], mesh.vertices[tri[(l + 2) % 3]]
        length = np.linalg.norm(b - a)
        normal = mesh.normals[element, l]
        fpts = a[None, :] + rule.nodes[:, None] * (b - a)[None, :]
        fw = rule.weights * length
        mu = edge_basis(rule.nodes, k) / np.sqrt(length)
        phif = basis.eval(fpts[None], [element])[0]
        bn = sign * (np.asarray(beta(fpts), dtype=float) @ normal)
        tau_l = tau_default(fpts, normal) if tau is None else _facet_tau(tau, fpts, normal, l)
        yf = np.asarray(scal(fpts), dtype=float)
        qn = np.asarray(vec(fpts), dtype=float) @ normal
        pm_y = eval_facet_l2(project_facet_l2(scal, a, b, k, order), rule.nodes, length)

        row = np.zeros((nm, 3 * n))
        row[:, :n] = normal[0] * np.einsum('q,qm,qi->mi', fw, mu, phif)
        row[:, n:2 * n] = normal[1] * np.einsum('q,qm,qi->mi', fw, mu, phif)
        row[:, 2 * n:] = np.einsum('q,q,qm,qi->mi', fw, tau_l, mu, phif)
        rows.append(row)
        rhs.append(np.einsum('q,q,qm->m', fw, qn + bn * yf + tau_l * yf - bn * pm_y, mu))
        tags += ['c'] * nm

    mat = np.concatenate(rows, axis=0)
    vec_rhs = np.concatenate(rhs)
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > LOCAL_COND_MAX:
        raise SingularLocalSystem('projection system on element {} is singular (cond={:.3g})'.format(element, cond))
    sol = lu_solve(lu_factor(mat), vec_rhs)

    res = np.abs(mat @ sol - vec_rhs)
    tags = np.array(tags)
    residuals = {t: float(res[tags == t].max()) if np.any(tags == t) else 0. for t in ('a', 'b', 'c')}
    return ProjectedPair(int(element), sol[:2 * n].reshape(2, n), sol[2 * n:], residuals, basis)


def project_hdg_state(q, y, mesh, element, tau1, beta, k, basis=None):
    """ HDG projection Pi_h(q, y) on one element.

    (Pi_V q + beta Pi_W y, s)_K = (q + beta y, s)_K        s in [P_{k-1}]^2
    (Pi_W y, t)_K = (y, t)_K                               t in P_{k-1}
    <Pi_V q.n + beta.n P_M y + tau1 Pi_W y, mu>_e
        = <q.n + beta.n y + tau1 y, mu>_e                  mu in P_k(e)

    Parameters
    ----------
    q : callable
        Vector field, points (n, 2) -> (n, 2).
    y : callable
        Scalar field.
    mesh : Triangulation
    element : int
    tau1 : float or array-like of shape (3,)
        Per local facet.
    beta : callable
    k : int
    basis : ElementBasis or None
        Basis containing the element; built on demand.

    Returns
    -------
    ProjectedPair

    Raises
    ------
    SingularLocalSystem
    """
    return _hdg_projection(q, y, mesh, element, tau1, beta, k, 1., basis)


def project_hdg_adjoint(p, z, mesh, element, beta, k, tau2=None, tau1=1., basis=None):
    """ Adjoint HDG projection, the state projection with -beta and tau2.

    tau2 is a float, a per-local-facet array, a callable (points, normal)
    or None, in which case tau2 = tau1 - beta.n pointwise.
    """
    if tau2 is None:
        def tau_default(points, normal):
            return tau1 - np.asarray(beta(points), dtype=float) @ normal
        return _hdg_projection(p, z, mesh, element, None, beta, k, -1., basis, tau_default)
    return _hdg_projection(p, z, mesh, element, tau2, beta, k, -1., basis)
