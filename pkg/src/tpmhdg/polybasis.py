""" Polynomial spaces, quadrature and the computable constants.

Element bases are orthonormalized, shifted and scaled monomials. All
evaluations are batched over a leading element axis so that assembly and
error computation stay vectorized over the mesh.
"""
import logging
import math

import numpy as np
from numpy.polynomial.legendre import leggauss
from numpy.polynomial.legendre import legvander
from scipy.linalg import eigh
from scipy.special import roots_jacobi

from tpmhdg.exceptions import SingularGram
from tpmhdg.exceptions import UnsupportedOrder

MAX_EXACTNESS = 12

# paths shorter than this are treated as empty
PATH_TOL = 1e-14


class QuadRule(object):
    """ Quadrature rule on the reference segment [0, 1] or the
    reference triangle {x, y >= 0, x + y <= 1}.

    Parameters
    ----------
    kind : str
        'segment' or 'triangle'
    nodes : np.ndarray
        Shape (n,) for segments, (n, 2) for triangles.
    weights : np.ndarray
        Shape (n,). Sums to the reference measure.
    exactness : int
        Polynomial degree integrated exactly.
    """
    def __init__(self, kind, nodes, weights, exactness):
        self.kind = kind
        self.nodes = nodes
        self.weights = weights
        self.exactness = exactness

    def __len__(self):
        return len(self.weights)

    def __repr__(self):
        return "QuadRule({}, exactness={}, {} nodes)".format(self.kind, self.exactness, len(self))


def _segment_rule(exactness):
    npoints = exactness // 2 + 1
    x, w = leggauss(npoints)
    return QuadRule('segment', 0.5 * (x + 1.), 0.5 * w, exactness)


def _radon7():
    sq = math.sqrt(15.)
    a1, a2 = (6. - sq) / 21., (6. + sq) / 21.
    w1, w2 = (155. - sq) / 2400., (155. + sq) / 2400.
    nodes = np.array([[1. / 3., 1. / 3.],
                      [a1, a1], [1. - 2. * a1, a1], [a1, 1. - 2. * a1],
                      [a2, a2], [1. - 2. * a2, a2], [a2, 1. - 2. * a2]])
    weights = np.array([9. / 80., w1, w1, w1, w2, w2, w2])
    return nodes, weights


def _collapsed_rule(exactness):
    # Duffy collapse x = u, y = (1 - u) v; (1 - u) absorbed in a Gauss-Jacobi weight
    npoints = int(math.ceil((exactness + 1) / 2.))
    t, wt = roots_jacobi(npoints, 1., 0.)
    u, wu = 0.5 * (t + 1.), wt / 4.
    x, wx = leggauss(npoints)
    v, wv = 0.5 * (x + 1.), 0.5 * wx
    uu, vv = np.meshgrid(u, v, indexing='ij')
    ww = np.outer(wu, wv).ravel()
    bary = np.stack([1. - uu.ravel(), uu.ravel(), ((1. - uu) * vv).ravel()], axis=1)
    bary[:, 0] -= bary[:, 2]

    nodes, weights = [], []
    for perm in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
        nodes.append(bary[:, [perm[1], perm[2]]])
        weights.append(ww / 6.)
    return np.concatenate(nodes), np.concatenate(weights)


def quadrature(kind, exactness):
    """ Quadrature rule with a given polynomial exactness.

    Parameters
    ----------
    kind : str
        'segment' (unit interval) or 'triangle' (reference triangle).
    exactness : int
        Degree that must be integrated exactly, 0 to 12.

    Returns
    -------
    QuadRule
    """
    if exactness < 0 or exactness > MAX_EXACTNESS:
        raise UnsupportedOrder('exactness {} outside 0..{}'.format(exactness, MAX_EXACTNESS))
    if kind == 'segment':
        return _segment_rule(exactness)
    if kind != 'triangle':
        raise ValueError('unknown quadrature kind: {}'.format(kind))

    if exactness <= 1:
        nodes = np.array([[1. / 3., 1. / 3.]])
        weights = np.array([0.5])
    elif exactness == 2:
        nodes = np.array([[1. / 6., 1. / 6.], [2. / 3., 1. / 6.], [1. / 6., 2. / 3.]])
        weights = np.full(3, 1. / 6.)
    elif exactness <= 5:
        nodes, weights = _radon7()
    else:
        nodes, weights = _collapsed_rule(exactness)
    return QuadRule('triangle', nodes, weights, exactness)


def poly_dim(k):
    """Dimension of P_k on a triangle."""
    return (k + 1) * (k + 2) // 2


def monomial_exponents(k):
    """ Exponents (a, b) of x^a y^b ordered by total degree. """
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


def edge_basis(s, k):
    """ Orthonormal Legendre basis on the unit interval.

    Divide by sqrt(|e|) to obtain the orthonormal basis of P_k(e).

    Parameters
    ----------
    s : np.ndarray
        Facet parameters in [0, 1].
    k : int
        Polynomial degree.

    Returns
    -------
    np.ndarray
        Shape s.shape + (k + 1,).
    """
    s = np.asarray(s, dtype=float)
    return legvander(2. * s - 1., k) * np.sqrt(2. * np.arange(k + 1) + 1.)


def element_quadrature(mesh, exactness, elements=None):
    """ Physical quadrature points and weights on mesh elements.

    Returns
    -------
    points : np.ndarray
        Shape (n_elements, n_nodes, 2)
    weights : np.ndarray
        Shape (n_elements, n_nodes)
    """
    rule = quadrature('triangle', exactness)
    if elements is None:
        elements = np.arange(mesh.n_elements)
    v = mesh.vertices[mesh.triangles[elements]]
    xi = rule.nodes
    points = (v[:, None, 0, :]
              + xi[None, :, 0, None] * (v[:, None, 1, :] - v[:, None, 0, :])
              + xi[None, :, 1, None] * (v[:, None, 2, :] - v[:, None, 0, :]))
    weights = rule.weights[None, :] * 2. * mesh.areas[elements][:, None]
    return points, weights


def facet_quadrature(mesh, exactness, facets=None):
    """ Quadrature on mesh facets, parametrized from the lower to the
    higher vertex index.

    Returns
    -------
    s : np.ndarray
        Reference parameters, shape (n_nodes,)
    points : np.ndarray
        Shape (n_facets, n_nodes, 2)
    weights : np.ndarray
        Shape (n_facets, n_nodes)
    """
    rule = quadrature('segment', exactness)
    if facets is None:
        facets = np.arange(mesh.n_facets)
    a = mesh.vertices[mesh.facets[facets, 0]]
    b = mesh.vertices[mesh.facets[facets, 1]]
    points = a[:, None, :] + rule.nodes[None, :, None] * (b - a)[:, None, :]
    weights = rule.weights[None, :] * mesh.facet_lengths[facets][:, None]
    return rule.nodes, points, weights


def _reshape_leading(arr, ndim):
    return arr.reshape((arr.shape[0],) + (1,) * (ndim - 2) + (arr.shape[-1],))


class ElementBasis(object):
    """ Orthonormal P_k bases on a set of elements.

    phi_n = sum_m C[e, m, n] mono_m((x - c_e) / h_e). The coefficient
    matrices C are upper triangular, so the first poly_dim(j) functions
    span P_j for every j <= k.

    Parameters
    ----------
    degree : int
    elements : np.ndarray
        Mesh element ids, one per basis.
    centers : np.ndarray
        Shape (n, 2)
    scales : np.ndarray
        Shape (n,)
    coefs : np.ndarray
        Shape (n, N, N)
    """
    def __init__(self, degree, elements, centers, scales, coefs):
        self.degree = degree
        self.elements = np.asarray(elements)
        self.centers = centers
        self.scales = scales
        self.coefs = coefs
        self.exponents = monomial_exponents(degree)
        self._position = {int(e): i for i, e in enumerate(self.elements)}

    @property
    def dim(self):
        return len(self.exponents)

    def __len__(self):
        return len(self.elements)

    def __repr__(self):
        return "ElementBasis(k={}, {} elements)".format(self.degree, len(self))

    def positions(self, elements):
        """Row positions of mesh element ids in this basis."""
        return np.array([self._position[int(e)] for e in np.atleast_1d(elements)], dtype=int)

    def _rows(self, elements):
        if elements is None:
            return np.arange(len(self))
        return self.positions(elements)

    def _scaled(self, points, rows):
        points = np.asarray(points, dtype=float)
        center = _reshape_leading(self.centers[rows], points.ndim)
        scale = self.scales[rows].reshape((len(rows),) + (1,) * (points.ndim - 1))
        return (points - center) / scale, scale

    def monomials(self, points, elements=None):
        """ Scaled monomials at points of shape (n_sel, ..., 2). """
        xi, _ = self._scaled(points, self._rows(elements))
        return np.stack([xi[..., 0] ** a * xi[..., 1] ** b for a, b in self.exponents], axis=-1)

    def eval(self, points, elements=None):
        """ Evaluate all basis functions.

        Parameters
        ----------
        points : np.ndarray
            Shape (n_sel, ..., 2), one leading row per selected element.
        elements : array-like or None
            Mesh element ids of the rows. None selects all elements of the basis.

        Returns
        -------
        np.ndarray
            Shape (n_sel, ..., N)
        """
        rows = self._rows(elements)
        mono = self.monomials(points, elements)
        return np.einsum('e...m,emn->e...n', mono, self.coefs[rows])

    def grad(self, points, elements=None):
        """ Physical gradients, shape (n_sel, ..., N, 2). """
        rows = self._rows(elements)
        xi, scale = self._scaled(points, rows)
        x, y = xi[..., 0], xi[..., 1]
        zero = np.zeros_like(x)
        dx, dy = [], []
        for a, b in self.exponents:
            dx.append(a * x ** (a - 1) * y ** b if a > 0 else zero)
            dy.append(b * x ** a * y ** (b - 1) if b > 0 else zero)
        dmono = np.stack([np.stack(dx, axis=-1), np.stack(dy, axis=-1)], axis=-1)
        dmono = dmono / scale[..., None]
        return np.einsum('e...md,emn->e...nd', dmono, self.coefs[rows])

    def mass(self, mesh, exactness=None):
        """ Element mass matrices of the basis, shape (n, N, N). """
        if exactness is None:
            exactness = 2 * self.degree
        points, weights = element_quadrature(mesh, exactness, self.elements)
        phi = self.eval(points)
        return np.einsum('eq,eqi,eqj->eij', weights, phi, phi)


class PolySpace(object):
    """ P_k on triangles (dimension N_k) and on edges (dimension k + 1).

    Parameters
    ----------
    degree : int
        Polynomial degree, 0 to 3.
    """
    def __init__(self, degree):
        if degree < 0 or degree > 3:
            raise ValueError('polynomial degree must be in 0..3, got {}'.format(degree))
        self.degree = degree

    @property
    def dim(self):
        return poly_dim(self.degree)

    @property
    def edge_dim(self):
        return self.degree + 1

    def __repr__(self):
        return "PolySpace(k={})".format(self.degree)

    def basis(self, mesh, elements=None):
        """ Orthonormal bases on mesh elements.

        The Gram matrix of the scaled monomials is factorized as L L^T
        and the monomials are combined with L^{-T}.

        Parameters
        ----------
        mesh : Triangulation
        elements : array-like or None
            Element ids. Default: all elements.

        Returns
        -------
        ElementBasis
        """
        if elements is None:
            elements = np.arange(mesh.n_elements)
        elements = np.atleast_1d(np.asarray(elements, dtype=int))
        v = mesh.vertices[mesh.triangles[elements]]
        centers = v.mean(axis=1)
        scales = mesh.diameters[elements]

        raw = ElementBasis(self.degree, elements, centers, scales,
                           np.broadcast_to(np.eye(self.dim), (len(elements), self.dim, self.dim)))
        points, weights = element_quadrature(mesh, 2 * self.degree, elements)
        mono = raw.monomials(points)
        gram = np.einsum('eq,eqi,eqj->eij', weights, mono, mono)
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            bad = [int(e) for e, g in zip(elements, gram) if np.any(np.linalg.eigvalsh(g) <= 0.)]
            raise SingularGram('mass matrix not positive definite on elements {}'.format(bad))
        coefs = np.linalg.inv(chol).transpose(0, 2, 1)
        logging.debug('orthonormal P{} basis on {} elements'.format(self.degree, len(elements)))
        return ElementBasis(self.degree, elements, centers, scales, coefs)


def lattice_points(mesh, element, k):
    """ Principal lattice of degree k on an element (vertices included). """
    v = mesh.vertices[mesh.triangles[element]]
    if k == 0:
        return v.mean(axis=0)[None, :]
    pts = []
    for i in range(k + 1):
        for j in range(k + 1 - i):
            l1, l2 = i / float(k), j / float(k)
            pts.append((1. - l1 - l2) * v[0] + l1 * v[1] + l2 * v[2])
    return np.array(pts)


class ElementPoly(object):
    """ Polynomial on one element given by coefficients in the element
    basis. Coefficients of shape (N,) define a scalar, (2, N) a vector
    field. Evaluation outside the element is the natural extension of
    the same polynomial.
    """
    def __init__(self, basis, element, coefs):
        self.basis = basis
        self.element = int(element)
        self.coefs = np.asarray(coefs, dtype=float)

    @property
    def is_vector(self):
        return self.coefs.ndim == 2

    @property
    def degree(self):
        return self.basis.degree

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        phi = self.basis.eval(x[None], [self.element])[0]
        if self.is_vector:
            return phi @ self.coefs.T
        return phi @ self.coefs

    def grad(self, x):
        """ Gradient; shape (..., 2) for scalars, (..., 2, 2) component-major for vectors. """
        x = np.asarray(x, dtype=float)
        dphi = self.basis.grad(x[None], [self.element])[0]
        if self.is_vector:
            return np.einsum('...nd,cn->...cd', dphi, self.coefs)
        return np.einsum('...nd,n->...d', dphi, self.coefs)

    @classmethod
    def from_nodal(cls, basis, mesh, element, values):
        """ Interpolate at the degree-k principal lattice.

        Parameters
        ----------
        values : callable
            Maps points (n, 2) to values (n,) or (n, 2).
        """
        pts = lattice_points(mesh, element, basis.degree)
        vander = basis.eval(pts[None], [element])[0]
        vals = np.asarray(values(pts), dtype=float)
        coefs = np.linalg.solve(vander, vals)
        return cls(basis, element, coefs.T if vals.ndim == 2 else coefs)

    @classmethod
    def project(cls, basis, mesh, element, values, exactness=None):
        """ L2 projection of a callable onto the element basis. """
        if exactness is None:
            exactness = min(2 * basis.degree + 4, MAX_EXACTNESS)
        points, weights = element_quadrature(mesh, exactness, [element])
        phi = basis.eval(points, [element])[0]
        vals = np.asarray(values(points[0]), dtype=float)
        if vals.ndim == 2:
            return cls(basis, element, np.einsum('q,qn,qc->cn', weights[0], phi, vals))
        return cls(basis, element, np.einsum('q,qn,q->n', weights[0], phi, vals))


def extrapolate_eval(p, x):
    """ Evaluate an element polynomial at x, inside or outside its element. """
    return p(x)


def _path_exactness(k):
    return min(2 * k + 2, MAX_EXACTNESS)


def lambda_eval(p, facet, tmap, node):
    """ Path-averaged extrapolation discrepancy at a transfer node.

    l^{-1} int_0^l (p(x) - E(p)(x + s m)) . m ds, zero on empty paths.

    Parameters
    ----------
    p : ElementPoly
        Vector polynomial on the owner element of the facet.
    facet : int
        Position of the boundary facet in the transfer map.
    tmap : TransferMap
    node : int
        Quadrature node index on the facet.
    """
    x = tmap.points[facet, node]
    m = tmap.directions[facet, node]
    length = tmap.lengths[facet, node]
    if length < PATH_TOL:
        return 0.
    rule = quadrature('segment', _path_exactness(p.degree))
    pts = x[None, :] + length * rule.nodes[:, None] * m[None, :]
    diff = p(x)[None, :] - p(pts)
    return float(np.sum(rule.weights * (diff @ m)))


def _path_values(p, facet, tmap):
    pts, wts = tmap.path_quadrature(_path_exactness(p.degree), facets=[facet])
    return p(pts[0]), wts[0]


def triple_norm(p, facet, tmap):
    """ (int_e int_0^l |p(x + t m)|^2 dt dx)^{1/2} by facet x path quadrature. """
    vals, wts = _path_values(p, facet, tmap)
    if vals.ndim == wts.ndim:
        return float(np.sqrt(np.sum(wts * vals ** 2)))
    return float(np.sqrt(np.sum(wts[..., None] * vals ** 2)))


def lambda_norm(p, facet, tmap):
    """ ||l^{1/2} Lambda^p||_e over the facet quadrature nodes of the map. """
    lam = np.array([lambda_eval(p, facet, tmap, i) for i in range(tmap.points.shape[1])])
    return float(np.sqrt(np.sum(tmap.weights[facet] * tmap.lengths[facet] * lam ** 2)))


def gradient_triple_norm(p, facet, tmap):
    """ Triple norm of the (Frobenius) gradient of p over the patch. """
    pts, wts = tmap.path_quadrature(_path_exactness(p.degree), facets=[facet])
    grads = p.grad(pts[0])
    return float(np.sqrt(np.sum(wts[0][..., None, None] * grads ** 2)))


def _max_geneig(a, b):
    try:
        vals = eigh(a, b, eigvals_only=True)
    except np.linalg.LinAlgError:
        raise SingularGram('generalized eigenproblem with singular mass matrix')
    return max(float(vals[-1]), 0.)


def _element_basis(mesh, element, k, basis):
    if basis is None:
        return PolySpace(k).basis(mesh, [element])
    return basis


def ext_constant(mesh, facet, tmap, k, basis=None):
    """ Extrapolation constant C_ext of a boundary facet.

    r_e^{-1/2} sqrt(lambda_max(M_ext, M_K)) with M_ext the Gram matrix of
    the owner basis over the patch swept by the transfer paths.

    Parameters
    ----------
    mesh : Triangulation
    facet : int
        Position of the boundary facet in the transfer map.
    tmap : TransferMap
    k : int
    basis : ElementBasis or None
        Prebuilt basis containing the owner element.

    Returns
    -------
    float
        0 for an empty patch.
    """
    r_e = tmap.r_e[facet]
    if r_e <= 0. or np.all(tmap.lengths[facet] < PATH_TOL):
        return 0.
    owner = int(tmap.owners[facet])
    basis = _element_basis(mesh, owner, k, basis)
    pts, wts = tmap.path_quadrature(2 * k, facets=[facet])
    phi = basis.eval(pts, [owner])[0]
    m_ext = np.einsum('qg,qgi,qgj->ij', wts[0], phi, phi)
    points, weights = element_quadrature(mesh, 2 * k, [owner])
    phik = basis.eval(points, [owner])[0]
    m_k = np.einsum('q,qi,qj->ij', weights[0], phik, phik)
    return math.sqrt(_max_geneig(m_ext, m_k) / r_e)


def inv_constant(mesh, element, k, basis=None):
    """ Inverse-inequality constant h_K sqrt(lambda_max(S, M)). """
    basis = _element_basis(mesh, element, k, basis)
    points, weights = element_quadrature(mesh, 2 * k, [element])
    phi = basis.eval(points, [element])[0]
    dphi = basis.grad(points, [element])[0]
    stiff = np.einsum('q,qid,qjd->ij', weights[0], dphi, dphi)
    mass = np.einsum('q,qi,qj->ij', weights[0], phi, phi)
    return mesh.diameters[element] * math.sqrt(_max_geneig(stiff, mass))


def trace_constant(mesh, element, k, basis=None):
    """ Discrete trace constant: ||v||_{dK}^2 <= C_tr^2 h_K^{-1} ||v||_K^2 on P_k.

    Uses the mass matrix of the whole element boundary, summed over its facets.
    """
    basis = _element_basis(mesh, element, k, basis)
    points, weights = element_quadrature(mesh, 2 * k, [element])
    phi = basis.eval(points, [element])[0]
    mass = np.einsum('q,qi,qj->ij', weights[0], phi, phi)
    h = mesh.diameters[element]
    _, fpoints, fweights = facet_quadrature(mesh, 2 * k, mesh.element_facets[element])
    boundary = np.zeros_like(mass)
    for pts, wts in zip(fpoints, fweights):
        phif = basis.eval(pts[None], [element])[0]
        boundary += np.einsum('q,qi,qj->ij', wts, phif, phif)
    return math.sqrt(_max_geneig(h * boundary, mass))


def admissibility_constants(mesh, tmap, k, basis=None):
    """ C_ext and C_inv per boundary facet and the global C_tr.

    Returns
    -------
    dict
        'C_ext' and 'C_inv' arrays over map facets, 'C_tr' float.
    """
    if basis is None:
        basis = PolySpace(k).basis(mesh, np.unique(tmap.owners))
    c_ext = np.array([ext_constant(mesh, b, tmap, k, basis) for b in range(tmap.n_facets)])
    c_inv = np.array([inv_constant(mesh, K, k, basis) for K in tmap.owners])
    c_tr = max(trace_constant(mesh, K, k, basis) for K in np.unique(tmap.owners))
    logging.debug('constants: max C_ext={:.4g} max C_inv={:.4g} C_tr={:.4g}'.format(
        c_ext.max(), c_inv.max(), c_tr))
    return {'C_ext': c_ext, 'C_inv': c_inv, 'C_tr': c_tr}


def lambda_bounds(p, facet, tmap, c_ext, c_inv, mesh):
    """ Left-hand side and the two right-hand sides of the Lambda estimates.

    (a) ||l^{1/2} Lambda^p||_e <= beta_e^{-1/2}/sqrt(3) r_e h_perp |||grad p|||_e
    (b) ||l^{1/2} Lambda^p||_e <= r_e^{3/2}/sqrt(3) C_ext C_inv ||p||_K

    Returns
    -------
    tuple(float, float, float)
        The (a) bound is NaN when beta_e <= 0.
    """
    owner = int(tmap.owners[facet])
    lhs = lambda_norm(p, facet, tmap)
    r_e, beta_e = tmap.r_e[facet], tmap.beta_e[facet]
    if beta_e > 0.:
        rhs_a = r_e * tmap.h_perp[facet] * gradient_triple_norm(p, facet, tmap) / math.sqrt(3. * beta_e)
    else:
        logging.warning('facet {}: beta_e={:.3g} <= 0, bound (a) undefined'.format(facet, beta_e))
        rhs_a = np.nan
    points, weights = element_quadrature(mesh, min(2 * p.degree, MAX_EXACTNESS), [owner])
    norm_k = math.sqrt(np.sum(weights[0][:, None] * p(points[0]) ** 2))
    rhs_b = r_e ** 1.5 * c_ext * c_inv * norm_k / math.sqrt(3.)
    return lhs, rhs_a, rhs_b
