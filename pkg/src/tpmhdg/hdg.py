""" Coupled state/adjoint HDG discretization with transfer-path boundary rows.

Unknowns per element K are ordered [q_x, q_y, y, p_x, p_y, z], each block
of size N = dim P_k, followed by the traces: yhat on all facets, then zhat
on all facets, each of size k + 1 per facet. The condensed system keeps
only the traces.
"""
import logging
import os

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from tpmhdg.exceptions import SingularLocalBlock
from tpmhdg.exceptions import SingularMatrix
from tpmhdg.exceptions import StabilizationViolation
from tpmhdg.polybasis import PolySpace
from tpmhdg.polybasis import edge_basis
from tpmhdg.polybasis import element_quadrature
from tpmhdg.polybasis import facet_quadrature
from tpmhdg.polybasis import poly_dim
from tpmhdg.polybasis import quadrature
from tpmhdg.projections import LOCAL_COND_MAX

RESIDUAL_TOL = 1e-9
FIELDS = ('coupled', 'state')


def _zero_scalar(points):
    return np.zeros(np.asarray(points).shape[:-1])


def _zero_vector(points):
    return np.zeros(np.asarray(points).shape)


class ProblemData(object):
    """ Data of the optimality system.

    -div(grad y) + beta.grad y = f + alpha z,  y = g on the boundary,
    -div(grad z) - beta.grad z = y_d - y,      z = g_adj on the boundary,
    with u = alpha z and alpha = 1 / gamma.

    Parameters
    ----------
    f, y_d, g, g_adj : callable
        Scalar fields, points (..., 2) -> (...).
    beta : callable
        Divergence-free velocity, points (..., 2) -> (..., 2).
    gamma : float
        Regularization; np.inf decouples the state from the adjoint.
    """
    def __init__(self, f, y_d, g, g_adj, beta, gamma=1.):
        if not gamma > 0.:
            raise ValueError('gamma must be positive')
        self.f = f
        self.y_d = y_d
        self.g = g
        self.g_adj = g_adj
        self.beta = beta
        self.gamma = gamma

    @property
    def alpha(self):
        return 0. if np.isinf(self.gamma) else 1. / self.gamma

    @classmethod
    def zero(cls, beta=None, gamma=1.):
        """ Homogeneous data. """
        return cls(_zero_scalar, _zero_scalar, _zero_scalar, _zero_scalar,
                   beta if beta is not None else _zero_vector, gamma)

    def divergence(self, points, eps=1e-5):
        """ Central-difference divergence of beta at points (n, 2). """
        points = np.asarray(points, dtype=float)
        ex, ey = np.array([eps, 0.]), np.array([0., eps])
        dbx = (self.beta(points + ex)[..., 0] - self.beta(points - ex)[..., 0]) / (2. * eps)
        dby = (self.beta(points + ey)[..., 1] - self.beta(points - ey)[..., 1]) / (2. * eps)
        return dbx + dby


class StabilizationPair(object):
    """ tau1 per facet and tau2 = tau1 - beta.n at facet nodes seen from each element.

    Attributes
    ----------
    tau1 : np.ndarray
        Shape (n_facets,)
    tau2 : np.ndarray
        Shape (n_elements, 3, n_nodes)
    beta_n : np.ndarray
        beta.n_K at the same nodes.
    margin : np.ndarray
        min over both sides of tau1 - beta.n / 2, shape (n_facets,)
    """
    def __init__(self, tau1, tau2, beta_n, margin, quad_order):
        self.tau1 = tau1
        self.tau2 = tau2
        self.beta_n = beta_n
        self.margin = margin
        self.quad_order = quad_order

    def __repr__(self):
        return "StabilizationPair(tau1 in [{:.4g}, {:.4g}], min margin {:.4g})".format(
            self.tau1.min(), self.tau1.max(), self.margin.min())

    def check(self, element_facets):
        """ Residuals of the three stabilization conditions.

        Returns
        -------
        dict
            'B1' spread of tau1 within a facet (0 by storage), 'B2' max
            |tau2 + beta.n - tau1|, 'B3' min margin (must be > 0).
        """
        b2 = np.abs(self.tau2 + self.beta_n - self.tau1[element_facets][..., None]).max()
        return {'B1': 0., 'B2': float(b2), 'B3': float(self.margin.min())}


def _element_beta_n(mesh, beta, quad_order):
    s, fpoints, _ = facet_quadrature(mesh, quad_order)
    xf = fpoints[mesh.element_facets]
    return np.sum(np.asarray(beta(xf)) * mesh.normals[:, :, None, :], axis=-1)


def _facet_margin(mesh, tau1, bn):
    side = np.min(tau1[mesh.element_facets][..., None] - 0.5 * bn, axis=2)
    margin = np.full(mesh.n_facets, np.inf)
    np.minimum.at(margin, mesh.element_facets.ravel(), side.ravel())
    return margin


def _check_margin(margin):
    worst = int(np.argmin(margin))
    if not margin[worst] > 0.:
        raise StabilizationViolation(worst, float(margin[worst]))


def select_tau(mesh, beta, tau1_value, quad_order=4):
    """ Constant tau1 on all facets, tau2 from tau1 = tau2 + beta.n.

    Parameters
    ----------
    mesh : Triangulation
    beta : callable
    tau1_value : float
    quad_order : int
        Exactness of the facet rule carrying the tau2 values.

    Returns
    -------
    StabilizationPair

    Raises
    ------
    StabilizationViolation
        If min(tau1 - beta.n / 2) <= 0 on some facet.
    """
    if not tau1_value > 0.:
        raise ValueError('tau1 must be positive')
    tau1 = np.full(mesh.n_facets, float(tau1_value))
    bn = _element_beta_n(mesh, beta, quad_order)
    tau2 = tau1[mesh.element_facets][..., None] - bn
    margin = _facet_margin(mesh, tau1, bn)
    _check_margin(margin)
    return StabilizationPair(tau1, tau2, bn, margin, quad_order)


class SystemLayout(object):
    """ Unknown ordering of an assembled system. """
    def __init__(self, mode, fields, n_elements, n_facets, k):
        self.mode = mode
        self.fields = fields
        self.n_elements = n_elements
        self.n_facets = n_facets
        self.degree = k
        self.n_basis = poly_dim(k)
        self.n_trace = k + 1
        nblocks = 6 if fields == 'coupled' else 3
        self.n_local = nblocks * self.n_basis
        self.n_local_trace = nblocks * self.n_trace
        self.n_traces = (2 if fields == 'coupled' else 1) * n_facets * self.n_trace
        self.trace_offset = n_elements * self.n_local if mode == 'monolithic' else 0

    @property
    def size(self):
        return self.trace_offset + self.n_traces

    def describe(self):
        """ Human-readable block layout. """
        names = ['q_x', 'q_y', 'y', 'p_x', 'p_y', 'z'][:self.n_local // self.n_basis]
        lines = ['mode={} fields={} size={}'.format(self.mode, self.fields, self.size)]
        if self.mode == 'monolithic':
            lines.append('[0, {}): element blocks of {} = [{}] x {}'.format(
                self.trace_offset, self.n_local, ', '.join(names), self.n_basis))
        lines.append('[{}, {}): yhat, {} per facet'.format(
            self.trace_offset, self.trace_offset + self.n_facets * self.n_trace, self.n_trace))
        if self.fields == 'coupled':
            lines.append('[{}, {}): zhat, {} per facet'.format(
                self.trace_offset + self.n_facets * self.n_trace, self.size, self.n_trace))
        return '\n'.join(lines)


class LinearSystem(object):
    """ Assembled sparse system with its unknown layout.

    Condensed systems also carry the element-local reconstruction
    u_K = A^{-1} F - A^{-1} B lambda_K.
    """
    def __init__(self, matrix, rhs, layout, alpha, basis, trace_dofs, local_rhs=None, local_trace=None):
        self.matrix = matrix
        self.rhs = rhs
        self.layout = layout
        self.alpha = alpha
        self.basis = basis
        self.trace_dofs = trace_dofs
        self.local_rhs = local_rhs
        self.local_trace = local_trace

    @property
    def shape(self):
        return self.matrix.shape

    def __repr__(self):
        return "LinearSystem({}, {} x {}, nnz={})".format(
            self.layout.mode, self.shape[0], self.shape[1], self.matrix.nnz)


def path_integral_matrix(tmap, basis, exactness):
    """ Path integrals of all owner basis functions at all transfer nodes.

    Returns
    -------
    np.ndarray
        Shape (n_map_facets, n_nodes, N, 2): int_0^l phi_i(x + s m) m_d ds.
    """
    rule = quadrature('segment', exactness)
    pts, _ = tmap.path_quadrature(exactness)
    nb, nq, ng, _ = pts.shape
    phi = basis.eval(pts.reshape(nb, nq * ng, 2), tmap.owners).reshape(nb, nq, ng, -1)
    return np.einsum('bq,g,bqgi,bqd->bqid', tmap.lengths, rule.weights, phi, tmap.directions)


def tpm_path_integral(tmap, facet, node, fn, exactness=4):
    """ int_0^l E(fn)(x + s m) . m ds at one transfer node.

    Parameters
    ----------
    tmap : TransferMap
    facet : int
        Position of the facet in the map.
    node : int
        Node index on the facet.
    fn : callable
        Vector field, points (n, 2) -> (n, 2), evaluated by natural extension.
    exactness : int
        Segment rule exactness (2k + 2 in assembly).
    """
    length = tmap.lengths[facet, node]
    if length <= 0.:
        return 0.
    rule = quadrature('segment', exactness)
    x, m = tmap.points[facet, node], tmap.directions[facet, node]
    vals = np.asarray(fn(x[None, :] + length * rule.nodes[:, None] * m[None, :]))
    return float(length * np.sum(rule.weights * (vals @ m)))


def _local_blocks(mesh, tmap, data, tau, k, basis):
    n = poly_dim(k)
    nm = k + 1
    order = 2 * k + 2
    if tmap.quad_order < order:
        logging.warning('transfer map built with exactness {} < {}; boundary rows are under-integrated'.format(
            tmap.quad_order, order))
    alpha = data.alpha
    n_el = mesh.n_elements
    ef = mesh.element_facets

    xv, wv = element_quadrature(mesh, order)
    phi = basis.eval(xv)
    dphi = basis.grad(xv)
    beta_v = np.asarray(data.beta(xv))
    mass = np.einsum('eq,eqi,eqj->eij', wv, phi, phi)
    gx = np.einsum('eq,eqi,eqj->eji', wv, phi, dphi[..., 0])
    gy = np.einsum('eq,eqi,eqj->eji', wv, phi, dphi[..., 1])
    conv = np.einsum('eq,eqd,eqjd,eqi->eji', wv, beta_v, dphi, phi)
    f_vec = np.einsum('eq,eq,eqj->ej', wv, data.f(xv), phi)
    yd_vec = np.einsum('eq,eq,eqj->ej', wv, data.y_d(xv), phi)

    s, fpoints, fweights = facet_quadrature(mesh, order)
    nq = len(s)
    xf, wf = fpoints[ef], fweights[ef]
    phif = basis.eval(xf.reshape(n_el, 3 * nq, 2)).reshape(n_el, 3, nq, n)
    mu = edge_basis(s, k)[None, None] / np.sqrt(mesh.facet_lengths[ef])[..., None, None]
    nk = mesh.normals
    bn = np.sum(np.asarray(data.beta(xf)) * nk[:, :, None, :], axis=-1)
    tau1 = tau.tau1[ef]
    tau2 = tau1[..., None] - bn
    _check_margin(_facet_margin(mesh, tau.tau1, bn))

    ff = np.einsum('elq,elqj,elqi->elji', wf, phif, phif)
    ff_tau2 = np.einsum('elq,elq,elqj,elqi->elji', wf, tau2, phif, phif)
    fm = np.einsum('elq,elqj,elqm->eljm', wf, phif, mu)
    fm_tau2 = np.einsum('elq,elq,elqj,elqm->eljm', wf, tau2, phif, mu)
    mmu = np.einsum('elq,elqm,elqn->elmn', wf, mu, mu)
    mmu_tau2 = np.einsum('elq,elq,elqm,elqn->elmn', wf, tau2, mu, mu)
    fnx = np.einsum('el,elji->eji', nk[..., 0], ff)
    fny = np.einsum('el,elji->eji', nk[..., 1], ff)
    ftau1 = np.einsum('el,elji->eji', tau1, ff)
    ftau2 = ff_tau2.sum(axis=1)

    QX, QY, Y, PX, PY, Z = [slice(i * n, (i + 1) * n) for i in range(6)]

    def yh(l):
        return slice(l * nm, (l + 1) * nm)

    def zh(l):
        return slice((3 + l) * nm, (4 + l) * nm)

    a = np.zeros((n_el, 6 * n, 6 * n))
    a[:, QX, QX] = mass
    a[:, QX, Y] = -gx
    a[:, QY, QY] = mass
    a[:, QY, Y] = -gy
    a[:, Y, QX] = -gx + fnx
    a[:, Y, QY] = -gy + fny
    a[:, Y, Y] = -conv + ftau1
    a[:, Y, Z] = -alpha * mass
    a[:, PX, PX] = mass
    a[:, PX, Z] = -gx
    a[:, PY, PY] = mass
    a[:, PY, Z] = -gy
    a[:, Z, PX] = -gx + fnx
    a[:, Z, PY] = -gy + fny
    a[:, Z, Z] = conv + ftau2
    a[:, Z, Y] = mass

    rhs = np.zeros((n_el, 6 * n))
    rhs[:, Y] = f_vec
    rhs[:, Z] = yd_vec

    b = np.zeros((n_el, 6 * n, 6 * nm))
    c = np.zeros((n_el, 6 * nm, 6 * n))
    d = np.zeros((n_el, 6 * nm, 6 * nm))
    r = np.zeros((n_el, 6 * nm))
    nx, ny = nk[..., 0, None, None], nk[..., 1, None, None]
    fmt = fm.transpose(0, 1, 3, 2)
    for l in range(3):
        b[:, QX, yh(l)] = nx[:, l] * fm[:, l]
        b[:, QY, yh(l)] = ny[:, l] * fm[:, l]
        b[:, Y, yh(l)] = -fm_tau2[:, l]
        b[:, PX, zh(l)] = nx[:, l] * fm[:, l]
        b[:, PY, zh(l)] = ny[:, l] * fm[:, l]
        b[:, Z, zh(l)] = -tau1[:, l, None, None] * fm[:, l]

        inner = mesh.facet_elements[ef[:, l], 1] >= 0
        c[inner, yh(l), QX] = (nx[:, l] * fmt[:, l])[inner]
        c[inner, yh(l), QY] = (ny[:, l] * fmt[:, l])[inner]
        c[inner, yh(l), Y] = (tau1[:, l, None, None] * fmt[:, l])[inner]
        d[inner, yh(l), yh(l)] = -mmu_tau2[inner, l]
        c[inner, zh(l), PX] = (nx[:, l] * fmt[:, l])[inner]
        c[inner, zh(l), PY] = (ny[:, l] * fmt[:, l])[inner]
        c[inner, zh(l), Z] = fm_tau2[inner, l].transpose(0, 2, 1)
        d[inner, zh(l), zh(l)] = (-tau1[:, l, None, None] * mmu[:, l])[inner]

    # transfer-path rows on boundary facets
    position = -np.ones(mesh.n_facets, dtype=int)
    position[tmap.facets] = np.arange(tmap.n_facets)
    mu_map = edge_basis(tmap.s_nodes, k)[None] / np.sqrt(tmap.facet_lengths)[:, None, None]
    mmu_map = np.einsum('bq,bqm,bqn->bmn', tmap.weights, mu_map, mu_map)
    paths = path_integral_matrix(tmap, basis, order)
    tpm = np.einsum('bq,bqm,bqid->bdmi', tmap.weights, mu_map, paths)
    g_vec = np.einsum('bq,bqm,bq->bm', tmap.weights, mu_map, data.g(tmap.mapped))
    gadj_vec = np.einsum('bq,bqm,bq->bm', tmap.weights, mu_map, data.g_adj(tmap.mapped))
    for l in range(3):
        owners = np.nonzero(mesh.facet_elements[ef[:, l], 1] < 0)[0]
        if len(owners) == 0:
            continue
        pos = position[ef[owners, l]]
        c[owners, yh(l), QX] = -tpm[pos, 0]
        c[owners, yh(l), QY] = -tpm[pos, 1]
        d[owners, yh(l), yh(l)] = mmu_map[pos]
        r[owners, yh(l)] = g_vec[pos]
        c[owners, zh(l), PX] = -tpm[pos, 0]
        c[owners, zh(l), PY] = -tpm[pos, 1]
        d[owners, zh(l), zh(l)] = mmu_map[pos]
        r[owners, zh(l)] = gadj_vec[pos]

    modes = np.arange(nm)
    yhat_dofs = (ef[:, :, None] * nm + modes).reshape(n_el, 3 * nm)
    trace_dofs = np.concatenate([yhat_dofs, mesh.n_facets * nm + yhat_dofs], axis=1)
    return {'A': a, 'B': b, 'C': c, 'D': d, 'F': rhs, 'R': r, 'dofs': trace_dofs}


def _select_fields(blocks, fields, k):
    if fields == 'coupled':
        return blocks
    if fields not in FIELDS:
        raise ValueError('unknown field selection: {}'.format(fields))
    nu, nl = 3 * poly_dim(k), 3 * (k + 1)
    return {'A': blocks['A'][:, :nu, :nu], 'B': blocks['B'][:, :nu, :nl],
            'C': blocks['C'][:, :nl, :nu], 'D': blocks['D'][:, :nl, :nl],
            'F': blocks['F'][:, :nu], 'R': blocks['R'][:, :nl], 'dofs': blocks['dofs'][:, :nl]}


def _coo(rows, cols, vals, size):
    rows = np.concatenate([np.broadcast_to(r, v.shape).ravel() for r, v in zip(rows, vals)])
    cols = np.concatenate([np.broadcast_to(c, v.shape).ravel() for c, v in zip(cols, vals)])
    data = np.concatenate([v.ravel() for v in vals])
    keep = data != 0.
    mat = coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(size, size)).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


def _prepare(mesh, tmap, data, tau, k, fields, basis):
    if basis is None:
        basis = PolySpace(k).basis(mesh)
    blocks = _select_fields(_local_blocks(mesh, tmap, data, tau, k, basis), fields, k)
    return basis, blocks


def assemble_monolithic(mesh, tmap, data, tau, k, fields='coupled', basis=None):
    """ One sparse system over element and trace unknowns.

    Parameters
    ----------
    mesh : Triangulation
    tmap : TransferMap
        Built on the same mesh.
    data : ProblemData
    tau : StabilizationPair
    k : int
        Polynomial degree.
    fields : str
        'coupled' (state and adjoint) or 'state' (q, y, yhat only).

    Returns
    -------
    LinearSystem
    """
    basis, blk = _prepare(mesh, tmap, data, tau, k, fields, basis)
    layout = SystemLayout('monolithic', fields, mesh.n_elements, mesh.n_facets, k)
    nl = layout.n_local
    edofs = np.arange(mesh.n_elements)[:, None] * nl + np.arange(nl)[None, :]
    tdofs = layout.trace_offset + blk['dofs']
    mat = _coo([edofs[:, :, None], edofs[:, :, None], tdofs[:, :, None], tdofs[:, :, None]],
               [edofs[:, None, :], tdofs[:, None, :], edofs[:, None, :], tdofs[:, None, :]],
               [blk['A'], blk['B'], blk['C'], blk['D']], layout.size)
    rhs = np.zeros(layout.size)
    rhs[edofs.ravel()] = blk['F'].ravel()
    np.add.at(rhs, tdofs.ravel(), blk['R'].ravel())
    logging.debug('monolithic system: {} unknowns, nnz={}'.format(layout.size, mat.nnz))
    return LinearSystem(mat, rhs, layout, data.alpha, basis, blk['dofs'])


def _local_solve(a, rhs):
    cond = np.linalg.cond(a)
    bad = np.nonzero(~np.isfinite(cond) | (cond > LOCAL_COND_MAX))[0]
    if len(bad) > 0:
        raise SingularLocalBlock(int(bad[0]))
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        for element in range(a.shape[0]):
            try:
                np.linalg.solve(a[element], rhs[element])
            except np.linalg.LinAlgError:
                raise SingularLocalBlock(element)
        raise


def assemble_condensed(mesh, tmap, data, tau, k, fields='coupled', basis=None):
    """ Schur complement onto the trace unknowns.

    Element unknowns are eliminated with u_K = A^{-1}(F - B lambda_K); the
    transfer-path rows then couple the traces of the boundary element
    through its local solve.

    Returns
    -------
    LinearSystem

    Raises
    ------
    SingularLocalBlock
    """
    basis, blk = _prepare(mesh, tmap, data, tau, k, fields, basis)
    layout = SystemLayout('condensed', fields, mesh.n_elements, mesh.n_facets, k)
    sol = _local_solve(blk['A'], np.concatenate([blk['F'][..., None], blk['B']], axis=2))
    ainv_f, ainv_b = sol[..., 0], sol[..., 1:]
    schur = blk['D'] - blk['C'] @ ainv_b
    reduced = blk['R'] - np.einsum('eij,ej->ei', blk['C'], ainv_f)
    dofs = blk['dofs']
    mat = _coo([dofs[:, :, None]], [dofs[:, None, :]], [schur], layout.size)
    rhs = np.zeros(layout.size)
    np.add.at(rhs, dofs.ravel(), reduced.ravel())
    logging.debug('condensed system: {} unknowns, nnz={}'.format(layout.size, mat.nnz))
    return LinearSystem(mat, rhs, layout, data.alpha, basis, dofs, ainv_f, ainv_b)


def assemble(mesh, tmap, data, tau, k, mode='condensed', fields='coupled'):
    """ Assemble in the requested mode; condensation falls back to monolithic
    assembly when a local block is singular. """
    if mode == 'monolithic':
        return assemble_monolithic(mesh, tmap, data, tau, k, fields)
    if mode != 'condensed':
        raise ValueError('unknown assembly mode: {}'.format(mode))
    try:
        return assemble_condensed(mesh, tmap, data, tau, k, fields)
    except SingularLocalBlock as err:
        logging.warning('{}; falling back to monolithic assembly'.format(err))
        return assemble_monolithic(mesh, tmap, data, tau, k, fields)


class HDGSolution(object):
    """ Element and trace coefficients of a discrete solution.

    Attributes
    ----------
    q, p : np.ndarray
        Shape (n_elements, 2, N)
    y, z, u : np.ndarray
        Shape (n_elements, N); u = alpha z.
    yhat, zhat : np.ndarray
        Shape (n_facets, k + 1)
    """
    FIELDS = ('q', 'y', 'yhat', 'p', 'z', 'zhat', 'u')

    def __init__(self, q, y, yhat, p, z, zhat, alpha, degree, basis=None, diagnostics=None):
        self.q = q
        self.y = y
        self.yhat = yhat
        self.p = p
        self.z = z
        self.zhat = zhat
        self.alpha = alpha
        self.u = alpha * z
        self.degree = degree
        self.basis = basis
        self.diagnostics = diagnostics if diagnostics is not None else {}

    def __repr__(self):
        return "HDGSolution(k={}, {} elements, {} facets)".format(
            self.degree, self.y.shape[0], self.yhat.shape[0])

    def norms(self):
        """ L2 norms of all fields; the bases are orthonormal, so these are
        Euclidean norms of the coefficients. """
        return {name: float(np.linalg.norm(getattr(self, name))) for name in self.FIELDS}

    def to_csv(self, outdir, prefix='solution'):
        """ Write one CSV per field with element_id/facet_id and coefficients. """
        for name in self.FIELDS:
            values = getattr(self, name)
            key = 'facet_id' if name in ('yhat', 'zhat') else 'element_id'
            if values.ndim == 3:
                cols = ['{}{}'.format(comp, i) for comp in ('x_c', 'y_c') for i in range(values.shape[2])]
                values = values.reshape(values.shape[0], -1)
            else:
                cols = ['c{}'.format(i) for i in range(values.shape[1])]
            frame = pd.DataFrame(values, columns=cols)
            frame.insert(0, key, np.arange(len(frame)))
            frame.to_csv(os.path.join(outdir, '{}_{}.csv'.format(prefix, name)),
                         index=False, float_format='%.12e')


def solve(system):
    """ Sparse LU solve and unpacking of all fields.

    Returns
    -------
    HDGSolution

    Raises
    ------
    SingularMatrix
    """
    mat = system.matrix.tocsc()
    try:
        lu = splu(mat)
    except RuntimeError as err:
        raise SingularMatrix('sparse factorization failed: {}'.format(err))
    x = lu.solve(system.rhs)
    if not np.all(np.isfinite(x)):
        raise SingularMatrix('non-finite solution')
    bnorm = np.linalg.norm(system.rhs)
    residual = np.linalg.norm(mat @ x - system.rhs) / bnorm if bnorm > 0. else float(np.linalg.norm(mat @ x))
    if residual > RESIDUAL_TOL:
        logging.warning('relative residual {:.3e} exceeds {:.0e}'.format(residual, RESIDUAL_TOL))

    layout = system.layout
    n, nm = layout.n_basis, layout.n_trace
    n_el, n_f = layout.n_elements, layout.n_facets
    traces = x[layout.trace_offset:]
    if layout.mode == 'monolithic':
        local = x[:layout.trace_offset].reshape(n_el, layout.n_local)
    else:
        local = system.local_rhs - np.einsum('eij,ej->ei', system.local_trace, traces[system.trace_dofs])

    q = local[:, :2 * n].reshape(n_el, 2, n)
    y = local[:, 2 * n:3 * n]
    yhat = traces[:n_f * nm].reshape(n_f, nm)
    if layout.fields == 'coupled':
        p = local[:, 3 * n:5 * n].reshape(n_el, 2, n)
        z = local[:, 5 * n:6 * n]
        zhat = traces[n_f * nm:].reshape(n_f, nm)
    else:
        p, z, zhat = np.zeros_like(q), np.zeros_like(y), np.zeros_like(yhat)

    diagnostics = {'mode': layout.mode,
                   'fields': layout.fields,
                   'n_elements': n_el,
                   'n_facets': n_f,
                   'n_unknowns': layout.size,
                   'nnz': int(mat.nnz),
                   'fill': float(lu.L.nnz + lu.U.nnz) / max(mat.nnz, 1),
                   'residual': float(residual)}
    logging.debug('solve: ' + ' '.join('{}={}'.format(key, val) for key, val in diagnostics.items()))
    return HDGSolution(q, y, yhat, p, z, zhat, system.alpha, layout.degree, system.basis, diagnostics)


def solve_state(mesh, tmap, f, g, beta, tau, k):
    """ Standalone convection-diffusion HDG solve for (q, y, yhat). """
    data = ProblemData(f, _zero_scalar, g, _zero_scalar, beta, gamma=np.inf)
    return solve(assemble_monolithic(mesh, tmap, data, tau, k, fields='state'))


def _traces_on_faces(sol, mesh, order):
    s, fpoints, fweights = facet_quadrature(mesh, order)
    ef = mesh.element_facets
    n_el, nq = mesh.n_elements, len(s)
    phif = sol.basis.eval(fpoints[ef].reshape(n_el, 3 * nq, 2)).reshape(n_el, 3, nq, -1)
    mu = edge_basis(s, sol.degree)[None, None] / np.sqrt(mesh.facet_lengths[ef])[..., None, None]
    return fpoints[ef], fweights[ef], phif, mu


def discrete_energy(sol, mesh, beta, tau1, gamma):
    """ gamma ||q||^2 + ||p||^2 + gamma ||(tau1 - beta.n/2)^{1/2}(y - yhat)||^2_{dT}
    + ||(tau2 + beta.n/2)^{1/2}(z - zhat)||^2_{dT}. """
    order = 2 * sol.degree + 2
    xf, wf, phif, mu = _traces_on_faces(sol, mesh, order)
    ef = mesh.element_facets
    bn = np.sum(np.asarray(beta(xf)) * mesh.normals[:, :, None, :], axis=-1)
    weight = np.asarray(tau1)[ef][..., None] - 0.5 * bn if np.ndim(tau1) else tau1 - 0.5 * bn
    jump_y = np.einsum('elqn,en->elq', phif, sol.y) - np.einsum('elqm,elm->elq', mu, sol.yhat[ef])
    jump_z = np.einsum('elqn,en->elq', phif, sol.z) - np.einsum('elqm,elm->elq', mu, sol.zhat[ef])
    # tau2 + beta.n/2 equals tau1 - beta.n/2
    faces = np.sum(wf * weight * (gamma * jump_y ** 2 + jump_z ** 2))
    return float(gamma * np.sum(sol.q ** 2) + np.sum(sol.p ** 2) + faces)


def objective(sol, mesh, data):
    """ 1/2 ||y_h - y_d||^2 + gamma/2 ||u_h||^2 over the mesh. """
    xv, wv = element_quadrature(mesh, min(2 * sol.degree + 4, 12))
    yh = np.einsum('eqn,en->eq', sol.basis.eval(xv), sol.y)
    misfit = 0.5 * np.sum(wv * (yh - data.y_d(xv)) ** 2)
    reg = 0. if np.isinf(data.gamma) else 0.5 * data.gamma * np.sum(sol.u ** 2)
    return float(misfit + reg)

