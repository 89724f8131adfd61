""" Transfer paths from the computational boundary to the curved boundary
and the closeness assumptions that quantify their quality.
"""
import logging
import math
import os
import warnings

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from tpmhdg.exceptions import NoRootInRange
from tpmhdg.exceptions import NonBijectiveWarning
from tpmhdg.geometry import ray_intersect
from tpmhdg.polybasis import quadrature

STRATEGIES = ('facet-normal', 'vertex-averaged-normal')
SEGMENT_TOL = 1e-10
BIJECTIVE_TOL = 1e-10

CLOSENESS_RHS = {'A1': 1. / 32., 'A2': 0.25, 'A3': 0.25, 'A4': 0.25, 'A5': 0.25}


def _normalize(vec, fallback):
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    ok = norm > 1e-12
    return np.where(ok, vec / np.where(ok, norm, 1.), fallback)


class TransferMap(object):
    """ Transfer data of all boundary facets of a mesh.

    Arrays are indexed by the position b of a facet in the map
    (0 <= b < n_facets), node arrays additionally by the facet quadrature
    node. Facet nodes follow the mesh parametrization (lower to higher
    vertex index); vertex arrays hold (v1, v2) where v2 -> v1 is the
    counter-clockwise traversal around the owner element.
    """
    def __init__(self, **fields):
        for key, value in fields.items():
            setattr(self, key, value)

    @property
    def n_facets(self):
        return len(self.facets)

    @property
    def R(self):
        return float(self.r_e.max(initial=0.))

    @property
    def max_t_norm(self):
        return float(self.t_norm.max(initial=0.))

    @property
    def max_H_perp(self):
        return float(self.H_perp.max(initial=0.))

    def __repr__(self):
        return "TransferMap({}, {} boundary facets, R={:.4g})".format(self.strategy, self.n_facets, self.R)

    def path_quadrature(self, exactness, facets=None):
        """ Facet x path tensor quadrature over the swept patches.

        Returns
        -------
        points : np.ndarray
            Shape (n_sel, n_nodes, n_path, 2), x + t m(x).
        weights : np.ndarray
            Shape (n_sel, n_nodes, n_path), facet weight times l(x) times
            the path weight.
        """
        if facets is None:
            facets = np.arange(self.n_facets)
        rule = quadrature('segment', exactness)
        x = self.points[facets]
        m = self.directions[facets]
        length = self.lengths[facets]
        points = x[:, :, None, :] + (length[:, :, None] * rule.nodes[None, None, :])[..., None] * m[:, :, None, :]
        weights = self.weights[facets][:, :, None] * length[:, :, None] * rule.weights[None, None, :]
        return points, weights

    def proximity_exponent(self, coarser=None):
        """ Estimate delta in max H_perp <= C h^{1 + delta}.

        With a coarser map of the same family the slope between the two
        refinements is returned, otherwise log(max H / h) / log h.
        """
        fine_ratio = self.max_H_perp / self.h
        if coarser is not None:
            coarse_ratio = coarser.max_H_perp / coarser.h
            if fine_ratio <= 0. or coarse_ratio <= 0.:
                return np.inf
            return math.log(coarse_ratio / fine_ratio) / math.log(coarser.h / self.h)
        if fine_ratio <= 0.:
            return np.inf
        return math.log(fine_ratio) / math.log(self.h)

    def m_conditions(self):
        """ Direction conditions at the facet vertices.

        1. m(v1).m(v2) >= 0, 2. min m.n >= beta_e > 0, 3. m(v1).rot(m(v2)) >= 0
        with rot the counter-clockwise rotation by pi/2.
        """
        m1, m2 = self.vertex_directions[:, 0], self.vertex_directions[:, 1]
        dot = np.sum(m1 * m2, axis=1)
        cross = np.sum(m1 * np.stack([-m2[:, 1], m2[:, 0]], axis=1), axis=1)
        return pd.DataFrame({'facet_id': self.facets,
                             'm1_dot_m2': dot,
                             'beta_e': self.beta_e,
                             'm1_dot_rot_m2': cross,
                             'cond1': dot >= -1e-12,
                             'cond2': self.beta_e > 0.,
                             'cond3': cross >= -1e-12})

    def to_frame(self):
        """ Per-facet diagnostics. """
        return pd.DataFrame({'facet_id': self.facets,
                             'H_perp': self.H_perp,
                             'h_perp': self.h_perp,
                             'r_e': self.r_e,
                             'beta_e': self.beta_e,
                             'max_t_norm': self.t_norm})

    def export_csv(self, filename):
        """ Write the per-facet diagnostics as CSV. """
        self.to_frame().to_csv(filename, index=False, float_format='%.10e')


def _vertex_directions(mesh, bfacets, normals):
    acc = np.zeros((mesh.n_vertices, 2))
    np.add.at(acc, mesh.facets[bfacets, 0], normals)
    np.add.at(acc, mesh.facets[bfacets, 1], normals)
    return acc


def _cast_rays(domain, points, directions, fallbacks, t_max):
    """ Path lengths for rays from points (n, q, 2).

    A node whose ray has no sign change of F within t_max retries along
    each fallback direction field in turn, the last being the normalized
    level-set gradient at the node. Returns the lengths and the directions
    actually used, and the number of retried nodes.
    """
    lengths = np.zeros(points.shape[:2])
    directions = directions.copy()
    grad = domain.gradient(points)
    candidates = list(fallbacks) + [_normalize(grad, directions)]
    retried = 0
    for i, j in np.ndindex(*points.shape[:2]):
        try:
            lengths[i, j] = ray_intersect(domain, points[i, j], directions[i, j], t_max)
            continue
        except NoRootInRange as err:
            error = err
        retried += 1
        for field in candidates:
            try:
                lengths[i, j] = ray_intersect(domain, points[i, j], field[i, j], t_max)
            except NoRootInRange:
                continue
            directions[i, j] = field[i, j]
            break
        else:
            raise error
    return lengths, directions, retried


def build_transfer_map(mesh, domain, strategy='facet-normal', quad_order=4, t_max=None):
    """ Cast transfer paths from the boundary facets to the curved boundary.

    Parameters
    ----------
    mesh : Triangulation
    domain : ImplicitDomain
    strategy : str
        'facet-normal' (m = n_e) or 'vertex-averaged-normal' (m interpolated
        between averaged vertex normals and renormalized). Nodes whose ray
        misses the boundary within t_max fall back to the averaged direction,
        then to the level-set gradient.
    quad_order : int
        Exactness of the facet quadrature carrying the transfer nodes.
    t_max : float or None
        Ray search length. Default: 4 h_max.

    Returns
    -------
    TransferMap
    """
    if strategy not in STRATEGIES:
        raise ValueError('unknown transfer strategy: {}'.format(strategy))
    bf = mesh.boundary_facets
    if len(bf) == 0:
        raise ValueError('mesh has no boundary facets')
    if t_max is None:
        t_max = 4. * mesh.h_max

    owners = mesh.facet_elements[bf, 0]
    local = mesh.facet_local[bf, 0]
    normals = mesh.normals[owners, local]
    rule = quadrature('segment', quad_order)
    a = mesh.vertices[mesh.facets[bf, 0]]
    b = mesh.vertices[mesh.facets[bf, 1]]
    points = a[:, None, :] + rule.nodes[None, :, None] * (b - a)[:, None, :]
    weights = rule.weights[None, :] * mesh.facet_lengths[bf][:, None]

    tri = mesh.triangles[owners]
    rows = np.arange(len(bf))
    v_start, v_end = tri[rows, (local + 1) % 3], tri[rows, (local + 2) % 3]
    vertex_ids = np.stack([v_end, v_start], axis=1)
    vertex_points = mesh.vertices[vertex_ids]

    nfix = np.broadcast_to(normals[:, None, :], points.shape)
    vfix = np.broadcast_to(normals[:, None, :], vertex_points.shape)
    acc = _vertex_directions(mesh, bf, normals)
    ma = _normalize(acc[mesh.facets[bf, 0]], normals)
    mb = _normalize(acc[mesh.facets[bf, 1]], normals)
    s = rule.nodes[None, :, None]
    averaged = _normalize((1. - s) * ma[:, None, :] + s * mb[:, None, :], nfix)
    vertex_averaged = _normalize(acc[vertex_ids], vfix)
    if strategy == 'facet-normal':
        directions, vertex_directions = nfix, vfix
        fallbacks, vertex_fallbacks = [averaged], [vertex_averaged]
    else:
        directions, vertex_directions = averaged, vertex_averaged
        fallbacks, vertex_fallbacks = [], []

    lengths, directions, retried = _cast_rays(domain, points, directions, fallbacks, t_max)
    vertex_lengths, vertex_directions, vretried = _cast_rays(
        domain, vertex_points, vertex_directions, vertex_fallbacks, t_max)
    if retried + vretried:
        logging.warning('{} transfer rays found no boundary along the {} direction, '
                        'fallback direction used'.format(retried + vretried, strategy))
    mapped = points + lengths[..., None] * directions
    vertex_mapped = vertex_points + vertex_lengths[..., None] * vertex_directions

    mn = np.sum(directions * normals[:, None, :], axis=2)
    vmn = np.sum(vertex_directions * normals[:, None, :], axis=2)
    tangential = directions - mn[..., None] * normals[:, None, :]
    vtangential = vertex_directions - vmn[..., None] * normals[:, None, :]

    H_perp = np.maximum((lengths * mn).max(axis=1), (vertex_lengths * vmn).max(axis=1))
    H_perp = np.maximum(H_perp, 0.)
    h_perp = 2. * mesh.areas[owners] / mesh.facet_lengths[bf]
    r_e = H_perp / h_perp
    beta_e = np.minimum(mn.min(axis=1), vmn.min(axis=1))
    t_norm = np.maximum(np.linalg.norm(tangential, axis=2).max(axis=1),
                        np.linalg.norm(vtangential, axis=2).max(axis=1))

    frac = np.arange(1, 6) / 6.
    samples = np.concatenate([
        points[:, :, None, :] + (lengths[:, :, None] * frac)[..., None] * directions[:, :, None, :],
        vertex_points[:, :, None, :] + (vertex_lengths[:, :, None] * frac)[..., None] * vertex_directions[:, :, None, :],
    ], axis=1)
    segments_inside = np.all(domain.evaluate(samples) <= SEGMENT_TOL, axis=(1, 2))
    if not segments_inside.all():
        logging.warning('{} transfer patches leave the closure of the domain'.format(
            int((~segments_inside).sum())))

    pairs = cKDTree(mapped.reshape(-1, 2)).query_pairs(BIJECTIVE_TOL)
    if pairs:
        warnings.warn('{} pairs of transfer nodes map to the same boundary point'.format(len(pairs)),
                      category=NonBijectiveWarning)

    proximity = float((lengths.max(axis=1) / mesh.diameters[owners]).max())
    tmap = TransferMap(facets=bf, owners=owners, local_facets=local, normals=normals,
                       facet_lengths=mesh.facet_lengths[bf], s_nodes=rule.nodes,
                       points=points, weights=weights, directions=directions, lengths=lengths,
                       mapped=mapped, tangential=tangential,
                       vertex_ids=vertex_ids, vertex_points=vertex_points,
                       vertex_directions=vertex_directions, vertex_lengths=vertex_lengths,
                       vertex_mapped=vertex_mapped,
                       H_perp=H_perp, h_perp=h_perp, r_e=r_e, beta_e=beta_e, t_norm=t_norm,
                       segments_inside=segments_inside, n_nonbijective=len(pairs), n_fallback=retried + vretried,
                       proximity_constant=proximity, h=float(mesh.facet_lengths[bf].max()),
                       strategy=strategy, quad_order=quad_order)
    logging.debug('transfer map: {} facets, R={:.4g}, max l={:.4g}, max |t|={:.4g}'.format(
        len(bf), tmap.R, float(lengths.max()), tmap.max_t_norm))
    return tmap


def closeness_terms(r_e, h_perp, beta_e, max_l, tau_state, tau_adjoint, c_ext, c_inv, t_norm, c_tr):
    """ Left- and right-hand sides of the closeness assumptions A1 to A6.

    Parameters
    ----------
    r_e, h_perp, beta_e, max_l : array-like
        Patch metrics per facet.
    tau_state : array-like
        max over the facet of tau1 - beta.n / 2.
    tau_adjoint : array-like
        max over the facet of tau2 + beta.n / 2.
    c_ext, c_inv : array-like
        Extrapolation and inverse constants per facet.
    t_norm : float
        Global maximum of the tangential component of m.
    c_tr : float
        Discrete trace constant.

    Returns
    -------
    dict
        name -> (lhs, rhs) arrays.
    """
    r_e, h_perp, max_l = np.asarray(r_e, float), np.asarray(h_perp, float), np.asarray(max_l, float)
    beta_e = np.asarray(beta_e, float)
    with np.errstate(divide='ignore', invalid='ignore'):
        a1 = np.where(beta_e > 0., r_e ** 3 * np.asarray(c_ext) ** 2 * np.asarray(c_inv) ** 2
                      / np.where(beta_e > 0., beta_e, 1.) ** 2, np.inf)
        a1 = np.where(r_e == 0., 0., a1)
        rhs6 = np.where(beta_e > 0., beta_e, 0.) / (98. * c_tr ** 2)
    one = np.ones_like(r_e)
    return {
        'A1': (a1, CLOSENESS_RHS['A1'] * one),
        'A2': (r_e * h_perp * np.asarray(tau_state), CLOSENESS_RHS['A2'] * one),
        'A3': (r_e * h_perp * np.asarray(tau_adjoint), CLOSENESS_RHS['A3'] * one),
        'A4': (2. * max_l * np.asarray(tau_state), CLOSENESS_RHS['A4'] * one),
        'A5': (2. * max_l * np.asarray(tau_adjoint), CLOSENESS_RHS['A5'] * one),
        'A6': (r_e * t_norm ** 2, rhs6 * one),
    }


class AdmissibilityReport(object):
    """ Result of check_closeness.

    Attributes
    ----------
    facets : pd.DataFrame
        One row per boundary facet with metrics, constants and the
        left-hand side, right-hand side and flag of every assumption.
    constants : dict
        Global quantities (C_tr, tau ranges, ||beta||_inf, R, ...).
    delta : float
        Proximity exponent estimate.
    """
    ASSUMPTIONS = ('A1', 'A2', 'A3', 'A4', 'A5', 'A6')

    def __init__(self, facets, constants, delta):
        self.facets = facets
        self.constants = constants
        self.delta = delta

    @property
    def flags(self):
        return {name: bool(self.facets[name].all()) for name in self.ASSUMPTIONS}

    @property
    def passed(self):
        return all(self.flags.values())

    def __repr__(self):
        return "AdmissibilityReport({})".format(
            ', '.join('{}={}'.format(k, 'pass' if v else 'fail') for k, v in self.flags.items()))

    def summary(self):
        """ Global quantities and per-assumption status as a flat dict. """
        out = dict(self.constants)
        out['delta'] = self.delta
        for name, flag in self.flags.items():
            out[name] = flag
        out['passed'] = self.passed
        return out

    def to_csv(self, filename):
        """ Per-facet table followed by nothing else; globals go to <filename>.summary.csv. """
        self.facets.to_csv(filename, index=False, float_format='%.10e')
        pd.Series(self.summary()).to_csv(os.path.splitext(filename)[0] + '.summary.csv',
                                         header=['value'], index_label='quantity')


def check_closeness(tmap, tau1, beta, constants, coarser=None):
    """ Evaluate the closeness assumptions on every boundary facet.

    Parameters
    ----------
    tmap : TransferMap
    tau1 : float
        State stabilization; tau2 = tau1 - beta.n.
    beta : callable
        Velocity field, points (..., 2) -> (..., 2).
    constants : dict
        Output of polybasis.admissibility_constants.
    coarser : TransferMap or None
        Map of the previous refinement for the delta estimate.

    Returns
    -------
    AdmissibilityReport
    """
    bvals = np.asarray(beta(tmap.points), dtype=float)
    bn = np.sum(bvals * tmap.normals[:, None, :], axis=2)
    tau2 = tau1 - bn
    tau_state = np.max(tau1 - 0.5 * bn, axis=1)
    tau_adjoint = np.max(tau2 + 0.5 * bn, axis=1)
    max_l = tmap.lengths.max(axis=1)
    terms = closeness_terms(tmap.r_e, tmap.h_perp, tmap.beta_e, max_l, tau_state, tau_adjoint,
                            constants['C_ext'], constants['C_inv'], tmap.max_t_norm, constants['C_tr'])

    frame = tmap.to_frame()
    frame['max_l'] = max_l
    frame['C_ext'] = constants['C_ext']
    frame['C_inv'] = constants['C_inv']
    for name, (lhs, rhs) in terms.items():
        frame[name + '_lhs'] = lhs
        frame[name + '_rhs'] = rhs
        frame[name] = lhs <= rhs

    glob = {'C_tr': float(constants['C_tr']),
            'tau1': float(tau1),
            'tau2_min': float(tau2.min()),
            'tau2_max': float(tau2.max()),
            'beta_inf': float(np.linalg.norm(bvals, axis=2).max()),
            'R': tmap.R,
            'max_t_norm': tmap.max_t_norm,
            'max_H_perp': tmap.max_H_perp,
            'h': tmap.h,
            'proximity_constant': tmap.proximity_constant,
            'segments_inside': bool(tmap.segments_inside.all()),
            'bijective': tmap.n_nonbijective == 0,
            'fallback_rays': tmap.n_fallback}
    report = AdmissibilityReport(frame, glob, tmap.proximity_exponent(coarser))
    logging.debug('closeness: {}'.format(report))
    return report
