""" Implicit domains, triangulations and the computational mesh.
"""
import logging
import math

import numpy as np
import sympy
from scipy.optimize import brentq
from scipy.spatial import Delaunay
from sklearn.utils import check_random_state

from tpmhdg.exceptions import EmptyMesh
from tpmhdg.exceptions import NoRootInRange
from tpmhdg.exceptions import ParseError

ROOT_TOL = 1e-12
# probes with F <= CONTAIN_TOL count as inside the closure of the domain
CONTAIN_TOL = 1e-12
MESH_HEADER = 'tpmhdg-mesh v1'


class ImplicitDomain(object):
    """ Curved domain given by a level-set function F.

    F is negative inside, positive outside and zero on the boundary.

    Parameters
    ----------
    evaluate : callable
        Maps points (..., 2) to values (...).
    gradient : callable
        Maps points (..., 2) to gradients (..., 2).
    name : str
        circle, kidney, square or custom.
    bbox : tuple(float) or None
        Suggested background box (xmin, xmax, ymin, ymax).
    center : tuple(float) or None
        Interior point from which the boundary is visible (star center).
    """
    def __init__(self, evaluate, gradient, name='custom', bbox=None, center=None):
        self._evaluate = evaluate
        self._gradient = gradient
        self.name = name
        self.bbox = bbox
        self.center = center

    def evaluate(self, points):
        points = np.asarray(points, dtype=float)
        return np.asarray(self._evaluate(points[..., 0], points[..., 1]), dtype=float) + np.zeros(points.shape[:-1])

    def gradient(self, points):
        points = np.asarray(points, dtype=float)
        gx, gy = self._gradient(points[..., 0], points[..., 1])
        zero = np.zeros(points.shape[:-1])
        return np.stack([gx + zero, gy + zero], axis=-1)

    def __repr__(self):
        return "ImplicitDomain({})".format(self.name)

    @classmethod
    def circle(cls, radius2=0.75):
        """ Disc x^2 + y^2 <= radius2 in the box [-1, 1]^2. """
        return cls(lambda x, y: x ** 2 + y ** 2 - radius2,
                   lambda x, y: (2. * x, 2. * y),
                   name='circle', bbox=(-1., 1., -1., 1.), center=(0., 0.))

    @classmethod
    def kidney(cls):
        """ Kidney (2 r^2 - X)^2 - r^2 + 0.1 <= 0 with X = x + 0.5, r^2 = X^2 + y^2. """
        def evaluate(x, y):
            xx = x + 0.5
            r2 = xx ** 2 + y ** 2
            return (2. * r2 - xx) ** 2 - r2 + 0.1

        def gradient(x, y):
            xx = x + 0.5
            s = 2. * (xx ** 2 + y ** 2) - xx
            return 2. * s * (4. * xx - 1.) - 2. * xx, 8. * s * y - 2. * y

        return cls(evaluate, gradient, name='kidney', bbox=(-1.2, 1.2, -1.2, 1.2), center=(0.1, 0.))

    @classmethod
    def square(cls, bounds=(0., 1., 0., 1.)):
        """ Axis-aligned rectangle, F = max of the four signed face distances. """
        xmin, xmax, ymin, ymax = bounds

        def faces(x, y):
            return np.stack(np.broadcast_arrays(xmin - x, x - xmax, ymin - y, y - ymax), axis=-1)

        def evaluate(x, y):
            return faces(x, y).max(axis=-1)

        def gradient(x, y):
            idx = faces(x, y).argmax(axis=-1)
            gx = np.select([idx == 0, idx == 1], [-1., 1.], 0.)
            gy = np.select([idx == 2, idx == 3], [-1., 1.], 0.)
            return gx, gy

        return cls(evaluate, gradient, name='square', bbox=tuple(bounds),
                   center=(0.5 * (xmin + xmax), 0.5 * (ymin + ymax)))

    @classmethod
    def from_expression(cls, expression, name='custom', bbox=None, center=None):
        """ Domain from a symbolic expression in x and y.

        Parameters
        ----------
        expression : str or sympy.Expr
            Level-set function, e.g. 'x**2/0.5 + y**2 - 1'.
        """
        x, y = sympy.symbols('x y')
        expr = sympy.sympify(expression)
        grad = [sympy.diff(expr, x), sympy.diff(expr, y)]
        evaluate = sympy.lambdify((x, y), expr, 'numpy')
        gradient = sympy.lambdify((x, y), grad, 'numpy')
        return cls(evaluate, lambda a, b: tuple(gradient(a, b)), name=name, bbox=bbox, center=center)

    @classmethod
    def preset(cls, name):
        """ Preset domain by name: circle, kidney or square. """
        if name == 'circle':
            return cls.circle()
        if name == 'kidney':
            return cls.kidney()
        if name == 'square':
            return cls.square()
        raise ValueError('unknown domain preset: {}'.format(name))


def evaluate_domain(domain, p):
    """ Signed level-set value at a point (or array of points). """
    value = domain.evaluate(p)
    return float(value) if value.ndim == 0 else value


def ray_intersect(domain, origin, direction, t_max, tol=ROOT_TOL, n_samples=64):
    """ Smallest t in [0, t_max] with F(origin + t direction) = 0.

    The ray is scanned at n_samples uniform points; the first bracketing
    interval is refined with Brent's method.

    Parameters
    ----------
    domain : ImplicitDomain
    origin : array-like
        Start point with F(origin) <= 0.
    direction : array-like
        Unit vector.
    t_max : float
        Search length.

    Returns
    -------
    float
        Path length l.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if float(domain.evaluate(origin)) >= -tol:
        return 0.
    ts = np.linspace(0., t_max, n_samples)
    values = domain.evaluate(origin[None, :] + ts[:, None] * direction[None, :])
    crossing = np.nonzero(values >= 0.)[0]
    if len(crossing) == 0:
        raise NoRootInRange('no sign change of F on [0, {:.6g}] from {} along {}'.format(
            t_max, origin.tolist(), direction.tolist()))
    i = crossing[0]
    if values[i] == 0.:
        return float(ts[i])
    return float(brentq(lambda t: float(domain.evaluate(origin + t * direction)),
                        ts[i - 1], ts[i], xtol=tol))


class Triangulation(object):
    """ Conforming triangle mesh with facet connectivity.

    Local facet l of an element is opposite its vertex l and runs from
    vertex l+1 to vertex l+2 (counter-clockwise). Facets are stored as
    sorted vertex pairs; both neighbours parametrize a facet from its
    lower to its higher vertex index.

    Parameters
    ----------
    vertices : np.ndarray
        Shape (n_vertices, 2)
    triangles : np.ndarray
        Shape (n_elements, 3); clockwise triangles are reoriented.
    """
    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float)
        tri = np.array(triangles, dtype=int).reshape(-1, 3)
        v = self.vertices[tri]
        signed = 0.5 * ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
                        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
        flip = signed < 0.
        tri[flip] = tri[flip][:, [0, 2, 1]]
        self.triangles = tri
        self.areas = np.abs(signed)
        self._build_connectivity()

    def _build_connectivity(self):
        tri = self.triangles
        n_el = len(tri)
        edges = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)
        facets, inverse, counts = np.unique(np.sort(edges, axis=2).reshape(-1, 2), axis=0,
                                            return_inverse=True, return_counts=True)
        inverse = np.asarray(inverse).reshape(-1)
        if counts.max(initial=0) > 2:
            raise ValueError('non-manifold mesh: a facet has more than two elements')
        self.facets = facets
        self.element_facets = inverse.reshape(n_el, 3)

        order = np.argsort(inverse, kind='stable')
        fid = inverse[order]
        first = np.r_[True, fid[1:] != fid[:-1]]
        slot = np.where(first, 0, 1)
        self.facet_elements = -np.ones((len(facets), 2), dtype=int)
        self.facet_local = -np.ones((len(facets), 2), dtype=int)
        self.facet_elements[fid, slot] = order // 3
        self.facet_local[fid, slot] = order % 3
        self.boundary_facets = np.nonzero(counts == 1)[0]

        start = self.vertices[edges[:, :, 0]]
        tangent = self.vertices[edges[:, :, 1]] - start
        lengths = np.linalg.norm(tangent, axis=2)
        self.normals = np.stack([tangent[..., 1], -tangent[..., 0]], axis=-1) / lengths[..., None]
        self.diameters = lengths.max(axis=1)
        self.inradii = 2. * self.areas / lengths.sum(axis=1)
        fa, fb = self.vertices[facets[:, 0]], self.vertices[facets[:, 1]]
        self.facet_lengths = np.linalg.norm(fb - fa, axis=1)

    @property
    def n_elements(self):
        return len(self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_facets(self):
        return len(self.facets)

    @property
    def h_max(self):
        return float(self.diameters.max())

    @property
    def shape_regularity(self):
        """ gamma_hat = max_K h_K / rho_K. """
        return float((self.diameters / self.inradii).max())

    @property
    def area(self):
        return float(self.areas.sum())

    @property
    def facet_normals(self):
        """ Unit normals of facets, outward with respect to the first owner. """
        return self.normals[self.facet_elements[:, 0], self.facet_local[:, 0]]

    def __repr__(self):
        return "Triangulation with {} elements, {} facets ({} on the boundary)".format(
            self.n_elements, self.n_facets, len(self.boundary_facets))

    def is_conforming(self, tol=1e-12):
        """ Checks for hanging nodes on the boundary and open boundary loops. """
        bfac = self.facets[self.boundary_facets]
        if len(bfac) == 0:
            return True
        incidence = np.bincount(bfac.ravel(), minlength=self.n_vertices)
        if np.any(incidence % 2 == 1):
            return False
        bverts = np.unique(bfac)
        a = self.vertices[bfac[:, 0]][:, None, :]
        t = self.vertices[bfac[:, 1]][:, None, :] - a
        d = self.vertices[bverts][None, :, :] - a
        len2 = np.sum(t ** 2, axis=2)
        cross = t[..., 0] * d[..., 1] - t[..., 1] * d[..., 0]
        dot = np.sum(t * d, axis=2)
        inner = (np.abs(cross) <= tol * len2) & (dot > tol * len2) & (dot < (1. - tol) * len2)
        return not bool(inner.any())

    def submesh(self, mask):
        """ Mesh of the selected elements with unused vertices removed. """
        tri = self.triangles[mask]
        used, inverse = np.unique(tri.ravel(), return_inverse=True)
        return Triangulation(self.vertices[used], np.asarray(inverse).reshape(-1, 3))

    def permuted(self, permutation):
        """ Same mesh with elements listed in a different order. """
        return Triangulation(self.vertices, self.triangles[np.asarray(permutation)])


def generate_background_mesh(bbox, n):
    """ Structured n x n grid, each cell split along the same diagonal.

    Parameters
    ----------
    bbox : tuple(float)
        (xmin, xmax, ymin, ymax)
    n : int
        Cells per axis.

    Returns
    -------
    Triangulation
    """
    if n < 1:
        raise ValueError('n must be at least 1')
    xmin, xmax, ymin, ymax = bbox
    xs = np.linspace(xmin, xmax, n + 1)
    ys = np.linspace(ymin, ymax, n + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    triangles = np.concatenate([np.stack([v00, v10, v11], axis=1),
                                np.stack([v00, v11, v01], axis=1)])
    return Triangulation(vertices, triangles)


def probe_points(mesh):
    """ Vertices, edge midpoints and centroid of each element, shape (n, 7, 2). """
    v = mesh.vertices[mesh.triangles]
    mids = 0.5 * (v + v[:, [1, 2, 0]])
    return np.concatenate([v, mids, v.mean(axis=1, keepdims=True)], axis=1)


def extract_interior_mesh(bg, domain, tol=CONTAIN_TOL):
    """ Elements of the background mesh lying inside the domain.

    An element is kept when F <= tol at its vertices, edge midpoints and
    centroid.

    Returns
    -------
    Triangulation

    Raises
    ------
    EmptyMesh
    """
    inside = np.all(domain.evaluate(probe_points(bg)) <= tol, axis=1)
    if not inside.any():
        raise EmptyMesh('no element of the background mesh lies inside {}'.format(domain.name))
    mesh = bg.submesh(inside)
    logging.debug('kept {} of {} background elements inside {}'.format(
        mesh.n_elements, bg.n_elements, domain.name))
    return mesh


def generate_interpolated_mesh(domain, bbox, n, center=None):
    """ Mesh whose boundary vertices lie on the curved boundary.

    Boundary points are obtained by casting rays from a star center,
    interior points from an n x n grid kept at least h/2 away from the
    boundary, and the union is Delaunay-triangulated.

    Parameters
    ----------
    domain : ImplicitDomain
        Star-shaped with respect to center.
    bbox : tuple(float)
    n : int
        Grid subdivisions per axis, h = box width / n.
    center : tuple(float) or None
        Defaults to domain.center.

    Returns
    -------
    Triangulation
    """
    xmin, xmax, ymin, ymax = bbox
    h = max(xmax - xmin, ymax - ymin) / float(n)
    if center is None:
        center = domain.center if domain.center is not None else (0.5 * (xmin + xmax), 0.5 * (ymin + ymax))
    center = np.asarray(center, dtype=float)
    reach = math.hypot(xmax - xmin, ymax - ymin)

    def boundary_points(count):
        angles = 2. * np.pi * np.arange(count) / count
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        ls = np.array([ray_intersect(domain, center, d, reach, n_samples=256) for d in dirs])
        return center[None, :] + ls[:, None] * dirs

    coarse = boundary_points(256)
    perimeter = np.linalg.norm(coarse - np.roll(coarse, 1, axis=0), axis=1).sum()
    bpts = boundary_points(max(8, int(math.ceil(perimeter / h))))

    grid = generate_background_mesh(bbox, n).vertices
    values = domain.evaluate(grid)
    gnorm = np.maximum(np.linalg.norm(domain.gradient(grid), axis=1), 1e-300)
    interior = grid[(values < 0.) & (-values / gnorm > 0.5 * h)]

    points = np.concatenate([bpts, interior])
    simplices = Delaunay(points).simplices
    v = points[simplices]
    area = 0.5 * np.abs((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
                        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
    keep = (domain.evaluate(v.mean(axis=1)) <= 0.) & (area > 1e-12 * h ** 2)
    mesh = Triangulation(points, simplices).submesh(keep)
    logging.debug('interpolated mesh: {} boundary points, {} elements'.format(len(bpts), mesh.n_elements))
    return mesh


def estimate_area(domain, bbox, n_samples=10 ** 6, random_state=None):
    """ Monte-Carlo estimate of the domain area and its standard error. """
    rng = check_random_state(random_state)
    xmin, xmax, ymin, ymax = bbox
    pts = np.stack([rng.uniform(xmin, xmax, n_samples), rng.uniform(ymin, ymax, n_samples)], axis=1)
    box = (xmax - xmin) * (ymax - ymin)
    frac = np.mean(domain.evaluate(pts) < 0.)
    return box * frac, box * math.sqrt(frac * (1. - frac) / n_samples)


def write_mesh(mesh, filename):
    """ Write a mesh in the plain-text tpmhdg-mesh v1 format (0-based indices). """
    with open(filename, 'w') as fh:
        fh.write(MESH_HEADER + '\n')
        fh.write('{}\n{}\n'.format(mesh.n_vertices, mesh.n_elements))
        for x, y in mesh.vertices:
            fh.write('{:.17g} {:.17g}\n'.format(x, y))
        for a, b, c in mesh.triangles:
            fh.write('{} {} {}\n'.format(a, b, c))


def read_mesh(filename):
    """ Read a mesh written by write_mesh. """
    try:
        with open(filename) as fh:
            lines = [line.strip() for line in fh if line.strip()]
    except OSError as err:
        raise ParseError('{}: {}'.format(filename, err))
    if not lines or lines[0] != MESH_HEADER:
        raise ParseError('{}: line 1: expected header "{}"'.format(filename, MESH_HEADER))
    try:
        nv, nt = int(lines[1]), int(lines[2])
        vertices = np.array([[float(t) for t in line.split()] for line in lines[3:3 + nv]])
        triangles = np.array([[int(t) for t in line.split()] for line in lines[3 + nv:3 + nv + nt]])
    except (ValueError, IndexError) as err:
        raise ParseError('{}: malformed mesh body: {}'.format(filename, err))
    if vertices.shape != (nv, 2) or triangles.shape != (nt, 3):
        raise ParseError('{}: expected {} vertices and {} triangles'.format(filename, nv, nt))
    return Triangulation(vertices, triangles)
