__version__ = '0.1.0'

from .geometry import ImplicitDomain  # noqa
from .geometry import Triangulation  # noqa
from .transfer import build_transfer_map  # noqa
from .hdg import ProblemData  # noqa
from .hdg import assemble  # noqa
from .hdg import solve  # noqa
