""" Run configuration read from JSON.
"""
import json
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields

from tpmhdg.exceptions import ParseError
from tpmhdg.exceptions import ValidationError
from tpmhdg.transfer import STRATEGIES
from tpmhdg.verification import DEFAULT_LEVELS

MODES = ('condensed', 'monolithic')
MESH_KINDS = ('embedded', 'interpolated')


@dataclass
class RunConfig:
    """ Validated settings of a run.

    Physics defaults follow the reference experiments: tau1 = 1, gamma = 1.
    ``n`` selects a single background grid for mesh-info, solve and
    check-assumptions; ``levels`` the refinement ladder of a study.
    """
    example: object = 1
    k: int = 1
    n: int = None
    levels: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    tau1: float = 1.
    gamma: float = 1.
    strategy: str = 'facet-normal'
    mode: str = 'condensed'
    mesh: str = 'embedded'
    out: str = 'tpmhdg_out'
    seed: int = 0
    zero_data: bool = False
    domain: str = None
    bbox: list = None
    y: str = None
    z: str = None
    beta: list = None

    def __post_init__(self):
        if self.example not in (1, 2, 'custom'):
            raise ValidationError('example', 'must be 1, 2 or "custom"')
        if not 0 <= self.k <= 3:
            raise ValidationError('k', 'must be in 0..3')
        if not self.gamma > 0.:
            raise ValidationError('gamma', 'must be positive')
        if not self.tau1 > 0.:
            raise ValidationError('tau1', 'must be positive')
        if self.n is None:
            self.n = self.levels[0] if self.levels else 8
        if self.n < 2:
            raise ValidationError('n', 'must be at least 2')
        if not self.levels or any(n < 2 for n in self.levels):
            raise ValidationError('levels', 'must be a nonempty list of grid sizes >= 2')
        if self.strategy not in STRATEGIES:
            raise ValidationError('strategy', 'must be one of {}'.format(', '.join(STRATEGIES)))
        if self.mode not in MODES:
            raise ValidationError('mode', 'must be one of {}'.format(', '.join(MODES)))
        if self.mesh not in MESH_KINDS:
            raise ValidationError('mesh', 'must be one of {}'.format(', '.join(MESH_KINDS)))
        if self.example == 'custom':
            for name in ('domain', 'y', 'z', 'beta'):
                if getattr(self, name) is None:
                    raise ValidationError(name, 'required for a custom example')
            if len(self.beta) != 2:
                raise ValidationError('beta', 'needs two components')
        if self.bbox is not None:
            if len(self.bbox) != 4 or self.bbox[0] >= self.bbox[1] or self.bbox[2] >= self.bbox[3]:
                raise ValidationError('bbox', 'must be [xmin, xmax, ymin, ymax]')


_TYPES = {'example': (int, str), 'k': int, 'n': int, 'levels': list, 'tau1': (int, float),
          'gamma': (int, float), 'strategy': str, 'mode': str, 'mesh': str, 'out': str,
          'seed': int, 'zero_data': bool, 'domain': str, 'bbox': list, 'y': str, 'z': str,
          'beta': list}
_CUSTOM_ONLY = ('domain', 'y', 'z', 'beta')


def _check_type(name, value):
    expected = _TYPES[name]
    # bool is an int subclass
    if isinstance(value, bool) and expected is not bool:
        raise ParseError('field {}: expected {}, got a boolean'.format(name, expected))
    if not isinstance(value, expected):
        raise ParseError('field {}: wrong type {}'.format(name, type(value).__name__))
    if name == 'levels' and not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ParseError('field levels: grid sizes must be integers')
    if name == 'bbox' and not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ParseError('field bbox: bounds must be numbers')
    if name == 'beta' and not all(isinstance(v, (str, int, float)) for v in value):
        raise ParseError('field beta: components must be expressions')


def config_from_dict(values):
    """ RunConfig from a decoded mapping. """
    if not isinstance(values, dict):
        raise ParseError('configuration must be a JSON object')
    known = {f.name for f in fields(RunConfig)}
    for name, value in values.items():
        if name not in known:
            raise ParseError('unknown field {}'.format(name))
        _check_type(name, value)
    if values.get('example') != 'custom':
        extra = [name for name in _CUSTOM_ONLY if name in values]
        if extra:
            raise ParseError('field {} only applies to example "custom"'.format(extra[0]))
    values = dict(values)
    for name in ('tau1', 'gamma'):
        if name in values:
            values[name] = float(values[name])
    if 'beta' in values:
        values['beta'] = [str(b) for b in values['beta']]
    if 'bbox' in values:
        values['bbox'] = [float(b) for b in values['bbox']]
    return RunConfig(**values)


def parse_config(path):
    """ Read and validate a JSON configuration file.

    Raises
    ------
    ParseError
        Missing file, malformed JSON (with line number), unknown keys or
        wrong types.
    ValidationError
        Values violating an invariant; the field name is in ``.field``.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ParseError('cannot read {}: {}'.format(path, err))
    try:
        values = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError('{}: line {}: {}'.format(path, err.lineno, err.msg))
    return config_from_dict(values)
