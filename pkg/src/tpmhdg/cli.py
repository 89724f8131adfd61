"""
Module that contains the command line app.

Why does this file exist, and why not put this in __main__?

  You might be tempted to import things from __main__ later, but that will cause
  problems: the code will get executed twice:

  - When you run `python -mtpmhdg` python will execute
    ``__main__.py`` as a script. That means there won't be any
    ``tpmhdg.__main__`` in ``sys.modules``.
  - When you import __main__ it will get executed again (as a module) because
    there's no ``tpmhdg.__main__`` in ``sys.modules``.

  Also see (1) from http://click.pocoo.org/5/setuptools/#setuptools-integration
"""
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from tpmhdg.config import MODES
from tpmhdg.config import RunConfig
from tpmhdg.config import parse_config
from tpmhdg.exceptions import EmptyMesh
from tpmhdg.exceptions import ParseError
from tpmhdg.exceptions import ValidationError
from tpmhdg.geometry import ImplicitDomain
from tpmhdg.geometry import write_mesh
from tpmhdg.hdg import ProblemData
from tpmhdg.hdg import discrete_energy
from tpmhdg.hdg import objective
from tpmhdg.polybasis import MAX_EXACTNESS
from tpmhdg.polybasis import admissibility_constants
from tpmhdg.transfer import STRATEGIES
from tpmhdg.transfer import build_transfer_map
from tpmhdg.transfer import check_closeness
from tpmhdg.utils import get_n_jobs
from tpmhdg.utils import key_value_lines
from tpmhdg.utils import make_folders
from tpmhdg.verification import ExactSolution
from tpmhdg.verification import build_mesh
from tpmhdg.verification import derive_data
from tpmhdg.verification import example_solution
from tpmhdg.verification import l2_errors
from tpmhdg.verification import run_property_suites
from tpmhdg.verification import run_study
from tpmhdg.verification import solve_level
from tpmhdg.verification import write_study

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_SUITE = 3

common = argparse.ArgumentParser(add_help=False)
common.add_argument('--config', dest='config', type=str, default=None,
                    help='JSON run configuration. Without it the defaults of example 1 are used.')
common.add_argument('--out', dest='out', type=str, default=None,
                    help='Output directory. Overrides "out" of the configuration.')
common.add_argument('--mode', dest='mode', choices=MODES, default=None,
                    help='Assembly mode. Condensed assembly falls back to monolithic '
                    'when a local block is singular.')
common.add_argument('--strategy', dest='strategy', choices=STRATEGIES, default=None,
                    help='Transfer direction strategy.')
common.add_argument('--quiet', dest='quiet', action='store_true', default=False,
                    help='Do not print diagnostics to stdout.')

parser = argparse.ArgumentParser(description='tpmhdg - HDG optimal control on curved domains '
                                 'with the transfer path method.')

subparsers = parser.add_subparsers(dest='program')

subparsers.add_parser('mesh-info', parents=[common],
                      description='Build the computational mesh and transfer map and report '
                      'element/facet counts, h, shape regularity and R.')
subparsers.add_parser('check-assumptions', parents=[common],
                      description='Evaluate the closeness assumptions on every boundary facet '
                      'and write the admissibility report.')
subparsers.add_parser('solve', parents=[common],
                      description='Solve the optimality system on one mesh and write the '
                      'solution fields and diagnostics.')
subparsers.add_parser('study', parents=[common],
                      description='Convergence study over the configured refinement levels.')
subparsers.add_parser('project-tests', parents=[common],
                      description='Run the projection, quadrature and Lambda property suites. '
                      'Exits with code 3 on failure.')


def load_config(args):
    config = parse_config(args.config) if args.config is not None else RunConfig()
    if args.mode is not None:
        config.mode = args.mode
    if args.strategy is not None:
        config.strategy = args.strategy
    if args.out is not None:
        config.out = args.out
    return config


def problem_from_config(config):
    """ Exact solution, domain and bounding box of the configured example. """
    if config.example == 'custom':
        exact = ExactSolution(config.y, config.z, config.beta, config.gamma)
        if config.domain in ('circle', 'kidney', 'square'):
            domain = ImplicitDomain.preset(config.domain)
        else:
            domain = ImplicitDomain.from_expression(config.domain, bbox=config.bbox)
    else:
        exact, domain = example_solution(config.example, config.gamma)
    bbox = config.bbox if config.bbox is not None else domain.bbox
    if bbox is None:
        raise ValidationError('bbox', 'required for a custom domain expression')
    return exact, domain, tuple(bbox)


def report(values, quiet):
    text = key_value_lines(values)
    logging.debug(text.replace('\n', ' '))
    if not quiet:
        print(text)


def mesh_info(config, quiet):
    exact, domain, bbox = problem_from_config(config)
    mesh = build_mesh(domain, config.n, config.mesh, bbox)
    tmap = build_transfer_map(mesh, domain, config.strategy, quad_order=min(2 * config.k + 2, MAX_EXACTNESS))
    write_mesh(mesh, os.path.join(config.out, 'mesh.txt'))
    tmap.export_csv(os.path.join(config.out, 'transfer_map.csv'))
    tmap.m_conditions().to_csv(os.path.join(config.out, 'm_conditions.csv'), index=False, float_format='%.10e')
    report({'domain': domain.name,
            'n': config.n,
            'n_elements': mesh.n_elements,
            'n_facets': mesh.n_facets,
            'n_boundary_facets': len(mesh.boundary_facets),
            'h_max': float(mesh.h_max),
            'shape_regularity': float(mesh.shape_regularity),
            'conforming': mesh.is_conforming(),
            'R': tmap.R,
            'max_t_norm': tmap.max_t_norm,
            'proximity_constant': float(tmap.proximity_constant),
            'bijective': tmap.n_nonbijective == 0}, quiet)


def check_assumptions(config, quiet):
    exact, domain, bbox = problem_from_config(config)
    order = min(2 * config.k + 2, MAX_EXACTNESS)
    mesh = build_mesh(domain, config.n, config.mesh, bbox)
    tmap = build_transfer_map(mesh, domain, config.strategy, quad_order=order)
    coarser = None
    if config.n // 2 >= 2:
        try:
            coarse_mesh = build_mesh(domain, config.n // 2, config.mesh, bbox)
            coarser = build_transfer_map(coarse_mesh, domain, config.strategy, quad_order=order)
        except EmptyMesh:
            logging.debug('no coarser mesh for the proximity estimate')
    constants = admissibility_constants(mesh, tmap, config.k)
    result = check_closeness(tmap, config.tau1, exact.beta, constants, coarser)
    result.to_csv(os.path.join(config.out, 'admissibility.csv'))
    report(result.summary(), quiet)


def solve_command(config, quiet):
    exact, domain, bbox = problem_from_config(config)
    if config.zero_data:
        data = ProblemData.zero(exact.beta, config.gamma)
    else:
        data = derive_data(exact)
    sol, mesh, tmap = solve_level(exact, domain, config.n, config.k, config.strategy, config.mode,
                                  config.tau1, config.mesh, bbox, data=data)
    sol.to_csv(config.out)
    values = dict(sol.diagnostics)
    values.update({'norm_' + key: val for key, val in sol.norms().items()})
    values['energy'] = discrete_energy(sol, mesh, data.beta, config.tau1, config.gamma)
    values['objective'] = objective(sol, mesh, data)
    if not config.zero_data:
        values.update(l2_errors(sol, exact, mesh, config.k))
    pd.Series(values).to_csv(os.path.join(config.out, 'diagnostics.csv'), header=['value'],
                             index_label='quantity')
    report(values, quiet)


def study_command(config, quiet):
    exact, domain, bbox = problem_from_config(config)
    records = run_study(config.example, config.k, config.levels, config.strategy, config.mode,
                        config.tau1, config.gamma, config.mesh, n_jobs=get_n_jobs(),
                        exact=exact, domain=domain, bbox=bbox)
    frame = write_study(records, config.out, 'convergence_example{}_k{}'.format(config.example, config.k))
    failed = [rec for rec in records if not rec.ok]
    for rec in failed:
        logging.warning('failed level: {}'.format(rec.status))
    if not quiet:
        print(frame.to_string(index=False))


def project_tests(config, quiet):
    exact, domain, bbox = problem_from_config(config)
    frame = run_property_suites(config.k, domain, config.n, exact.beta, config.tau1,
                                random_state=config.seed)
    frame.to_csv(os.path.join(config.out, 'property_suites.csv'), index=False, float_format='%.10e')
    if not quiet:
        print(frame.to_string(index=False))
    return EXIT_OK if frame['passed'].all() else EXIT_SUITE


def local_main(args):
    config = load_config(args)

    logfile = os.path.join(config.out, 'log', 'logfile.log')
    make_folders(os.path.dirname(logfile))
    logging.basicConfig(filename=logfile, level=logging.DEBUG,
                        format='%(asctime)s;%(levelname)s;%(message)s',
                        datefmt='%Y-%m-%d %H:%M:%S', force=True)

    logging.debug(args)
    logging.debug(config)

    if args.program == 'mesh-info':
        mesh_info(config, args.quiet)

    elif args.program == 'check-assumptions':
        check_assumptions(config, args.quiet)

    elif args.program == 'solve':
        solve_command(config, args.quiet)

    elif args.program == 'study':
        study_command(config, args.quiet)

    elif args.program == 'project-tests':
        return project_tests(config, args.quiet)

    return EXIT_OK


def run(argv=None):
    """ Parse arguments, execute and map errors to exit codes. """
    args = parser.parse_args(argv)
    if args.program is None:
        parser.print_help()
        return EXIT_OK
    try:
        return local_main(args)
    except (ParseError, ValidationError) as err:
        logging.error(err)
        print('configuration error: {}'.format(err), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, np.linalg.LinAlgError) as err:
        logging.error('{}: {}'.format(type(err).__name__, err))
        print('numerical failure: {}: {}'.format(type(err).__name__, err), file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())


if __name__ == '__main__':

    main()
