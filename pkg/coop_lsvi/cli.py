"""
Command line surface: validate, run, baselines, sweep and verify. Any `--key value` pair not consumed by a
subcommand overrides the matching configuration field.
"""
import argparse
import json
import sys

from coop_lsvi.config import load_config
from coop_lsvi.env import dump_spec, load_spec
from coop_lsvi.errors import ConfigError, InvalidArgumentError, ProtocolViolationError
from coop_lsvi.main import (build_environment, coop_logger, run_baselines, run_experiment, run_sweep,
                            validate_environment, verify_run)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def build_parser():
    parser = argparse.ArgumentParser(prog='coop-lsvi', description='Cooperative LSVI simulator', allow_abbrev=False)
    commands = parser.add_subparsers(dest='command', required=True)

    validate = commands.add_parser('validate', allow_abbrev=False, help='Check generated or stored environments')
    validate.add_argument('--config', help='Experiment configuration JSON')
    validate.add_argument('--spec', help='Environment JSON written by --dump-spec')
    validate.add_argument('--dump-spec', help='Write the generated environment to this JSON file')

    run = commands.add_parser('run', allow_abbrev=False, help='Run a single experiment')
    run.add_argument('--config', help='Experiment configuration JSON')
    run.add_argument('--output-dir', help='Run directory, defaults to $output_root/<name or digest>')

    baselines = commands.add_parser('baselines', allow_abbrev=False,
                                    help='Compare never-sync, always-sync and the threshold')
    baselines.add_argument('--config', help='Experiment configuration JSON')
    baselines.add_argument('--output-dir')
    baselines.add_argument('--check-isolated', action='store_true',
                           help='Also compare never-sync against independent single-agent runs')

    sweep = commands.add_parser('sweep', allow_abbrev=False, help='Run a grid over one configuration key')
    sweep.add_argument('--config', help='Experiment configuration JSON')
    sweep.add_argument('--key', required=True, help='Configuration key to vary, e.g. sync_threshold or xi')
    sweep.add_argument('--values', required=True, nargs='+', help='Values as JSON literals')
    sweep.add_argument('--workers', type=int, default=1)
    sweep.add_argument('--duplicates', choices=['skip', 'replace', 'error'], default='skip')

    verify = commands.add_parser('verify', allow_abbrev=False,
                                 help='Re-run the communication bound check on a stored run')
    verify.add_argument('run_dir')
    return parser


def _parse_literal(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _validate(args, overrides):
    if args.spec:
        with open(args.spec, 'r') as spec_file:
            environment = load_spec(json.load(spec_file))
    else:
        environment = build_environment(load_config(args.config, overrides))
    if args.dump_spec:
        with open(args.dump_spec, 'w') as spec_file:
            json.dump(dump_spec(environment), spec_file)
    failed = False
    for label, report in validate_environment(environment):
        if report.ok:
            print(f'{label}: valid')
            continue
        failed = True
        print(f'{label}: {len(report.violations)} violations')
        for violation in report.violations:
            print(f'  {violation}')
    return EXIT_VIOLATION if failed else EXIT_OK


def _run(args, overrides):
    artifacts = run_experiment(load_config(args.config, overrides), args.output_dir)
    print(json.dumps(artifacts.summary, indent=2, sort_keys=True))
    return EXIT_OK if artifacts.summary['passed'] else EXIT_VIOLATION


def _baselines(args, overrides):
    results = run_baselines(load_config(args.config, overrides), args.output_dir, args.check_isolated)
    final = {label: results[label].summary['final_regret'] for label in ('never', 'always', 'threshold')}
    print(json.dumps(final, indent=2))
    passed = all(results[label].summary['passed'] for label in ('never', 'always', 'threshold'))
    passed &= results.get('isolated_match', True)
    return EXIT_OK if passed else EXIT_VIOLATION


def _sweep(args, overrides):
    config = load_config(args.config, overrides)
    values = [_parse_literal(v) for v in args.values]
    outcomes = run_sweep(config, args.key, values, args.workers, args.duplicates)
    for digest, summary in outcomes:
        if 'error' in summary:
            print(f'{digest[:12]}: error {summary["error"]}')
        else:
            print(f'{digest[:12]}: final regret {summary["final_regret"]:.4f}, passed {summary["passed"]}')
    return EXIT_OK if all(summary['passed'] for _, summary in outcomes) else EXIT_VIOLATION


def _verify(args, overrides):
    report = verify_run(args.run_dir)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.passed else EXIT_VIOLATION


def main(argv=None):
    """
    :return: Process exit code; 1 for invariant or bound violations, 2 for invalid configurations
    """
    args, overrides = build_parser().parse_known_args(argv)
    switcher = {
        'validate': _validate,
        'run': _run,
        'baselines': _baselines,
        'sweep': _sweep,
        'verify': _verify
    }
    try:
        return switcher[args.command](args, overrides)
    except (ConfigError, InvalidArgumentError) as err:
        coop_logger.error(f'Invalid configuration: {err}')
        return EXIT_CONFIG
    except ProtocolViolationError as err:
        coop_logger.error(f'Protocol violation: {err}')
        return EXIT_VIOLATION


if __name__ == '__main__':
    sys.exit(main())
