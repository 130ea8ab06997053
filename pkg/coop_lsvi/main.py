import json
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import pandas as pd

from coop_lsvi import __version__
from coop_lsvi.config import (MODE_CONTEXTUAL, MODE_HOMOGENEOUS, MODE_MMDP, MODE_SMALL_DEV, ExperimentConfig,
                              output_root)
from coop_lsvi.coop_mmdp import CoopMmdpLearner, ScalarizationSampler
from coop_lsvi.coop_parallel import CoopParallelLearner
from coop_lsvi.env import (FLAVOR_CONTEXTUAL, FLAVOR_SMALL_DEVIATION, MmdpSpec, ParallelEnvSet, build_contextual_set,
                           generate_linear_mdp, generate_mmdp, heterogeneity_coefficient, homogeneous_set,
                           max_pairwise_deviation, perturb_small_deviation, validate_spec)
from coop_lsvi.errors import InvalidArgumentError
from coop_lsvi.helpers import get_logger
from coop_lsvi.learner_base import (BETA_CONTEXTUAL, BETA_HOMOGENEOUS, BETA_MMDP, BETA_SMALL_DEVIATION, BetaSchedule,
                                    SYNC_ALWAYS, SYNC_NEVER, SyncPolicy)
from coop_lsvi.metrics import (KIND_MMDP, KIND_PARALLEL, CommLedger, RegretLedger, estimate_bayes_regret,
                               record_comm, record_mmdp_regret, record_parallel_regret, sublinearity_ratio,
                               verify_comm_bounds)
from coop_lsvi.run_db import STATUS_ERROR, STATUS_FAILED, STATUS_PASSED, Run, initialize_db

coop_logger = get_logger()

BETA_MODES = {
    MODE_HOMOGENEOUS: BETA_HOMOGENEOUS,
    MODE_SMALL_DEV: BETA_SMALL_DEVIATION,
    MODE_CONTEXTUAL: BETA_CONTEXTUAL,
    MODE_MMDP: BETA_MMDP,
}


def get_runner_class(mode):
    """
    Takes in a string parameter and attempts to return the learner class for a particular experiment mode.
    :param mode: One of the ExperimentConfig modes
    :return A learner class for the mode
    """
    switcher = {
        MODE_HOMOGENEOUS: CoopParallelLearner,
        MODE_SMALL_DEV: CoopParallelLearner,
        MODE_CONTEXTUAL: CoopParallelLearner,
        MODE_MMDP: CoopMmdpLearner
    }

    return switcher.get(mode)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    environment: object
    regret: RegretLedger
    comm: CommLedger
    events: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    invariant_violations: Counter = field(default_factory=Counter)
    summary: dict = None
    output_dir: str = None


def build_environment(config):
    """
    Generates the environment a configuration describes, from config.env_seed (or config.seed).
    """
    seed = config.resolved_env_seed
    if config.mode == MODE_MMDP:
        return generate_mmdp(config.agent_states, config.agent_actions, config.horizon, config.reward_feat_dim,
                             config.trans_feat_dim, config.agents, seed, config.fully_cooperative, config.max_joint)
    if config.mode == MODE_CONTEXTUAL:
        return build_contextual_set(config.num_states, config.num_actions, config.horizon, config.feat_dim,
                                    config.context_dim, config.agents, config.chi, seed)
    spec = generate_linear_mdp(config.num_states, config.num_actions, config.horizon, config.feat_dim, seed)
    if config.mode == MODE_SMALL_DEV:
        return perturb_small_deviation(spec, config.xi, config.agents, [seed, 1])
    return homogeneous_set(spec, config.agents)


def build_learner(config, environment, agent_ids=None, logger=coop_logger):
    """
    Instantiates the learner class get_runner_class selects for config.mode.
    :param agent_ids: Subset of agents to simulate (parallel modes only)
    """
    learner_class = get_runner_class(config.mode)
    if learner_class is None:
        raise InvalidArgumentError(f'Mode {config.mode} is not supported')
    beta = BetaSchedule(mode=BETA_MODES[config.mode], c_beta=config.c_beta, d_eff=config.d_eff,
                        horizon=config.horizon, agents=config.agents, episodes=config.episodes, xi=config.xi)
    sync_policy = SyncPolicy(config.sync_threshold)
    if learner_class is CoopMmdpLearner:
        sampler = ScalarizationSampler.from_dict(config.sampler, config.agents, config.seed)
        return learner_class(environment, beta, sync_policy, sampler, config.seed, logger, ridge=config.ridge,
                             bonus_form=config.bonus_form, replica_checks=config.replica_checks,
                             fixed_start=config.fixed_start, check_invariants=config.check_invariants,
                             max_joint=config.max_joint)
    return learner_class(environment, beta, sync_policy, config.seed, logger, ridge=config.ridge, agent_ids=agent_ids,
                         fixed_start=config.fixed_start, check_invariants=config.check_invariants)


def execute(config, agent_ids=None, environment=None, logger=coop_logger):
    """
    Runs T episodes in memory: plan, act and observe, synchronize, then update the ledgers.
    :return: RunArtifacts with the summary filled in
    """
    environment = build_environment(config) if environment is None else environment
    learner = build_learner(config, environment, agent_ids, logger)
    if config.mode == MODE_MMDP:
        regret = RegretLedger(kind=KIND_MMDP, agent_ids=list(range(config.agents)))
    else:
        regret = RegretLedger(kind=KIND_PARALLEL, agent_ids=learner.agent_ids)
    comm = CommLedger(horizon=config.horizon)
    artifacts = RunArtifacts(config=config, environment=environment, regret=regret, comm=comm)

    for result in learner.run(config.episodes):
        if config.mode == MODE_MMDP:
            record_mmdp_regret(regret, environment, result.upsilon, result.policies[0], result.start_states[0],
                               result.episode, result.q_tables[0])
            artifacts.policies.append(result.policies[0])
        else:
            record_parallel_regret(regret, environment, result.policies, result.start_states, result.episode,
                                   result.q_tables)
        record_comm(comm, result.episode, result.report, result.log_det_ratios)
        artifacts.events.extend(result.events)

    artifacts.invariant_violations.update(learner.invariant_violations)
    if regret.violations:
        artifacts.invariant_violations['negative_regret'] += regret.violations
    artifacts.summary = emit_report(artifacts)
    logger.info(f'Finished {config.episodes} episodes in {config.mode} mode: '
                f'regret {regret.cumulative:.4f}, {comm.sync_episodes} synchronizations.')
    return artifacts


def environment_diagnostics(environment):
    """
    Measured heterogeneity of a parallel environment set: the pairwise deviation for the small deviation flavor and
    the rank χ of the context gram matrices for the contextual flavor. Empty for everything else.
    """
    if not isinstance(environment, ParallelEnvSet):
        return {}
    if environment.flavor == FLAVOR_SMALL_DEVIATION:
        max_tv, max_gap = max_pairwise_deviation(environment)
        return {'xi': environment.xi, 'max_transition_tv': max_tv, 'max_reward_gap': max_gap}
    if environment.flavor == FLAVOR_CONTEXTUAL:
        return {'context_dim': environment.context_dim, 'heterogeneity': heterogeneity_coefficient(environment)}
    return {}


def emit_report(artifacts):
    """
    JSON-ready summary of a completed run.
    """
    config = artifacts.config
    bound = verify_comm_bounds(artifacts.comm, config)
    violations = dict(sorted(artifacts.invariant_violations.items()))
    total = int(sum(violations.values()))
    summary = {
        'version': __version__,
        'mode': config.mode,
        'episodes': config.episodes,
        'final_regret': float(artifacts.regret.cumulative),
        'sublinearity_ratio': sublinearity_ratio(artifacts.regret.cumulative_series()),
        'communication': artifacts.comm.totals(),
        'bound_check': bound.to_dict(),
        'optimism_frequency': artifacts.regret.optimism_frequency,
        'invariant_violations': violations,
        'invariant_violation_total': total,
    }
    diagnostics = environment_diagnostics(artifacts.environment)
    if diagnostics:
        summary['environment'] = diagnostics
    if config.mode == MODE_MMDP:
        rows = artifacts.regret.rows
        summary['final_fixed_start_regret'] = float(rows[-1]['cumulative_fixed_start_regret']) if rows else 0.0
        summary['bayes_regret'] = None
        if artifacts.policies:
            sampler = ScalarizationSampler.from_dict(config.sampler, config.agents, config.seed)
            estimate = estimate_bayes_regret(artifacts.environment, artifacts.policies, sampler, config.bayes_samples)
            summary['bayes_regret'] = estimate.to_dict()
            summary['cumulative_regret_per_episode'] = float(artifacts.regret.cumulative) / config.episodes
    summary['passed'] = total == 0 and bound.passed
    return summary


def default_output_dir(config):
    if config.output_dir:
        return config.output_dir
    return os.path.join(output_root(), config.name or config.digest()[:12])


def write_artifacts(artifacts, output_dir=None):
    """
    Writes config.json, regret.csv, comm.csv, events.jsonl and summary.json into the run directory.
    """
    output_dir = output_dir or default_output_dir(artifacts.config)
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, 'config.json'), 'w') as config_file:
        json.dump({**artifacts.config.to_dict(), 'version': __version__}, config_file, indent=2, sort_keys=True)
    artifacts.regret.to_frame().to_csv(os.path.join(output_dir, 'regret.csv'), index=False)
    artifacts.comm.to_frame().to_csv(os.path.join(output_dir, 'comm.csv'), index=False)
    with open(os.path.join(output_dir, 'events.jsonl'), 'w') as events_file:
        for event in artifacts.events:
            events_file.write(json.dumps(event, sort_keys=True) + '\n')
    with open(os.path.join(output_dir, 'summary.json'), 'w') as summary_file:
        json.dump(artifacts.summary, summary_file, indent=2, sort_keys=True)
    artifacts.output_dir = output_dir
    return output_dir


def run_experiment(config, output_dir=None, logger=coop_logger):
    """
    Executes a configuration and writes its run directory.
    :return: RunArtifacts
    """
    artifacts = execute(config, logger=logger)
    write_artifacts(artifacts, output_dir)
    logger.info(f'Wrote run outputs to {artifacts.output_dir}')
    return artifacts


def run_isolated_agents(config, environment=None, logger=coop_logger):
    """
    M single-agent never-sync runs with the per-agent seeds of the full run.
    """
    environment = build_environment(config) if environment is None else environment
    isolated = config.replace(sync_threshold=SYNC_NEVER)
    return [execute(isolated, agent_ids=[m], environment=environment, logger=logger) for m in range(config.agents)]


def run_baselines(config, output_dir=None, check_isolated=False, logger=coop_logger):
    """
    Runs never-sync, always-sync and the configured threshold on the same environment and seeds.
    :param check_isolated: Also verify that never-sync matches M independent single-agent runs
    :return: Dictionary with the three RunArtifacts, the aligned cumulative regret curves and an optional isolation
    verdict
    """
    if not config.is_parallel:
        raise InvalidArgumentError('Baselines are defined for the parallel modes only')
    output_dir = output_dir or default_output_dir(config)
    environment = build_environment(config)
    settings = {'never': SYNC_NEVER, 'always': SYNC_ALWAYS, 'threshold': config.sync_threshold}
    results = {}
    for label, threshold in settings.items():
        artifacts = execute(config.replace(sync_threshold=threshold), environment=environment, logger=logger)
        write_artifacts(artifacts, os.path.join(output_dir, label))
        results[label] = artifacts

    curves = pd.DataFrame({'episode': list(range(1, config.episodes + 1))})
    for label, artifacts in results.items():
        curves[label] = artifacts.regret.cumulative_series()
    os.makedirs(output_dir, exist_ok=True)
    curves.to_csv(os.path.join(output_dir, 'baselines.csv'), index=False)
    results['curves'] = curves

    if check_isolated:
        never = results['never'].regret.to_frame()
        matches = True
        for m, single in enumerate(run_isolated_agents(config, environment, logger)):
            column = f'regret_{m}'
            matches &= single.regret.to_frame()[column].tolist() == never[column].tolist()
        results['isolated_match'] = matches
        logger.info(f'Never-sync run matches isolated agents: {matches}')
    return results


def _run_point(config_dict):
    config = ExperimentConfig.from_dict(config_dict)
    artifacts = run_experiment(config, logger=get_logger())
    return config.digest(), artifacts.summary


def _settle(digest, outcome, logger):
    """
    Records the outcome of one sweep point. outcome is a zero-argument callable returning (digest, summary).
    """
    try:
        _, summary = outcome()
    except Exception as err:
        logger.error(f'Sweep point {digest[:12]} raised {type(err).__name__}: {err}')
        Run.mark(digest, STATUS_ERROR, f'{type(err).__name__}: {err}')
        return digest, {'passed': False, 'final_regret': None, 'error': str(err)}
    Run.mark(digest, STATUS_PASSED if summary['passed'] else STATUS_FAILED)
    return digest, summary


def run_sweep(config, key, values, workers=1, duplicates='skip', logger=coop_logger):
    """
    Runs one configuration per value of key, each in its own directory, recorded in the run index. A point that
    raises is marked as error and reported with passed False; the remaining points still run.
    :param duplicates: skip, replace or error; how already indexed configurations are handled
    :return: List of (digest, summary) for the executed points
    """
    root = config.output_dir or output_root()
    points = {}
    for value in values:
        label = f'{key}-{value}'
        point = config.replace(**{key: value, 'name': label, 'output_dir': os.path.join(root, label)})
        points[point.digest()] = point

    os.makedirs(root, exist_ok=True)
    outcomes = []
    with initialize_db(os.path.join(root, 'runs.db')).connection_context():
        selected = getattr(Run, f'db_{duplicates}')({digest: (point.mode, point.output_dir)
                                                       for digest, point in points.items()})
        for digest in points:
            if digest not in selected:
                logger.info(f'Skipping finished sweep point {digest[:12]} in {Run.output_dir_for(digest)}')
        logger.info(f'{len(selected)} of {len(points)} sweep points remain after {duplicates} processing.')

        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = [(digest, executor.submit(_run_point, points[digest].to_dict())) for digest in selected]
                for digest, future in futures:
                    outcomes.append(_settle(digest, future.result, logger))
        else:
            for digest in selected:
                point = points[digest].to_dict()
                outcomes.append(_settle(digest, lambda: _run_point(point), logger))
    return outcomes


def read_run(run_dir):
    """
    Loads a stored run directory.
    :return: (ExperimentConfig, RegretLedger, CommLedger, summary dict)
    """
    with open(os.path.join(run_dir, 'config.json'), 'r') as config_file:
        data = json.load(config_file)
    data.pop('version', None)
    config = ExperimentConfig.from_dict(data)
    kind = KIND_MMDP if config.mode == MODE_MMDP else KIND_PARALLEL
    regret = RegretLedger.from_frame(pd.read_csv(os.path.join(run_dir, 'regret.csv')), kind)
    comm = CommLedger.from_frame(pd.read_csv(os.path.join(run_dir, 'comm.csv')))
    with open(os.path.join(run_dir, 'summary.json'), 'r') as summary_file:
        summary = json.load(summary_file)
    return config, regret, comm, summary


def verify_run(run_dir):
    """
    Re-evaluates the communication bound of a stored run from its ledger.
    :return: BoundReport
    """
    config, _, comm, _ = read_run(run_dir)
    return verify_comm_bounds(comm, config)


def validate_environment(environment):
    """
    :return: List of (label, ValidationReport) for every spec in the environment
    """
    if isinstance(environment, ParallelEnvSet):
        return [(f'agent {m}', validate_spec(spec)) for m, spec in enumerate(environment.specs)]
    if isinstance(environment, MmdpSpec):
        return [('mmdp', validate_spec(environment))]
    return [('spec', validate_spec(environment))]


if __name__ == '__main__':
    pass
