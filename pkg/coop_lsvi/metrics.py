"""
Regret and communication accounting. Parallel regrets are exact (policy evaluation against the DP optimum); the
Bayes regret estimate is the only Monte-Carlo quantity and carries a standard error.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from coop_lsvi.dp import evaluate_joint_policy, evaluate_policy, exact_q_star, exact_scalarized_q_star
from coop_lsvi.errors import InvalidArgumentError
from coop_lsvi.helpers import STREAM_BAYES, array_digest
from coop_lsvi.learner_base import SYNC_ALWAYS, SYNC_NEVER

KIND_PARALLEL = 'parallel'
KIND_MMDP = 'mmdp'
REGRET_TOL = 1e-9
OPTIMISM_TOL = 1e-9
UPSILON_DECIMALS = 12


def upsilon_key(upsilon):
    return tuple(np.round(np.asarray(upsilon, dtype=float), UPSILON_DECIMALS).tolist())


@dataclass
class RegretLedger:
    """
    Append-only regret rows. Parallel rows carry one regret column per agent, the group regret of the episode and
    the running group regret; MMDP rows carry υ_t and both the fixed-start and the max-over-states regret.
    """
    kind: str
    agent_ids: list
    rows: list = field(default_factory=list)
    violations: int = 0
    optimism_hits: int = 0
    optimism_total: int = 0
    solutions: dict = field(default_factory=dict, repr=False)

    @property
    def columns(self):
        if self.kind == KIND_PARALLEL:
            return ['episode'] + [f'regret_{m}' for m in self.agent_ids] + ['group_regret', 'cumulative_regret']
        return ['episode'] + [f'upsilon_{m}' for m in self.agent_ids] + \
            ['fixed_start_regret', 'max_regret', 'cumulative_fixed_start_regret', 'cumulative_regret']

    @property
    def cumulative(self):
        return self.rows[-1]['cumulative_regret'] if self.rows else 0.0

    @property
    def optimism_frequency(self):
        return self.optimism_hits / self.optimism_total if self.optimism_total else None

    def cumulative_series(self):
        return [row['cumulative_regret'] for row in self.rows]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.columns)

    @classmethod
    def from_frame(cls, frame, kind):
        prefix = 'regret_' if kind == KIND_PARALLEL else 'upsilon_'
        agent_ids = [int(c[len(prefix):]) for c in frame.columns if c.startswith(prefix)]
        return cls(kind=kind, agent_ids=agent_ids, rows=frame.to_dict(orient='records'))

    def _count_optimism(self, q_table, q_star):
        self.optimism_hits += int(np.sum(q_table >= q_star - OPTIMISM_TOL))
        self.optimism_total += int(q_table.size)


def record_parallel_regret(ledger, env_set, policies, start_states, episode=None, q_tables=None):
    """
    Appends V*_{m,0}(x_m) - V^{π_m}_{m,0}(x_m) for every agent.
    :param policies: Mapping agent id -> action table (H, S)
    :param start_states: Mapping agent id -> start state of the episode
    :param q_tables: Optional mapping agent id -> acting Q tables (H, S, A), counted against Q* for optimism
    """
    row = {'episode': len(ledger.rows) + 1 if episode is None else int(episode)}
    group = 0.0
    for m in ledger.agent_ids:
        spec = env_set.specs[m]
        if m not in ledger.solutions:
            ledger.solutions[m] = exact_q_star(spec)
        solution = ledger.solutions[m]
        x = start_states[m]
        gap = float(solution.v_star[0, x] - evaluate_policy(spec, policies[m])[0, x])
        if gap < -REGRET_TOL:
            ledger.violations += 1
        row[f'regret_{m}'] = gap
        group += gap
        if q_tables is not None:
            ledger._count_optimism(q_tables[m], solution.q_star)
    row['group_regret'] = group
    row['cumulative_regret'] = ledger.cumulative + group
    ledger.rows.append(row)
    return ledger


def scalarized_solution(cache, mmdp, upsilon):
    key = upsilon_key(upsilon)
    if key not in cache:
        cache[key] = exact_scalarized_q_star(mmdp, upsilon)
    return cache[key]


def record_mmdp_regret(ledger, mmdp, upsilon, policy, start_state, episode=None, q_table=None):
    """
    Appends the scalarized regret of the executed joint policy, both from the episode's start state and maximized
    over all start states.
    """
    solution = scalarized_solution(ledger.solutions, mmdp, upsilon)
    values = evaluate_joint_policy(mmdp, policy)[0] @ np.asarray(upsilon, dtype=float)
    gaps = solution.v_star[0] - values
    fixed = float(gaps[start_state])
    worst = float(gaps.max())
    if fixed < -REGRET_TOL:
        ledger.violations += 1
    previous = ledger.rows[-1] if ledger.rows else {'cumulative_regret': 0.0, 'cumulative_fixed_start_regret': 0.0}
    row = {'episode': len(ledger.rows) + 1 if episode is None else int(episode)}
    row.update({f'upsilon_{m}': float(v) for m, v in zip(ledger.agent_ids, upsilon)})
    row.update({
        'fixed_start_regret': fixed,
        'max_regret': worst,
        'cumulative_fixed_start_regret': previous['cumulative_fixed_start_regret'] + fixed,
        'cumulative_regret': previous['cumulative_regret'] + worst,
    })
    if q_table is not None:
        ledger._count_optimism(q_table, solution.q_star)
    ledger.rows.append(row)
    return ledger


@dataclass(frozen=True)
class BayesRegretEstimate:
    mean: float
    stderr: float
    n_samples: int
    n_policies: int

    def to_dict(self):
        return {'mean': self.mean, 'stderr': self.stderr, 'n_samples': self.n_samples,
                'n_policies': self.n_policies}


def dedupe_policies(policies):
    unique = {}
    for policy in policies:
        unique.setdefault(array_digest(np.asarray(policy, dtype=np.int64)), np.asarray(policy))
    return list(unique.values())


def estimate_bayes_regret(mmdp, policies, sampler, n_samples):
    """
    Monte-Carlo estimate of E_υ[max_x (V*_υ(x) - max_{π ∈ Π} V^π_υ(x))].
    :param policies: Stored joint action tables of shape (H, S)
    :param sampler: ScalarizationSampler providing p_Υ
    :param n_samples: Number of υ draws
    """
    unique = dedupe_policies(policies)
    if not unique:
        raise InvalidArgumentError('Bayes regret needs at least one stored policy')
    if int(n_samples) < 1:
        raise InvalidArgumentError(f'n_samples must be positive, got {n_samples}')
    start_values = np.stack([evaluate_joint_policy(mmdp, p)[0] for p in unique])
    cache = {}
    gaps = np.empty(int(n_samples))
    for i in range(int(n_samples)):
        upsilon = sampler.sample(i + 1, stream=STREAM_BAYES)
        solution = scalarized_solution(cache, mmdp, upsilon)
        best = (start_values @ upsilon).max(axis=0)
        gaps[i] = float(np.max(solution.v_star[0] - best))
    stderr = float(gaps.std(ddof=1) / np.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
    return BayesRegretEstimate(mean=float(gaps.mean()), stderr=stderr, n_samples=len(gaps), n_policies=len(unique))


@dataclass
class CommLedger:
    """
    One row per episode: whether a synchronization happened, the per-step log-det ratios at trigger time, messages
    and scalar payload.
    """
    horizon: int
    rows: list = field(default_factory=list)

    @property
    def columns(self):
        return ['episode', 'synced', 'uploads', 'downloads', 'payload'] + \
            [f'log_det_ratio_{h}' for h in range(self.horizon)]

    @property
    def sync_episodes(self):
        return sum(1 for row in self.rows if row['synced'])

    def totals(self):
        return {
            'sync_episodes': self.sync_episodes,
            'uploads': int(sum(row['uploads'] for row in self.rows)),
            'downloads': int(sum(row['downloads'] for row in self.rows)),
            'payload': int(sum(row['payload'] for row in self.rows)),
        }

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.columns)

    @classmethod
    def from_frame(cls, frame):
        horizon = sum(1 for c in frame.columns if c.startswith('log_det_ratio_'))
        rows = frame.to_dict(orient='records')
        for row in rows:
            row['synced'] = bool(row['synced'])
        return cls(horizon=horizon, rows=rows)


def record_comm(ledger, episode, report=None, log_det_ratios=None):
    """
    Appends an episode row.
    :param report: SyncReport of the episode or None when nobody synchronized
    """
    ratios = list(log_det_ratios) if log_det_ratios is not None else [0.0] * ledger.horizon
    row = {
        'episode': int(episode),
        'synced': report is not None,
        'uploads': report.total_uploads if report else 0,
        'downloads': report.total_downloads if report else 0,
        'payload': report.total_payload if report else 0,
    }
    row.update({f'log_det_ratio_{h}': float(r) for h, r in enumerate(ratios)})
    ledger.rows.append(row)
    return ledger


@dataclass(frozen=True)
class BoundReport:
    kind: str
    measured: int
    bound: float
    passed: bool
    rule: str

    def to_dict(self):
        return {
            'kind': self.kind,
            'measured': self.measured,
            'bound': None if math.isinf(self.bound) else self.bound,
            'passed': self.passed,
            'rule': self.rule,
        }


def parallel_comm_bound(d, horizon, episodes, threshold, agents):
    """
    2H·sqrt(d·(T/S)·ln(MT)) + 4H
    """
    if episodes <= 0:
        return 4.0 * horizon
    log_term = max(math.log(agents * episodes), 0.0)
    return 2.0 * horizon * math.sqrt(d * (episodes / threshold) * log_term) + 4.0 * horizon


def mmdp_comm_bound(d, horizon, episodes, threshold, agents):
    """
    d·H·log_S(1 + MT/d) + H for S > 1.
    """
    return d * horizon * math.log1p(agents * episodes / d) / math.log(threshold) + horizon


def mmdp_threshold_for_budget(d, horizon, agents, episodes, rounds):
    """
    S = (1 + MT/d)^{1/C}, which caps the number of reward exchanges at (dC + 1)H.
    :param rounds: Budget factor C > 0
    """
    if not rounds > 0:
        raise InvalidArgumentError(f'Round budget must be positive, got {rounds}')
    return (1.0 + agents * episodes / d) ** (1.0 / rounds)


def verify_comm_bounds(comm_ledger, run_config):
    """
    Compares the measured number of synchronization episodes with the closed-form bound for the run's
    (d, H, T, S, M). Never raises.
    :param run_config: Object exposing mode, d_eff, horizon, episodes, agents and sync_threshold
    """
    measured = comm_ledger.sync_episodes
    threshold = run_config.sync_threshold
    horizon, episodes, agents, d = run_config.horizon, run_config.episodes, run_config.agents, run_config.d_eff
    kind = KIND_MMDP if run_config.mode == 'mmdp' else KIND_PARALLEL

    if threshold == SYNC_ALWAYS:
        return BoundReport(kind, measured, math.inf, True, 'always-sync has no finite bound')
    if threshold == SYNC_NEVER:
        bound = float(horizon if kind == KIND_MMDP else 4 * horizon)
        return BoundReport(kind, measured, bound, measured <= bound, 'never-sync closed form as S grows')
    threshold = float(threshold)
    if kind == KIND_PARALLEL:
        bound = parallel_comm_bound(d, horizon, episodes, threshold, agents)
        return BoundReport(kind, measured, bound, measured <= bound, 'n <= 2H sqrt(d (T/S) ln(MT)) + 4H')
    if threshold <= 1.0:
        return BoundReport(kind, measured, float(episodes), measured == episodes, 'S <= 1 gives n = T')
    bound = mmdp_comm_bound(d, horizon, episodes, threshold, agents)
    return BoundReport(kind, measured, bound, measured <= bound, 'n <= d H log_S(1 + MT/d) + H')


def sublinearity_ratio(cumulative):
    """
    ℜ(T) / ℜ(⌊T/2⌋) for a cumulative regret series indexed by episode 1..T.
    :return: The ratio, 0.0 when both values vanish, None when it is undefined
    """
    cumulative = list(cumulative)
    episodes = len(cumulative)
    if episodes < 2:
        return None
    numerator = float(cumulative[-1])
    denominator = float(cumulative[episodes // 2 - 1])
    if numerator == 0.0 and denominator == 0.0:
        return 0.0
    if denominator == 0.0:
        return None
    return numerator / denominator
