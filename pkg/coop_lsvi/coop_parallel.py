"""
Cooperative LSVI on parallel MDPs. Each agent plans with least-squares value iteration on every transition it
has access to, signals the server when the log-determinant of its local covariance has grown enough since the last
synchronization, and the server then broadcasts the union of all unsynced transitions to every agent.

The homogeneous, small deviation and contextual variants share this code; they differ only in the exploration
radius and in the feature tables (contextual agents regress on [φ(x, a); κ(n)] for every source agent n).
"""
from dataclasses import dataclass, field

import numpy as np

from coop_lsvi.env import FLAVOR_CONTEXTUAL, step
from coop_lsvi.errors import InvalidArgumentError, ProtocolViolationError
from coop_lsvi.helpers import STREAM_START, STREAM_TRANSITION, array_digest, keyed_rng
from coop_lsvi.learner_base import CoopLearnerBase, EpisodeResult, QFunction, SyncReport
from coop_lsvi.linalg import (accumulator_from_samples, assemble_covariance, batch_merge, ellipsoid_norms,
                              log_det_ratio, make_accumulator, make_covariance, rank_one_update, ridge_solve)

# (source agent, state, action, next state, reward)
RECORD_SIZE = 5


@dataclass(frozen=True)
class TransitionRecord:
    agent: int
    episode: int
    h: int
    state: int
    action: int
    next_state: int
    reward: float

    @property
    def key(self):
        return self.agent, self.episode, self.h

    @property
    def order(self):
        return self.episode, self.agent


@dataclass
class AgentLearnerState:
    """
    One agent's statistics, per step h. synced_cov is λI + S (transitions of every agent through the last sync),
    plan_cov is λI + S + δS, pending holds δS and outbox the own transitions not yet sent to the server.
    feature_tables has shape (N, S, A, d) with N = M for contextual agents and N = 1 otherwise.
    """
    agent_id: int
    horizon: int
    feature_tables: np.ndarray
    contextual: bool
    synced_cov: list
    plan_cov: list
    pending: list
    store: list
    outbox: list
    weights: list
    last_sync: int = 0
    log_det_ratios: list = field(default_factory=list)
    store_keys: list = field(default_factory=list)

    @classmethod
    def create(cls, agent_id, feature_tables, horizon, ridge, contextual=False):
        feature_tables = np.asarray(feature_tables, dtype=float)
        if feature_tables.ndim != 4:
            raise InvalidArgumentError(f'Feature tables must have shape (N, S, A, d), got {feature_tables.shape}')
        if contextual and not 0 <= agent_id < feature_tables.shape[0]:
            raise InvalidArgumentError(f'No context available for agent {agent_id}')
        dim = feature_tables.shape[-1]
        cov = make_covariance(dim, ridge)
        return cls(
            agent_id=int(agent_id),
            horizon=int(horizon),
            feature_tables=feature_tables,
            contextual=contextual,
            synced_cov=[cov] * horizon,
            plan_cov=[cov] * horizon,
            pending=[np.zeros((dim, dim)) for _ in range(horizon)],
            store=[[] for _ in range(horizon)],
            outbox=[[] for _ in range(horizon)],
            weights=[np.zeros(dim) for _ in range(horizon)],
            log_det_ratios=[0.0] * horizon,
            store_keys=[set() for _ in range(horizon)],
        )

    @property
    def dim(self):
        return self.feature_tables.shape[-1]

    def context_index(self, agent):
        return agent if self.contextual else 0

    def feature(self, record):
        return self.feature_tables[self.context_index(record.agent), record.state, record.action]

    def store_features(self, h):
        if not self.store[h]:
            return np.zeros((0, self.dim))
        return np.array([self.feature(r) for r in self.store[h]])


def _backward_pass(agent, beta, t):
    """
    LSVI from h = H-1 down to 0. Targets are rebuilt from the raw transitions with the value of step h + 1 computed
    in the same pass.
    :return: Q tables of shape (N, S, A) per step
    """
    num_contexts, num_states, num_actions, dim = agent.feature_tables.shape
    flat = agent.feature_tables.reshape(-1, dim)
    radius = beta(t)
    next_values = np.zeros((num_contexts, num_states))
    tables = [None] * agent.horizon
    for h in reversed(range(agent.horizon)):
        records = agent.store[h]
        if records:
            targets = np.array([r.reward + next_values[agent.context_index(r.agent), r.next_state] for r in records])
            acc = accumulator_from_samples(dim, agent.store_features(h), targets)
        else:
            acc = make_accumulator(dim)
        cov = agent.plan_cov[h]
        agent.weights[h] = ridge_solve(cov, acc)[:, 0]
        q = flat @ agent.weights[h] + radius * ellipsoid_norms(cov, flat)
        q = np.clip(q, 0.0, float(agent.horizon - h)).reshape(num_contexts, num_states, num_actions)
        q.setflags(write=False)
        tables[h] = q
        next_values = q.max(axis=-1)
    return tables


def plan(agent, beta, t):
    """
    Optimistic Q functions the agent acts on in episode t, one per step. Contextual agents get their own slice
    Q(m, ·, ·).
    :param agent: AgentLearnerState
    :param beta: Callable returning β(t)
    :param t: Current episode
    """
    tables = _backward_pass(agent, beta, t)
    own = agent.context_index(agent.agent_id)
    return [QFunction(table[own]) for table in tables]


def plan_contextual(agent, beta, t):
    """
    Optimistic Q functions over (n, x, a) regressed on the combined features [φ(x, a); κ(n)].
    """
    if not agent.contextual:
        raise InvalidArgumentError(f'Agent {agent.agent_id} has no context table')
    return [QFunction(table) for table in _backward_pass(agent, beta, t)]


def act_greedy(q_handle, x):
    """
    argmax_a Q(x, a), lowest action index on ties.
    """
    if q_handle.table.ndim != 2:
        raise InvalidArgumentError('act_greedy expects a Q function over (x, a)')
    return int(np.argmax(q_handle.table[x]))


def observe(agent, h, transition, sync_policy):
    """
    Adds an own transition to the local statistics and evaluates the determinant trigger.
    :param transition: TransitionRecord produced by this agent at step h
    :return: True when the agent signals a synchronization
    """
    if transition.h != h or transition.agent != agent.agent_id:
        raise InvalidArgumentError(f'Agent {agent.agent_id} cannot observe {transition} at step {h}')
    if transition.key in agent.store_keys[h]:
        raise ProtocolViolationError(f'Transition {transition.key} was already observed')
    phi = agent.feature(transition)
    agent.pending[h] = agent.pending[h] + np.outer(phi, phi)
    agent.plan_cov[h] = rank_one_update(agent.plan_cov[h], phi)
    agent.store[h].append(transition)
    agent.store_keys[h].add(transition.key)
    agent.outbox[h].append(transition)
    ratio = log_det_ratio(agent.plan_cov[h], agent.synced_cov[h])
    agent.log_det_ratios[h] = ratio
    return sync_policy.parallel_fires(ratio, transition.episode - agent.last_sync)


def server_sync(agents, h_range, episode):
    """
    Collects every agent's outbox for the given steps and broadcasts the union. Afterwards all agents hold identical
    synced covariances and transition stores for those steps.
    :param agents: Every AgentLearnerState taking part in the run
    :param h_range: Steps to synchronize
    :param episode: Episode at whose end the round happens
    :return: SyncReport with one upload and one download per agent and step
    """
    if not agents:
        raise ProtocolViolationError('Synchronization needs at least one agent')
    horizon = agents[0].horizon
    if any(agent.horizon != horizon for agent in agents):
        raise ProtocolViolationError('Agents disagree on the horizon')
    steps = list(h_range)
    if not steps or len(set(steps)) != len(steps) or any(not 0 <= h < horizon for h in steps):
        raise ProtocolViolationError(f'Inconsistent step range {steps} for horizon {horizon}')

    report = SyncReport(episode=episode, uploads=[], downloads=[], upload_payload=[], download_payload=[])
    for h in steps:
        union = {}
        for agent in agents:
            for record in agent.outbox[h]:
                union.setdefault(record.key, record)
        broadcast = sorted(union.values(), key=lambda r: r.order)

        for agent in agents:
            features = np.array([agent.feature(r) for r in broadcast]).reshape(-1, agent.dim)
            agent.synced_cov[h] = batch_merge(agent.synced_cov[h], features.T @ features)
            for record in broadcast:
                if record.key not in agent.store_keys[h]:
                    agent.store[h].append(record)
                    agent.store_keys[h].add(record.key)
            agent.store[h].sort(key=lambda r: r.order)
            agent.plan_cov[h] = agent.synced_cov[h]
            agent.pending[h] = np.zeros((agent.dim, agent.dim))
            agent.outbox[h] = []

        report.uploads.append(len(agents))
        report.downloads.append(len(agents))
        report.upload_payload.append(len(broadcast) * RECORD_SIZE)
        report.download_payload.append(len(agents) * len(broadcast) * RECORD_SIZE)

    for agent in agents:
        agent.last_sync = episode
    return report


class CoopParallelLearner(CoopLearnerBase):
    """
    Runs M agents on a ParallelEnvSet in round-robin order with a central server.
    """

    def __init__(self, env_set, beta, sync_policy, seed, logger, ridge=1.0, agent_ids=None, fixed_start=None,
                 check_invariants=True):
        spec = env_set.specs[0]
        super().__init__(spec.horizon, ridge, beta, sync_policy, seed, logger, check_invariants)
        self.env_set = env_set
        self.contextual = env_set.flavor == FLAVOR_CONTEXTUAL
        self.agent_ids = list(range(env_set.agents)) if agent_ids is None else [int(m) for m in agent_ids]
        if not self.agent_ids or any(not 0 <= m < env_set.agents for m in self.agent_ids):
            raise InvalidArgumentError(f'Agent ids {self.agent_ids} outside [0, {env_set.agents})')
        if fixed_start is not None and not 0 <= fixed_start < spec.num_states:
            raise InvalidArgumentError(f'Fixed start state {fixed_start} outside [0, {spec.num_states})')
        self.fixed_start = fixed_start
        if self.contextual:
            feature_tables = np.stack([s.features for s in env_set.specs])
        else:
            feature_tables = spec.features[None]
        self.agents = [AgentLearnerState.create(m, feature_tables, self.horizon, self.ridge, self.contextual)
                       for m in self.agent_ids]
        self.d_eff = feature_tables.shape[-1]

    def start_state(self, m, t):
        if self.fixed_start is not None:
            return int(self.fixed_start)
        return int(keyed_rng(self.seed, STREAM_START, m, t).integers(self.env_set.specs[0].num_states))

    def weight_bound(self, t):
        return 2.0 * self.horizon * np.sqrt(self.d_eff * self.env_set.agents * t / self.ridge)

    def _check_agent(self, agent, t):
        bound = self.weight_bound(t)
        for h in range(self.horizon):
            self.check_weight_bound(agent.weights[h], bound, t, f'agent {agent.agent_id} step {h}')
            if self.check_invariants:
                reference = assemble_covariance(agent.dim, self.ridge, agent.store_features(h))
                self.check_covariance(agent.plan_cov[h], reference, f'agent {agent.agent_id} step {h}')

    def run_episode(self, t):
        """
        Plan, act and observe for every agent, then synchronize if any agent signalled.
        """
        radius = self.beta(t)
        q_tables, policies, start_states, events = {}, {}, {}, []
        flagged = False
        ratios = np.zeros(self.horizon)
        for agent in self.agents:
            m = agent.agent_id
            handles = plan(agent, self.beta, t)
            self._check_agent(agent, t)
            q_tables[m] = np.stack([q.table for q in handles])
            policies[m] = q_tables[m].argmax(axis=-1)

            spec = self.env_set.specs[m]
            x = start_states[m] = self.start_state(m, t)
            actions, flags = [], []
            for h in range(self.horizon):
                a = act_greedy(handles[h], x)
                reward, next_state = step(spec, x, a, h, keyed_rng(self.seed, STREAM_TRANSITION, m, t, h))
                record = TransitionRecord(m, t, h, x, a, next_state, reward)
                flags.append(bool(observe(agent, h, record, self.sync_policy)))
                actions.append(a)
                x = next_state
            ratios = np.maximum(ratios, agent.log_det_ratios)
            if any(flags):
                flagged = True
                self.logger.info(f'Episode {t}: agent {m} signalled synchronization '
                                 f'(max log-det ratio {max(agent.log_det_ratios):.4f})')
            events.append({
                'episode': t,
                'agent': m,
                'sync_flags': flags,
                'log_det_ratios': [float(r) for r in agent.log_det_ratios],
                'beta': radius,
                'actions_digest': array_digest(np.array(actions)),
            })

        report = server_sync(self.agents, range(self.horizon), t) if flagged else None
        return EpisodeResult(
            episode=t,
            start_states=start_states,
            q_tables=q_tables,
            policies=policies,
            synced=flagged,
            report=report,
            log_det_ratios=[float(r) for r in ratios],
            events=events,
        )
