"""
Cooperative LSVI on linear multiagent MDPs with random scalarizations.

Every agent keeps a full replica of the learner state. Joint transitions are observed by everybody, but each agent
only sees its own reward entry; rewards are exchanged when the log-determinant of the joint covariance has grown by
ln S since the last exchange. Planning only ever uses the snapshot taken at the last exchange, so the replicas
compute identical policies without talking to each other in between.

With a threshold S <= 1 the exchange happens every episode, which is also how a single agent optimizing M objectives
is simulated.
"""
from dataclasses import dataclass

import numpy as np

from coop_lsvi.dp import check_simplex
from coop_lsvi.env import DEFAULT_MAX_JOINT, step_joint
from coop_lsvi.errors import InvalidArgumentError, ProtocolViolationError
from coop_lsvi.helpers import STREAM_SCALARIZATION, STREAM_START, STREAM_TRANSITION, array_digest, keyed_rng
from coop_lsvi.learner_base import CoopLearnerBase, EpisodeResult, QFunction, SyncReport
from coop_lsvi.linalg import (accumulator_from_samples, assemble_covariance, batch_merge, inverse_quadratic_forms,
                              log_det_ratio, make_covariance, rank_one_update, ridge_solve)

SAMPLER_DIRICHLET = 'dirichlet'
SAMPLER_POINT_MASS = 'point_mass'
SAMPLER_FINITE_SUPPORT = 'finite_support'

BONUS_SPECTRAL = 'spectral'
BONUS_SQRT_SPECTRAL = 'sqrt_spectral'


@dataclass(frozen=True, eq=False)
class ScalarizationSampler:
    """
    Distribution p_Υ over the M-simplex. Draws depend only on (seed, stream, t).
    """
    agents: int
    mode: str = SAMPLER_DIRICHLET
    alpha: float = 1.0
    point: tuple = None
    atoms: tuple = None
    weights: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.mode == SAMPLER_DIRICHLET:
            if not self.alpha > 0:
                raise InvalidArgumentError(f'Dirichlet concentration must be positive, got {self.alpha}')
        elif self.mode == SAMPLER_POINT_MASS:
            check_simplex(self.point, self.agents)
        elif self.mode == SAMPLER_FINITE_SUPPORT:
            if not self.atoms:
                raise InvalidArgumentError('Finite support sampler needs at least one atom')
            for atom in self.atoms:
                check_simplex(atom, self.agents)
            check_simplex(self.weights, len(self.atoms))
        else:
            raise InvalidArgumentError(f'Unknown sampler mode {self.mode}')

    @classmethod
    def from_dict(cls, data, agents, seed):
        data = dict(data or {})
        mode = data.get('mode', SAMPLER_DIRICHLET)
        atoms = data.get('atoms')
        weights = data.get('weights')
        if atoms is not None and weights is None:
            weights = [1.0 / len(atoms)] * len(atoms)
        return cls(
            agents=int(agents),
            mode=mode,
            alpha=float(data.get('alpha', 1.0)),
            point=None if data.get('point') is None else tuple(float(v) for v in data['point']),
            atoms=None if atoms is None else tuple(tuple(float(v) for v in atom) for atom in atoms),
            weights=None if weights is None else tuple(float(w) for w in weights),
            seed=int(data.get('seed', seed)),
        )

    def sample(self, t, stream=STREAM_SCALARIZATION):
        if self.mode == SAMPLER_POINT_MASS:
            return np.array(self.point, dtype=float)
        rng = keyed_rng(self.seed, stream, t)
        if self.mode == SAMPLER_FINITE_SUPPORT:
            index = int(rng.choice(len(self.atoms), p=np.array(self.weights)))
            return np.array(self.atoms[index], dtype=float)
        draw = rng.dirichlet(np.full(self.agents, self.alpha))
        return draw / draw.sum()


def sample_scalarization(sampler, t):
    return sampler.sample(t)


@dataclass(frozen=True)
class JointTransition:
    episode: int
    h: int
    state: int
    action: int
    next_state: int


@dataclass
class JointLearnerState:
    """
    One agent's replica. Per step h: synced_cov is the snapshot Λ^h at the last exchange, running_cov adds the
    pending outer products δΛ^h, synced_transitions (n, 3) and synced_rewards (n, M) hold every episode up to
    last_sync, pending_transitions and reward_buffer the episodes after it (own reward entry only).
    """
    replica_id: int
    horizon: int
    agents: int
    joint_features: np.ndarray
    synced_cov: list
    running_cov: list
    pending: list
    synced_transitions: list
    synced_rewards: list
    pending_transitions: list
    reward_buffer: list
    weights: list
    last_sync: int = 0

    @classmethod
    def create(cls, replica_id, joint_features, horizon, ridge):
        dim, agents = joint_features.shape[2:]
        cov = make_covariance(dim, ridge)
        return cls(
            replica_id=int(replica_id),
            horizon=int(horizon),
            agents=int(agents),
            joint_features=joint_features,
            synced_cov=[cov] * horizon,
            running_cov=[cov] * horizon,
            pending=[np.zeros((dim, dim)) for _ in range(horizon)],
            synced_transitions=[np.zeros((0, 3), dtype=int) for _ in range(horizon)],
            synced_rewards=[np.zeros((0, agents)) for _ in range(horizon)],
            pending_transitions=[[] for _ in range(horizon)],
            reward_buffer=[[] for _ in range(horizon)],
            weights=[np.zeros(dim) for _ in range(horizon)],
        )

    @property
    def dim(self):
        return self.joint_features.shape[2]

    def synced_blocks(self, h):
        """
        Φ(x_τ, a_τ) for every synced transition of step h, shape (n, d, M).
        """
        transitions = self.synced_transitions[h]
        return self.joint_features[transitions[:, 0], transitions[:, 1]]


def replica_digest(state):
    """
    Digest over everything planning reads: snapshots, synced data and k_t.
    """
    arrays = [np.array([state.last_sync])]
    for h in range(state.horizon):
        arrays += [state.synced_cov[h].matrix, state.synced_transitions[h], state.synced_rewards[h]]
    return array_digest(*arrays)


def check_replicas(replicas):
    digests = [replica_digest(r) for r in replicas]
    if len(set(digests)) > 1:
        raise ProtocolViolationError(f'Replica states diverged: {digests}')
    return digests[0]


def plan_scalarized(state, upsilon, beta, t, bonus_form=BONUS_SPECTRAL):
    """
    Scalarized optimistic Q functions on the joint spaces from the snapshot data. Targets are the vector rewards
    plus 1_M·V_{h+1}(x'), the weight is w = Λ⁻¹ Σ Φ y and
    Q(x, a) = υᵀΦ(x, a)ᵀw + β·‖Φ(x, a)ᵀΛ⁻¹Φ(x, a)‖₂, clipped to [0, H - h].
    :param bonus_form: 'spectral' uses the spectral norm as is, 'sqrt_spectral' its square root
    """
    if bonus_form not in (BONUS_SPECTRAL, BONUS_SQRT_SPECTRAL):
        raise InvalidArgumentError(f'Unknown bonus form {bonus_form}')
    upsilon = check_simplex(upsilon, state.agents)
    num_states, num_actions, dim, agents = state.joint_features.shape
    flat = state.joint_features.reshape(-1, dim, agents)
    radius = beta(t)
    next_values = np.zeros(num_states)
    handles = [None] * state.horizon
    for h in reversed(range(state.horizon)):
        cov = state.synced_cov[h]
        transitions = state.synced_transitions[h]
        if len(transitions):
            targets = state.synced_rewards[h] + next_values[transitions[:, 2]][:, None]
            acc = accumulator_from_samples(dim, state.synced_blocks(h), targets)
            state.weights[h] = ridge_solve(cov, acc).sum(axis=1)
        else:
            state.weights[h] = np.zeros(dim)
        mean = np.einsum('ndm,d->nm', flat, state.weights[h]) @ upsilon
        spectral = np.maximum(np.linalg.eigvalsh(inverse_quadratic_forms(cov, flat))[:, -1], 0.0)
        bonus = np.sqrt(spectral) if bonus_form == BONUS_SQRT_SPECTRAL else spectral
        q = np.clip(mean + radius * bonus, 0.0, float(state.horizon - h)).reshape(num_states, num_actions)
        q.setflags(write=False)
        handles[h] = QFunction(q)
        next_values = q.max(axis=-1)
    return handles


def act_joint_greedy(q_handle, x, agent_actions, max_joint=DEFAULT_MAX_JOINT):
    """
    Full enumeration argmax over the joint actions; the lexicographically smallest joint action wins ties.
    :return: Tuple with one action per agent
    """
    num_joint = int(np.prod(agent_actions))
    if num_joint > max_joint:
        raise InvalidArgumentError(f'{num_joint} joint actions exceed the budget of {max_joint}')
    row = q_handle.table[x]
    if row.shape != (num_joint,):
        raise InvalidArgumentError(f'Q row has {row.shape[0]} joint actions, expected {num_joint}')
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(row)), tuple(agent_actions)))


def observe_and_check(state, h, transition, own_reward, sync_policy):
    """
    Adds Φ(x, a)Φ(x, a)ᵀ to the pending statistics, buffers the replica's own reward and evaluates
    ln det(Λ^h + δΛ^h) - ln det(Λ^h) >= ln S.
    :return: True when the replica asks for a reward exchange
    """
    if transition.h != h:
        raise InvalidArgumentError(f'Transition of step {transition.h} observed at step {h}')
    block = state.joint_features[transition.state, transition.action]
    state.pending[h] = state.pending[h] + block @ block.T
    cov = state.running_cov[h]
    for column in block.T:
        cov = rank_one_update(cov, column)
    state.running_cov[h] = cov
    state.pending_transitions[h].append(transition)
    state.reward_buffer[h].append((transition.episode, float(own_reward)))
    return sync_policy.joint_fires(log_det_ratio(state.running_cov[h], state.synced_cov[h]))


def sync_rewards(replicas, episode):
    """
    Every replica uploads its buffered own rewards and downloads everybody else's, then folds the pending
    statistics into its snapshot.
    :param replicas: One JointLearnerState per agent, ordered by agent id
    :return: SyncReport counting scalar rewards
    """
    agents = len(replicas)
    if any(r.replica_id != m or r.agents != agents for m, r in enumerate(replicas)):
        raise ProtocolViolationError('Reward exchange needs exactly one replica per agent')
    horizon = replicas[0].horizon
    report = SyncReport(episode=episode, uploads=[], downloads=[], upload_payload=[], download_payload=[])
    for h in range(horizon):
        pending = replicas[0].pending_transitions[h]
        episodes = [tr.episode for tr in pending]
        columns = []
        for replica in replicas:
            if replica.pending_transitions[h] != pending:
                raise ProtocolViolationError(f'Replica {replica.replica_id} saw different transitions at step {h}')
            buffered = dict(replica.reward_buffer[h])
            missing = [e for e in episodes if e not in buffered]
            if missing or len(buffered) != len(episodes):
                raise ProtocolViolationError(
                    f'Replica {replica.replica_id} is missing reward records for episodes {missing} at step {h}')
            columns.append([buffered[e] for e in episodes])
        rewards = np.array(columns, dtype=float).T.reshape(len(episodes), agents)
        rows = np.array([[tr.state, tr.action, tr.next_state] for tr in pending], dtype=int).reshape(-1, 3)

        for replica in replicas:
            replica.synced_transitions[h] = np.concatenate([replica.synced_transitions[h], rows])
            replica.synced_rewards[h] = np.concatenate([replica.synced_rewards[h], rewards])
            replica.synced_cov[h] = batch_merge(replica.synced_cov[h], replica.pending[h])
            replica.running_cov[h] = replica.synced_cov[h]
            replica.pending[h] = np.zeros((replica.dim, replica.dim))
            replica.pending_transitions[h] = []
            replica.reward_buffer[h] = []

        report.uploads.append(agents)
        report.downloads.append(agents)
        report.upload_payload.append(agents * len(episodes))
        report.download_payload.append(agents * (agents - 1) * len(episodes))

    for replica in replicas:
        replica.last_sync = episode
    check_replicas(replicas)
    return report


class CoopMmdpLearner(CoopLearnerBase):
    """
    Runs the M replicas of the joint learner on an MmdpSpec.
    """

    def __init__(self, mmdp, beta, sync_policy, sampler, seed, logger, ridge=1.0, bonus_form=BONUS_SPECTRAL,
                 replica_checks=1, fixed_start=None, check_invariants=True, max_joint=DEFAULT_MAX_JOINT):
        super().__init__(mmdp.horizon, ridge, beta, sync_policy, seed, logger, check_invariants)
        if mmdp.num_states * mmdp.num_actions > max_joint:
            raise InvalidArgumentError(f'Joint space exceeds the budget of {max_joint}')
        if fixed_start is not None and not 0 <= fixed_start < mmdp.num_states:
            raise InvalidArgumentError(f'Fixed start state {fixed_start} outside [0, {mmdp.num_states})')
        if sampler.agents != mmdp.agents:
            raise InvalidArgumentError(f'Sampler draws {sampler.agents} weights for {mmdp.agents} agents')
        self.mmdp = mmdp
        self.sampler = sampler
        self.bonus_form = bonus_form
        self.replica_checks = max(0, min(int(replica_checks), mmdp.agents - 1))
        self.fixed_start = fixed_start
        self.max_joint = max_joint
        self.replicas = [JointLearnerState.create(m, mmdp.joint_features, self.horizon, self.ridge)
                         for m in range(mmdp.agents)]

    def start_state(self, t):
        if self.fixed_start is not None:
            return int(self.fixed_start)
        return int(keyed_rng(self.seed, STREAM_START, 0, t).integers(self.mmdp.num_states))

    def weight_bound(self, t):
        return 2.0 * self.horizon * self.mmdp.agents * np.sqrt(self.mmdp.feat_dim * t / self.ridge)

    def _plan(self, upsilon, t):
        digest = check_replicas(self.replicas)
        handles = plan_scalarized(self.replicas[0], upsilon, self.beta, t, self.bonus_form)
        for replica in self.replicas[1:1 + self.replica_checks]:
            replayed = plan_scalarized(replica, upsilon, self.beta, t, self.bonus_form)
            if any(not np.array_equal(a.table, b.table) for a, b in zip(handles, replayed)):
                raise ProtocolViolationError(f'Replica {replica.replica_id} planned a different policy at episode {t}')
        primary = self.replicas[0]
        bound = self.weight_bound(t)
        for h in range(self.horizon):
            self.check_weight_bound(primary.weights[h], bound, t, f'joint step {h}')
            if self.check_invariants:
                blocks = primary.synced_blocks(h)
                columns = np.transpose(blocks, (0, 2, 1)).reshape(-1, primary.dim)
                reference = assemble_covariance(primary.dim, self.ridge, columns)
                self.check_covariance(primary.synced_cov[h], reference, f'joint step {h}')
        return handles, digest

    def run_episode(self, t):
        upsilon = sample_scalarization(self.sampler, t)
        handles, digest = self._plan(upsilon, t)
        q_tables = np.stack([q.table for q in handles])

        x = x0 = self.start_state(t)
        flags, actions = [], []
        for h in range(self.horizon):
            joint = act_joint_greedy(handles[h], x, self.mmdp.agent_actions, self.max_joint)
            a = self.mmdp.joint_action_index(joint)
            rewards, next_state = step_joint(self.mmdp, x, a, h, keyed_rng(self.seed, STREAM_TRANSITION, 0, t, h))
            transition = JointTransition(t, h, x, a, next_state)
            replica_flags = [observe_and_check(r, h, transition, rewards[r.replica_id], self.sync_policy)
                             for r in self.replicas]
            if len(set(replica_flags)) > 1:
                raise ProtocolViolationError(f'Replicas disagree on the trigger at episode {t}, step {h}')
            flags.append(bool(replica_flags[0]))
            actions.append(a)
            x = next_state

        ratios = [float(log_det_ratio(self.replicas[0].running_cov[h], self.replicas[0].synced_cov[h]))
                  for h in range(self.horizon)]
        report = None
        if any(flags):
            report = sync_rewards(self.replicas, t)
            self.logger.info(f'Episode {t}: rewards synchronized ({report.total_payload} scalars)')
        event = {
            'episode': t,
            'agent': 'joint',
            'sync_flags': flags,
            'log_det_ratios': ratios,
            'beta': self.beta(t),
            'actions_digest': array_digest(np.array(actions)),
            'upsilon': [float(v) for v in upsilon],
            'replica_digest': digest,
        }
        return EpisodeResult(
            episode=t,
            start_states={0: x0},
            q_tables={0: q_tables},
            policies={0: q_tables.argmax(axis=-1)},
            synced=report is not None,
            report=report,
            log_det_ratios=ratios,
            upsilon=upsilon,
            events=[event],
        )
