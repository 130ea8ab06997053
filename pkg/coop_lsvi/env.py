"""
Linear parallel MDPs and linear multiagent MDPs: construction, validation, simulation and JSON serialization.

Steps are zero-indexed throughout (h in range(horizon)).
"""
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from coop_lsvi.errors import InvalidArgumentError
from coop_lsvi.helpers import sample_categorical

SCHEMA_VERSION = '1'
NORM_TOL = 1e-9
KERNEL_MASS_TOL = 1e-9
ENTRY_TOL = 1e-12
RANK_TOL = 1e-10
DEFAULT_MAX_JOINT = 4096

FLAVOR_HOMOGENEOUS = 'homogeneous'
FLAVOR_SMALL_DEVIATION = 'small_deviation'
FLAVOR_CONTEXTUAL = 'contextual'


@dataclass(frozen=True, eq=False)
class LinearMdpSpec:
    """
    Finite linear MDP: P_h(·|x, a) = φ(x, a)ᵀμ_h and r_h(x, a) = φ(x, a)ᵀθ_h.
    features has shape (S, A, d), measures (H, d, S) and reward_weights (H, d).
    """
    num_states: int
    num_actions: int
    horizon: int
    feat_dim: int
    features: np.ndarray
    measures: np.ndarray
    reward_weights: np.ndarray

    @cached_property
    def transitions(self):
        return np.einsum('sad,hdn->hsan', self.features, self.measures)

    @cached_property
    def rewards(self):
        return np.einsum('sad,hd->hsa', self.features, self.reward_weights)

    def same_as(self, other):
        """
        Bitwise equality of every parameter array.
        """
        return (self.num_states, self.num_actions, self.horizon, self.feat_dim) == \
            (other.num_states, other.num_actions, other.horizon, other.feat_dim) and \
            np.array_equal(self.features, other.features) and \
            np.array_equal(self.measures, other.measures) and \
            np.array_equal(self.reward_weights, other.reward_weights)


@dataclass(frozen=True, eq=False)
class ParallelEnvSet:
    """
    M linear MDPs sharing S, A, H and d, one per agent.
    For the contextual flavor every agent spec already carries the combined features [φ; κ(m)], contexts holds
    κ as an (M, k) array and context_measures holds ν as (H, k, S).
    """
    agents: int
    specs: tuple
    flavor: str
    xi: float = 0.0
    base_feat_dim: int = 0
    contexts: np.ndarray = None
    context_measures: np.ndarray = None

    @property
    def context_dim(self):
        return 0 if self.contexts is None else self.contexts.shape[1]

    @property
    def base_features(self):
        """
        φ(x, a) without the agent context, shape (S, A, d).
        """
        return self.specs[0].features[:, :, :self.base_feat_dim]


@dataclass(frozen=True, eq=False)
class MmdpSpec:
    """
    Linear multiagent MDP over explicit joint spaces. Joint states and actions are flat indices into the product of
    the per-agent spaces (C order, agent 0 most significant).
    reward_features has shape (M, S, A, d1), common_features (S, A, d2), reward_weights (H, d1), measures (H, d2, S).
    """
    agent_states: tuple
    agent_actions: tuple
    horizon: int
    reward_feat_dim: int
    trans_feat_dim: int
    reward_features: np.ndarray
    common_features: np.ndarray
    reward_weights: np.ndarray
    measures: np.ndarray

    @property
    def agents(self):
        return len(self.agent_states)

    @property
    def num_states(self):
        return int(np.prod(self.agent_states))

    @property
    def num_actions(self):
        return int(np.prod(self.agent_actions))

    @property
    def feat_dim(self):
        return self.reward_feat_dim + self.trans_feat_dim

    @cached_property
    def joint_features(self):
        """
        Φ(x, a) for every joint pair, shape (S, A, d, M); column m is [φ_m; φ_c].
        """
        num_states, num_actions = self.num_states, self.num_actions
        stacked = np.empty((num_states, num_actions, self.feat_dim, self.agents))
        for m in range(self.agents):
            stacked[:, :, :self.reward_feat_dim, m] = self.reward_features[m]
            stacked[:, :, self.reward_feat_dim:, m] = self.common_features
        return stacked

    @cached_property
    def rewards(self):
        """
        Vector rewards, shape (H, S, A, M).
        """
        return np.einsum('msad,hd->hsam', self.reward_features, self.reward_weights)

    @cached_property
    def transitions(self):
        return np.einsum('sad,hdn->hsan', self.common_features, self.measures)

    def joint_action(self, index):
        return tuple(int(i) for i in np.unravel_index(index, self.agent_actions))

    def joint_action_index(self, actions):
        return int(np.ravel_multi_index(tuple(actions), self.agent_actions))

    def joint_state(self, index):
        return tuple(int(i) for i in np.unravel_index(index, self.agent_states))

    def same_as(self, other):
        return self.agent_states == other.agent_states and self.agent_actions == other.agent_actions and \
            self.horizon == other.horizon and \
            all(np.array_equal(getattr(self, name), getattr(other, name))
                for name in ('reward_features', 'common_features', 'reward_weights', 'measures'))


@dataclass(frozen=True)
class Violation:
    kind: str
    coords: tuple
    magnitude: float

    def __str__(self):
        return f'{self.kind} at {self.coords}: {self.magnitude:.3e}'


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, kind, coords, magnitude):
        self.violations.append(Violation(kind, tuple(int(c) for c in coords), float(magnitude)))

    def kinds(self):
        return {v.kind for v in self.violations}


def _simplex_features(rng, num_pairs, dim):
    """
    One point of the dim-simplex per state-action pair. dim distinct pairs are pinned to the simplex vertices so the
    features span R^dim.
    """
    points = rng.dirichlet(np.ones(dim), size=num_pairs)
    anchors = rng.permutation(num_pairs)[:dim]
    points[anchors] = np.eye(dim)
    return points


def _anchor_measures(rng, horizon, dim, num_states):
    """
    dim anchor distributions over the states for every step, shape (H, dim, S).
    """
    return rng.dirichlet(np.ones(num_states), size=(horizon, dim))


def _check_sizes(**sizes):
    for name, value in sizes.items():
        if int(value) != value or value < 1:
            raise InvalidArgumentError(f'{name} must be a positive integer, got {value}')


def generate_linear_mdp(num_states, num_actions, horizon, feat_dim, seed):
    """
    Valid-by-construction linear MDP: features are simplex points, every μ_h row is a distribution over the states
    so φᵀμ_h is a mixture of distributions, and θ_h lies in [0, 1]^d so rewards land in [0, 1].
    :param seed: Instance seed; equal seeds give bitwise-equal specs
    """
    _check_sizes(num_states=num_states, num_actions=num_actions, horizon=horizon, feat_dim=feat_dim)
    if feat_dim > num_states * num_actions:
        raise InvalidArgumentError(f'feat_dim {feat_dim} exceeds the {num_states * num_actions} state-action pairs')
    rng = np.random.default_rng(seed)
    features = _simplex_features(rng, num_states * num_actions, feat_dim).reshape(num_states, num_actions, feat_dim)
    measures = _anchor_measures(rng, horizon, feat_dim, num_states)
    reward_weights = rng.uniform(0.0, 1.0, size=(horizon, feat_dim))
    return LinearMdpSpec(
        num_states=int(num_states),
        num_actions=int(num_actions),
        horizon=int(horizon),
        feat_dim=int(feat_dim),
        features=features,
        measures=measures,
        reward_weights=reward_weights,
    )


def _validate_kernel(report, transitions):
    negative = np.argwhere(transitions < -ENTRY_TOL)
    for coords in negative:
        report.add('kernel_negative', coords, transitions[tuple(coords)])
    mass_error = np.abs(transitions.sum(axis=-1) - 1.0)
    for coords in np.argwhere(mass_error > KERNEL_MASS_TOL):
        report.add('kernel_mass', coords, mass_error[tuple(coords)])


def _validate_rewards(report, rewards, kind='reward_range'):
    below = -rewards
    above = rewards - 1.0
    excess = np.maximum(below, above)
    for coords in np.argwhere(excess > ENTRY_TOL):
        report.add(kind, coords, excess[tuple(coords)])


def validate_spec(spec):
    """
    Lists every violated invariant of a LinearMdpSpec or MmdpSpec with its coordinates and magnitude.
    Coordinates follow the array layout: kernel entries (h, x, a, x'), rewards (h, x, a) or (h, x, a, m),
    features (x, a), measures and weights (h,).
    """
    report = ValidationReport()
    if isinstance(spec, MmdpSpec):
        norms = np.linalg.norm(spec.joint_features, ord=2, axis=(2, 3))
        for coords in np.argwhere(norms > 1.0 + NORM_TOL):
            report.add('feature_norm', coords, norms[tuple(coords)])
        _validate_rewards(report, spec.rewards)
        _validate_kernel(report, spec.transitions)
        return report

    norms = np.linalg.norm(spec.features, axis=-1)
    for coords in np.argwhere(norms > 1.0 + NORM_TOL):
        report.add('feature_norm', coords, norms[tuple(coords)])
    _validate_kernel(report, spec.transitions)
    _validate_rewards(report, spec.rewards)
    bound = np.sqrt(spec.feat_dim) + NORM_TOL
    measure_norms = np.linalg.norm(spec.measures.sum(axis=-1), axis=-1)
    for h in np.flatnonzero(measure_norms > bound):
        report.add('measure_norm', (h,), measure_norms[h])
    weight_norms = np.linalg.norm(spec.reward_weights, axis=-1)
    for h in np.flatnonzero(weight_norms > bound):
        report.add('reward_weight_norm', (h,), weight_norms[h])
    return report


def _check_step(num_states, num_actions, horizon, x, a, h):
    if not (0 <= h < horizon):
        raise InvalidArgumentError(f'Step {h} outside [0, {horizon})')
    if not (0 <= x < num_states):
        raise InvalidArgumentError(f'State {x} outside [0, {num_states})')
    if not (0 <= a < num_actions):
        raise InvalidArgumentError(f'Action {a} outside [0, {num_actions})')


def step(spec, x, a, h, rng):
    """
    Simulates one transition.
    :param rng: numpy Generator keyed by (agent, episode, step)
    :return: (reward, next_state)
    """
    _check_step(spec.num_states, spec.num_actions, spec.horizon, x, a, h)
    reward = float(spec.rewards[h, x, a])
    next_state = sample_categorical(spec.transitions[h, x, a], rng)
    return reward, next_state


def step_joint(mmdp, x, a, h, rng):
    """
    Simulates one joint transition.
    :param x: Joint state index
    :param a: Joint action index
    :return: (reward vector of length M, next joint state index)
    """
    _check_step(mmdp.num_states, mmdp.num_actions, mmdp.horizon, x, a, h)
    rewards = np.array(mmdp.rewards[h, x, a])
    next_state = sample_categorical(mmdp.transitions[h, x, a], rng)
    return rewards, next_state


def homogeneous_set(spec, agents):
    _check_sizes(agents=agents)
    return ParallelEnvSet(agents=int(agents), specs=(spec,) * int(agents), flavor=FLAVOR_HOMOGENEOUS,
                          base_feat_dim=spec.feat_dim)


def perturb_small_deviation(spec, xi, agents, seed):
    """
    Agent m gets μ_m = (1 - ξ/2)μ + (ξ/2)ν_m and θ_m = (1 - ξ/2)θ + (ξ/2)η_m with valid agent-specific
    anchors ν_m and η_m ∈ [0, 1]^d, so every pair of agents differs by at most ξ/2 in total variation and in
    reward.
    :param xi: Deviation level 0 <= ξ < 1
    """
    if not (0.0 <= xi < 1.0):
        raise InvalidArgumentError(f'xi must lie in [0, 1), got {xi}')
    _check_sizes(agents=agents)
    if xi == 0.0:
        return homogeneous_set(spec, agents)
    rng = np.random.default_rng(seed)
    keep = 1.0 - xi / 2.0
    specs = []
    for _ in range(agents):
        agent_measures = _anchor_measures(rng, spec.horizon, spec.feat_dim, spec.num_states)
        agent_weights = rng.uniform(0.0, 1.0, size=spec.reward_weights.shape)
        specs.append(LinearMdpSpec(
            num_states=spec.num_states,
            num_actions=spec.num_actions,
            horizon=spec.horizon,
            feat_dim=spec.feat_dim,
            features=spec.features,
            measures=keep * spec.measures + (xi / 2.0) * agent_measures,
            reward_weights=keep * spec.reward_weights + (xi / 2.0) * agent_weights,
        ))
    return ParallelEnvSet(agents=int(agents), specs=tuple(specs), flavor=FLAVOR_SMALL_DEVIATION, xi=float(xi),
                          base_feat_dim=spec.feat_dim)


def max_pairwise_deviation(env_set):
    """
    Largest total-variation distance between transition rows and largest reward gap over all agent pairs and all
    (h, x, a).
    :return: (max_tv, max_reward_gap)
    """
    max_tv = 0.0
    max_gap = 0.0
    for first, second in combinations(env_set.specs, 2):
        tv = 0.5 * np.abs(first.transitions - second.transitions).sum(axis=-1)
        max_tv = max(max_tv, float(tv.max()))
        max_gap = max(max_gap, float(np.abs(first.rewards - second.rewards).max()))
    return max_tv, max_gap


def build_contextual_set(num_states, num_actions, horizon, feat_dim, context_dim, agents, chi, seed,
                         context_weight=0.3, peak_mass=0.75):
    """
    Heterogeneous parallel MDP with agent contexts κ(m) ∈ R^k whose projected Gram matrix has rank χ at every step.
    Combined features [φ(x, a); κ(m)] are points of the (d + k)-simplex: φ carries mass 1 - context_weight and κ
    carries context_weight. The first χ agents receive χ distinct simplex vertices of R^k, the remaining agents
    random mixtures of them. ν_h rows used by the contexts peak on distinct states, which keeps them linearly
    independent.
    :param chi: Requested coefficient of heterogeneity
    """
    _check_sizes(num_states=num_states, num_actions=num_actions, horizon=horizon, feat_dim=feat_dim, agents=agents)
    if feat_dim > num_states * num_actions:
        raise InvalidArgumentError(f'feat_dim {feat_dim} exceeds the {num_states * num_actions} state-action pairs')
    if context_dim < 0:
        raise InvalidArgumentError(f'context_dim must be non-negative, got {context_dim}')
    if context_dim == 0 and chi != 0:
        raise InvalidArgumentError('Empty contexts only admit chi = 0')
    if context_dim > 0 and not (1 <= chi <= min(context_dim, agents, num_states)):
        raise InvalidArgumentError(
            f'chi must lie in [1, min(k, M, |S|)] = [1, {min(context_dim, agents, num_states)}], got {chi}')

    rng = np.random.default_rng(seed)
    weight = context_weight if context_dim > 0 else 0.0
    base = _simplex_features(rng, num_states * num_actions, feat_dim).reshape(num_states, num_actions, feat_dim)
    base_measures = _anchor_measures(rng, horizon, feat_dim, num_states)
    base_weights = rng.uniform(0.0, 1.0, size=(horizon, feat_dim))

    contexts = np.zeros((agents, context_dim))
    context_measures = np.zeros((horizon, context_dim, num_states))
    context_weights = rng.uniform(0.0, 1.0, size=(horizon, context_dim))
    if context_dim > 0:
        used = rng.choice(context_dim, size=chi, replace=False)
        prototypes = np.eye(context_dim)[used]
        for m in range(agents):
            mix = np.eye(chi)[m] if m < chi else rng.dirichlet(np.ones(chi))
            contexts[m] = mix @ prototypes
        contexts *= weight
        context_measures = _anchor_measures(rng, horizon, context_dim, num_states)
        for h in range(horizon):
            peaks = rng.choice(num_states, size=chi, replace=False)
            for j, peak in zip(used, peaks):
                context_measures[h, j] *= 1.0 - peak_mass
                context_measures[h, j, peak] += peak_mass

    specs = []
    for m in range(agents):
        features = np.concatenate(
            [(1.0 - weight) * base, np.broadcast_to(contexts[m], (num_states, num_actions, context_dim))], axis=-1)
        specs.append(LinearMdpSpec(
            num_states=int(num_states),
            num_actions=int(num_actions),
            horizon=int(horizon),
            feat_dim=int(feat_dim + context_dim),
            features=features,
            measures=np.concatenate([base_measures, context_measures], axis=1),
            reward_weights=np.concatenate([base_weights, context_weights], axis=1),
        ))
    return ParallelEnvSet(agents=int(agents), specs=tuple(specs), flavor=FLAVOR_CONTEXTUAL, base_feat_dim=int(feat_dim),
                          contexts=contexts, context_measures=context_measures)


def heterogeneity_gram(env_set, h):
    """
    K^κ_h = [(ν_hᵀκ(m))ᵀ(ν_hᵀκ(m'))]_{m, m'}
    """
    projected = env_set.contexts @ env_set.context_measures[h]
    return projected @ projected.T


def heterogeneity_coefficient(env_set, tol=RANK_TOL):
    """
    χ = max_h rank(K^κ_h), singular values at or below tol counted as zero.
    """
    if env_set.context_dim == 0:
        return 0
    ranks = []
    for h in range(env_set.specs[0].horizon):
        singular = np.linalg.svd(heterogeneity_gram(env_set, h), compute_uv=False)
        ranks.append(int(np.sum(singular > tol)))
    return max(ranks)


def _as_sizes(value, agents, name):
    sizes = [int(value)] * agents if np.isscalar(value) else [int(v) for v in value]
    if len(sizes) != agents:
        raise InvalidArgumentError(f'{name} lists {len(sizes)} agents, expected {agents}')
    _check_sizes(**{f'{name}[{i}]': s for i, s in enumerate(sizes)})
    return tuple(sizes)


def generate_mmdp(agent_states, agent_actions, horizon, reward_feat_dim, trans_feat_dim, agents, seed,
                  fully_cooperative=False, max_joint=DEFAULT_MAX_JOINT):
    """
    Valid-by-construction linear MMDP on the explicit joint spaces. Reward features are φ_i = q_i / (2√M) and the
    common feature is φ_c = p / (2√M) with q_i, p simplex points, so ‖Φ(x, a)‖₂ <= 1. Measures are anchor
    distributions scaled by 2√M and reward weights lie in [0, 2√M]^{d1}, keeping kernels and rewards valid.
    :param agent_states: Per-agent state-space sizes, or one size shared by every agent
    :param agent_actions: Per-agent action-space sizes, or one size shared by every agent
    :param fully_cooperative: Use φ_1 = ... = φ_M so every agent receives the same reward
    """
    _check_sizes(horizon=horizon, reward_feat_dim=reward_feat_dim, trans_feat_dim=trans_feat_dim, agents=agents)
    states = _as_sizes(agent_states, agents, 'agent_states')
    actions = _as_sizes(agent_actions, agents, 'agent_actions')
    num_states, num_actions = int(np.prod(states)), int(np.prod(actions))
    if num_states * num_actions > max_joint:
        raise InvalidArgumentError(
            f'Joint space |S|·|A| = {num_states * num_actions} exceeds the budget of {max_joint}')
    pairs = num_states * num_actions
    if max(reward_feat_dim, trans_feat_dim) > pairs:
        raise InvalidArgumentError(f'Feature dimensions exceed the {pairs} joint state-action pairs')

    rng = np.random.default_rng(seed)
    scale = 1.0 / (2.0 * np.sqrt(agents))
    common = scale * _simplex_features(rng, pairs, trans_feat_dim).reshape(num_states, num_actions, trans_feat_dim)
    if fully_cooperative:
        shared = _simplex_features(rng, pairs, reward_feat_dim).reshape(num_states, num_actions, reward_feat_dim)
        reward_features = scale * np.broadcast_to(shared, (agents,) + shared.shape).copy()
    else:
        reward_features = scale * np.stack([
            _simplex_features(rng, pairs, reward_feat_dim).reshape(num_states, num_actions, reward_feat_dim)
            for _ in range(agents)])
    measures = _anchor_measures(rng, horizon, trans_feat_dim, num_states) / scale
    reward_weights = rng.uniform(0.0, 1.0, size=(horizon, reward_feat_dim)) / scale
    return MmdpSpec(
        agent_states=states,
        agent_actions=actions,
        horizon=int(horizon),
        reward_feat_dim=int(reward_feat_dim),
        trans_feat_dim=int(trans_feat_dim),
        reward_features=reward_features,
        common_features=common,
        reward_weights=reward_weights,
        measures=measures,
    )


def _spec_to_dict(spec):
    return {
        'num_states': spec.num_states,
        'num_actions': spec.num_actions,
        'horizon': spec.horizon,
        'feat_dim': spec.feat_dim,
        'features': spec.features.tolist(),
        'measures': spec.measures.tolist(),
        'reward_weights': spec.reward_weights.tolist(),
    }


def _spec_from_dict(data):
    return LinearMdpSpec(
        num_states=int(data['num_states']),
        num_actions=int(data['num_actions']),
        horizon=int(data['horizon']),
        feat_dim=int(data['feat_dim']),
        features=np.asarray(data['features'], dtype=float),
        measures=np.asarray(data['measures'], dtype=float),
        reward_weights=np.asarray(data['reward_weights'], dtype=float),
    )


def dump_spec(spec):
    """
    JSON-ready dictionary for a LinearMdpSpec, ParallelEnvSet or MmdpSpec. Field names match the type definitions.
    """
    if isinstance(spec, LinearMdpSpec):
        return {'schema_version': SCHEMA_VERSION, 'kind': 'linear_mdp', **_spec_to_dict(spec)}
    if isinstance(spec, ParallelEnvSet):
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': 'parallel_env_set',
            'agents': spec.agents,
            'flavor': spec.flavor,
            'xi': spec.xi,
            'base_feat_dim': spec.base_feat_dim,
            'contexts': None if spec.contexts is None else spec.contexts.tolist(),
            'context_measures': None if spec.context_measures is None else spec.context_measures.tolist(),
            'specs': [_spec_to_dict(s) for s in spec.specs],
        }
    if isinstance(spec, MmdpSpec):
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': 'mmdp',
            'agent_states': list(spec.agent_states),
            'agent_actions': list(spec.agent_actions),
            'horizon': spec.horizon,
            'reward_feat_dim': spec.reward_feat_dim,
            'trans_feat_dim': spec.trans_feat_dim,
            'reward_features': spec.reward_features.tolist(),
            'common_features': spec.common_features.tolist(),
            'reward_weights': spec.reward_weights.tolist(),
            'measures': spec.measures.tolist(),
        }
    raise InvalidArgumentError(f'Cannot serialize {type(spec).__name__}')


def load_spec(data):
    """
    Inverse of dump_spec.
    """
    version = data.get('schema_version')
    if version != SCHEMA_VERSION:
        raise InvalidArgumentError(f'Unsupported spec schema version {version}')
    kind = data.get('kind')
    if kind == 'linear_mdp':
        return _spec_from_dict(data)
    if kind == 'parallel_env_set':
        specs = tuple(_spec_from_dict(s) for s in data['specs'])
        optional = {name: None if data.get(name) is None else np.asarray(data[name], dtype=float)
                    for name in ('contexts', 'context_measures')}
        return ParallelEnvSet(agents=int(data['agents']), specs=specs, flavor=data['flavor'],
                              xi=float(data['xi']), base_feat_dim=int(data['base_feat_dim']), **optional)
    if kind == 'mmdp':
        return MmdpSpec(
            agent_states=tuple(int(s) for s in data['agent_states']),
            agent_actions=tuple(int(a) for a in data['agent_actions']),
            horizon=int(data['horizon']),
            reward_feat_dim=int(data['reward_feat_dim']),
            trans_feat_dim=int(data['trans_feat_dim']),
            reward_features=np.asarray(data['reward_features'], dtype=float),
            common_features=np.asarray(data['common_features'], dtype=float),
            reward_weights=np.asarray(data['reward_weights'], dtype=float),
            measures=np.asarray(data['measures'], dtype=float),
        )
    raise InvalidArgumentError(f'Unknown spec kind {kind}')
