import itertools

import numpy as np

from coop_lsvi.env import LinearMdpSpec


def make_spec(features, measures, reward_weights):
    """
    LinearMdpSpec from raw arrays, sizes inferred.
    """
    features = np.asarray(features, dtype=float)
    measures = np.asarray(measures, dtype=float)
    reward_weights = np.asarray(reward_weights, dtype=float)
    num_states, num_actions, feat_dim = features.shape
    return LinearMdpSpec(num_states=num_states, num_actions=num_actions, horizon=measures.shape[0],
                         feat_dim=feat_dim, features=features, measures=measures, reward_weights=reward_weights)


def tabular_features(num_states, num_actions):
    """
    One-hot features e_{x·A + a}.
    """
    return np.eye(num_states * num_actions).reshape(num_states, num_actions, num_states * num_actions)


def two_state_chain(horizon):
    """
    Two states, action 0 stays and action 1 switches. Reward 1 in state 1 for either action.
    """
    features = tabular_features(2, 2)
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    measures = np.repeat(rows[None], horizon, axis=0)
    reward_weights = np.repeat(np.array([[0.0, 0.0, 1.0, 1.0]]), horizon, axis=0)
    return make_spec(features, measures, reward_weights)


def enumerate_policies(horizon, num_states, num_actions):
    for actions in itertools.product(range(num_actions), repeat=horizon * num_states):
        yield np.array(actions).reshape(horizon, num_states)


def brute_force_values(transitions, rewards, policy):
    """
    Start values of a deterministic policy by explicit recursion, independent of the DP module. rewards may carry a
    trailing objective axis.
    """
    horizon, num_states = policy.shape

    def value(h, x):
        if h == horizon:
            return np.zeros(rewards.shape[3:])
        a = policy[h, x]
        future = sum(transitions[h, x, a, y] * value(h + 1, y) for y in range(num_states))
        return rewards[h, x, a] + future

    return np.array([value(0, x) for x in range(num_states)])


def brute_force_optimum(transitions, rewards):
    """
    max over all deterministic policies of the start values, per start state.
    """
    horizon, num_states, num_actions = rewards.shape[:3]
    best = np.full(num_states, -np.inf)
    for policy in enumerate_policies(horizon, num_states, num_actions):
        best = np.maximum(best, brute_force_values(transitions, rewards, policy))
    return best


def batch_ridge(features, targets, ridge):
    """
    Normal equations through an explicit inverse: (λI + ΦᵀΦ)⁻¹Φᵀy.
    """
    features = np.asarray(features, dtype=float)
    dim = features.shape[1]
    gram = ridge * np.eye(dim) + features.T @ features
    return np.linalg.inv(gram) @ (features.T @ np.asarray(targets, dtype=float))


def unit_ball_vectors(rng, count, dim):
    """
    Random vectors with norm at most one.
    """
    vectors = rng.normal(size=(count, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors * rng.uniform(0.1, 1.0, size=(count, 1))
