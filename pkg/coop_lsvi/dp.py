"""
Exact dynamic programming on finite MDPs: optimal values, policy evaluation, scalarized multiagent solutions and
Pareto dominance. These are the ground truth every learner is scored against.
"""
from dataclasses import dataclass

import numpy as np

from coop_lsvi.errors import InvalidArgumentError

SIMPLEX_TOL = 1e-9
PARETO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DpSolution:
    """
    q_star has shape (H, S, A), v_star (H + 1, S) with a zero last row, greedy (H, S).
    """
    q_star: np.ndarray
    v_star: np.ndarray
    greedy: np.ndarray

    @property
    def horizon(self):
        return self.q_star.shape[0]


def backward_induction(transitions, rewards):
    """
    Q_h = r_h + P_h V_{h+1} for h = H-1..0 with V_H = 0. Ties in the greedy table go to the lowest action index.
    :param transitions: Array of shape (H, S, A, S)
    :param rewards: Array of shape (H, S, A)
    """
    horizon, num_states, num_actions = rewards.shape
    q_star = np.zeros((horizon, num_states, num_actions))
    v_star = np.zeros((horizon + 1, num_states))
    for h in reversed(range(horizon)):
        q_star[h] = rewards[h] + transitions[h] @ v_star[h + 1]
        v_star[h] = q_star[h].max(axis=-1)
    return DpSolution(q_star=q_star, v_star=v_star, greedy=np.argmax(q_star, axis=-1))


def exact_q_star(spec):
    return backward_induction(spec.transitions, spec.rewards)


def check_policy(policy, horizon, num_states, num_actions):
    policy = np.asarray(policy)
    if policy.shape != (horizon, num_states):
        raise InvalidArgumentError(f'Policy must have shape {(horizon, num_states)}, got {policy.shape}')
    if policy.size and (policy.min() < 0 or policy.max() >= num_actions):
        raise InvalidArgumentError(f'Policy actions must lie in [0, {num_actions})')
    return policy.astype(int)


def _evaluate(transitions, rewards, policy):
    """
    Backward evaluation of a deterministic policy. rewards may carry a trailing objective axis, in which case the
    returned values carry it too.
    """
    horizon, num_states = policy.shape
    tail = rewards.shape[3:]
    values = np.zeros((horizon + 1, num_states) + tail)
    states = np.arange(num_states)
    for h in reversed(range(horizon)):
        chosen = policy[h]
        values[h] = rewards[h, states, chosen] + np.tensordot(transitions[h, states, chosen], values[h + 1], axes=1)
    return values


def evaluate_policy(spec, policy):
    """
    Exact value of a deterministic policy.
    :param policy: Action table of shape (H, S)
    :return: Values of shape (H + 1, S)
    """
    policy = check_policy(policy, spec.horizon, spec.num_states, spec.num_actions)
    return _evaluate(spec.transitions, spec.rewards, policy)


def check_simplex(upsilon, agents):
    upsilon = np.asarray(upsilon, dtype=float)
    if upsilon.shape != (agents,):
        raise InvalidArgumentError(f'Scalarization must have {agents} entries, got shape {upsilon.shape}')
    if np.any(upsilon < -SIMPLEX_TOL) or abs(upsilon.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidArgumentError(f'Scalarization {upsilon.tolist()} is not on the simplex')
    return upsilon


def exact_scalarized_q_star(mmdp, upsilon):
    """
    Optimal solution of the joint MDP with scalar reward υᵀr_h.
    :param upsilon: Point of the M-simplex
    """
    upsilon = check_simplex(upsilon, mmdp.agents)
    return backward_induction(mmdp.transitions, mmdp.rewards @ upsilon)


def evaluate_joint_policy(mmdp, policy):
    """
    Exact vector value of a deterministic joint policy.
    :param policy: Joint action table of shape (H, S)
    :return: Values of shape (H + 1, S, M)
    """
    policy = check_policy(policy, mmdp.horizon, mmdp.num_states, mmdp.num_actions)
    return _evaluate(mmdp.transitions, mmdp.rewards, policy)


def pareto_dominates(values_a, values_b, tol=PARETO_TOL):
    """
    True when a is at least as good as b for every agent from every start state and strictly better somewhere.
    :param values_a: Start values of shape (S, M)
    :param values_b: Start values of shape (S, M)
    """
    values_a = np.asarray(values_a, dtype=float)
    values_b = np.asarray(values_b, dtype=float)
    return bool(np.all(values_a >= values_b - tol) and np.any(values_a > values_b + tol))
