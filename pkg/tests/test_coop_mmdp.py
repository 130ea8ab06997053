import numpy as np

from coop_lsvi.coop_mmdp import (BONUS_SQRT_SPECTRAL, CoopMmdpLearner, JointLearnerState, JointTransition,
                                 ScalarizationSampler, act_joint_greedy, check_replicas, observe_and_check,
                                 plan_scalarized, replica_digest, sample_scalarization, sync_rewards)
from coop_lsvi.env import generate_mmdp
from coop_lsvi.errors import InvalidArgumentError, ProtocolViolationError
from coop_lsvi.learner_base import BETA_MMDP, BetaSchedule, QFunction, SyncPolicy
from tests.helpers import batch_ridge
from unittest.mock import MagicMock
import unittest


class TestScalarizationSampler(unittest.TestCase):

    def test_dirichlet_draws_on_simplex(self):
        sampler = ScalarizationSampler(agents=3, seed=4)
        for t in range(1, 50):
            upsilon = sample_scalarization(sampler, t)
            self.assertEqual(upsilon.shape, (3,))
            self.assertTrue(np.all(upsilon >= 0))
            self.assertAlmostEqual(upsilon.sum(), 1.0, places=12)

    def test_draws_depend_only_on_episode(self):
        sampler = ScalarizationSampler(agents=2, seed=1)
        late = sampler.sample(7)
        for t in range(1, 7):
            sampler.sample(t)
        np.testing.assert_array_equal(sampler.sample(7), late)
        self.assertFalse(np.array_equal(sampler.sample(7), sampler.sample(8)))

    def test_point_mass(self):
        sampler = ScalarizationSampler.from_dict({'mode': 'point_mass', 'point': [0.25, 0.75]}, 2, 0)
        np.testing.assert_array_equal(sampler.sample(3), [0.25, 0.75])

    def test_finite_support(self):
        data = {'mode': 'finite_support', 'atoms': [[1.0, 0.0], [0.0, 1.0]]}
        sampler = ScalarizationSampler.from_dict(data, 2, 5)
        self.assertEqual(sampler.weights, (0.5, 0.5))
        draws = {tuple(sampler.sample(t)) for t in range(1, 40)}
        self.assertEqual(draws, {(1.0, 0.0), (0.0, 1.0)})

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            ScalarizationSampler(agents=2, mode='uniform')
        with self.assertRaises(InvalidArgumentError):
            ScalarizationSampler(agents=2, alpha=0.0)
        with self.assertRaises(InvalidArgumentError):
            ScalarizationSampler(agents=2, mode='point_mass', point=(0.5, 0.6))
        with self.assertRaises(InvalidArgumentError):
            ScalarizationSampler(agents=2, mode='finite_support', atoms=())


class TestJointPrimitives(unittest.TestCase):

    def setUp(self) -> None:
        self.mmdp = generate_mmdp(2, 2, 2, 2, 2, 2, seed=0)
        self.replicas = [JointLearnerState.create(m, self.mmdp.joint_features, 2, 1.0) for m in range(2)]

    def observe_all(self, transition, policy=SyncPolicy('never')):
        rewards = self.mmdp.rewards[transition.h, transition.state, transition.action]
        return [observe_and_check(r, transition.h, transition, rewards[r.replica_id], policy) for r in self.replicas]

    def test_empty_snapshot_plans_on_bonus_only(self):
        upsilon = np.array([0.5, 0.5])
        for q in plan_scalarized(self.replicas[0], upsilon, lambda t: 0.0, 1):
            np.testing.assert_array_equal(q.table, np.zeros((4, 4)))
        for h, q in enumerate(plan_scalarized(self.replicas[0], upsilon, lambda t: 1e6, 1, BONUS_SQRT_SPECTRAL)):
            np.testing.assert_array_equal(q.table, np.full((4, 4), 2.0 - h))

    def test_plan_rejects_bad_inputs(self):
        with self.assertRaises(InvalidArgumentError):
            plan_scalarized(self.replicas[0], [0.5, 0.5], lambda t: 1.0, 1, bonus_form='frobenius')
        with self.assertRaises(InvalidArgumentError):
            plan_scalarized(self.replicas[0], [0.5, 0.6], lambda t: 1.0, 1)

    def test_act_joint_greedy(self):
        self.assertEqual(act_joint_greedy(QFunction(np.zeros((1, 4))), 0, (2, 2)), (0, 0))
        self.assertEqual(act_joint_greedy(QFunction(np.array([[0.0, 0.1, 0.2, 0.3]])), 0, (2, 2)), (1, 1))
        self.assertEqual(act_joint_greedy(QFunction(np.array([[0.0, 0.0, 0.5, 0.5, 0.0, 0.0]])), 0, (2, 3)), (0, 2))
        with self.assertRaises(InvalidArgumentError):
            act_joint_greedy(QFunction(np.zeros((1, 4))), 0, (2, 2), max_joint=3)
        with self.assertRaises(InvalidArgumentError):
            act_joint_greedy(QFunction(np.zeros((1, 3))), 0, (2, 2))

    def test_reward_exchange(self):
        self.observe_all(JointTransition(1, 0, 0, 1, 2))
        self.observe_all(JointTransition(1, 1, 2, 3, 1))
        report = sync_rewards(self.replicas, 1)
        self.assertEqual(report.upload_payload, [2, 2])
        self.assertEqual(report.download_payload, [2, 2])
        first, second = self.replicas
        np.testing.assert_array_equal(first.synced_rewards[0], [self.mmdp.rewards[0, 0, 1]])
        np.testing.assert_array_equal(first.synced_transitions[1], [[2, 3, 1]])
        self.assertEqual(replica_digest(first), replica_digest(second))
        self.assertEqual(first.last_sync, 1)
        self.assertEqual(first.pending_transitions[0], [])

    def test_snapshot_covariance(self):
        self.observe_all(JointTransition(1, 0, 0, 1, 2))
        sync_rewards(self.replicas, 1)
        block = self.mmdp.joint_features[0, 1]
        np.testing.assert_allclose(self.replicas[0].synced_cov[0].matrix, np.eye(4) + block @ block.T)

    def test_missing_reward(self):
        self.observe_all(JointTransition(1, 0, 0, 1, 2))
        self.replicas[1].reward_buffer[0] = []
        with self.assertRaises(ProtocolViolationError):
            sync_rewards(self.replicas, 1)

    def test_diverged_replicas(self):
        self.replicas[1].last_sync = 3
        with self.assertRaises(ProtocolViolationError):
            check_replicas(self.replicas)

    def test_trigger(self):
        flags = self.observe_all(JointTransition(1, 0, 0, 1, 2), SyncPolicy(1.0))
        self.assertEqual(flags, [True, True])
        flags = self.observe_all(JointTransition(1, 1, 0, 1, 2), SyncPolicy(1e6))
        self.assertEqual(flags, [False, False])


class TestUnitFeatureExample(unittest.TestCase):
    """
    One agent, one state, two joint actions with Φ(0, 0) = e1 and Φ(0, 1) = e2, horizon 1.
    """

    def setUp(self) -> None:
        features = np.zeros((1, 2, 2, 1))
        features[0, 0, 0, 0] = 1.0
        features[0, 1, 1, 0] = 1.0
        self.features = features

    def make_replica(self):
        return JointLearnerState.create(0, self.features, 1, 1.0)

    def test_trigger_compares_with_log_threshold(self):
        replica = self.make_replica()
        self.assertTrue(observe_and_check(replica, 0, JointTransition(1, 0, 0, 0, 0), 1.0, SyncPolicy(1.9)))
        replica = self.make_replica()
        self.assertFalse(observe_and_check(replica, 0, JointTransition(1, 0, 0, 0, 0), 1.0, SyncPolicy(2.1)))

    def test_single_reward_gives_half_weight(self):
        replica = self.make_replica()
        observe_and_check(replica, 0, JointTransition(1, 0, 0, 0, 0), 1.0, SyncPolicy(1.9))
        sync_rewards([replica], 1)
        handles = plan_scalarized(replica, [1.0], lambda t: 0.0, 2)
        np.testing.assert_allclose(replica.weights[0], [0.5, 0.0], atol=1e-15)
        self.assertAlmostEqual(handles[0](0, 0), 0.5, places=15)
        self.assertEqual(handles[0](0, 1), 0.0)

    def test_spectral_bonus_of_unvisited_action(self):
        replica = self.make_replica()
        observe_and_check(replica, 0, JointTransition(1, 0, 0, 0, 0), 1.0, SyncPolicy(1.9))
        sync_rewards([replica], 1)
        handles = plan_scalarized(replica, [1.0], lambda t: 0.2, 2)
        self.assertAlmostEqual(handles[0](0, 0), 0.5 + 0.2 * 0.5, places=12)
        self.assertAlmostEqual(handles[0](0, 1), 0.2, places=12)


class TestCoopMmdpLearner(unittest.TestCase):

    def setUp(self) -> None:
        self.mmdp = generate_mmdp([2, 1], [2, 2], 2, 2, 2, 2, seed=3)
        self.beta = BetaSchedule(BETA_MMDP, 0.05, self.mmdp.feat_dim, 2, 2)
        self.sampler = ScalarizationSampler(agents=2, seed=9)

    def make_learner(self, threshold, **kwargs):
        return CoopMmdpLearner(self.mmdp, self.beta, SyncPolicy(threshold), self.sampler, 11, MagicMock(), **kwargs)

    def test_threshold_one_syncs_every_episode(self):
        learner = self.make_learner(1.0)
        results = list(learner.run(10))
        self.assertTrue(all(r.synced for r in results))
        self.assertEqual(learner.replicas[0].synced_transitions[0].shape, (10, 3))
        self.assertFalse(learner.invariant_violations)

    def test_policy_changes_only_after_exchange(self):
        learner = self.make_learner(3.0)
        results = list(learner.run(25))
        for previous, current in zip(results, results[1:]):
            unchanged = current.events[0]['replica_digest'] == previous.events[0]['replica_digest']
            self.assertEqual(unchanged, not previous.synced)

    def test_weights_match_batch_regression(self):
        learner = self.make_learner(2.0)
        list(learner.run(12))
        state = learner.replicas[0]
        upsilon = np.array([0.4, 0.6])
        handles = plan_scalarized(state, upsilon, self.beta, 13)
        for h in range(2):
            next_values = handles[h + 1].values() if h + 1 < 2 else np.zeros(2)
            transitions = state.synced_transitions[h]
            targets = state.synced_rewards[h] + next_values[transitions[:, 2]][:, None]
            columns = np.transpose(state.synced_blocks(h), (0, 2, 1)).reshape(-1, state.dim)
            expected = batch_ridge(columns, targets.reshape(-1), 1.0)
            np.testing.assert_allclose(state.weights[h], expected, atol=1e-8)

    def test_never_exchange_keeps_empty_snapshot(self):
        learner = self.make_learner('never')
        results = list(learner.run(5))
        self.assertFalse(any(r.synced for r in results))
        self.assertEqual(learner.replicas[0].synced_transitions[0].shape, (0, 3))
        self.assertEqual(len(learner.replicas[1].pending_transitions[1]), 5)

    def test_runs_are_deterministic(self):
        first = [r.events for r in self.make_learner(2.0).run(8)]
        second = [r.events for r in self.make_learner(2.0).run(8)]
        self.assertEqual(first, second)

    def test_episode_result(self):
        result = self.make_learner(2.0, fixed_start=1).run_episode(1)
        self.assertEqual(result.start_states, {0: 1})
        self.assertEqual(result.q_tables[0].shape, (2, 2, 4))
        self.assertAlmostEqual(float(result.upsilon.sum()), 1.0, places=12)
        np.testing.assert_array_equal(result.upsilon, self.sampler.sample(1))

    def test_invalid_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            self.make_learner(2.0, fixed_start=2)
        with self.assertRaises(InvalidArgumentError):
            self.make_learner(2.0, max_joint=4)
        with self.assertRaises(InvalidArgumentError):
            CoopMmdpLearner(self.mmdp, self.beta, SyncPolicy(2.0), ScalarizationSampler(agents=3), 0, MagicMock())


if __name__ == "__main__":
    unittest.main()
