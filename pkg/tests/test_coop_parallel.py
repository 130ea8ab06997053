import numpy as np

from coop_lsvi.coop_parallel import (RECORD_SIZE, AgentLearnerState, CoopParallelLearner, TransitionRecord,
                                     act_greedy, observe, plan, plan_contextual, server_sync)
from coop_lsvi.env import build_contextual_set, generate_linear_mdp, homogeneous_set
from coop_lsvi.errors import InvalidArgumentError, ProtocolViolationError
from coop_lsvi.learner_base import (BETA_CONTEXTUAL, BETA_HOMOGENEOUS, BetaSchedule, QFunction, SyncPolicy)
from tests.helpers import batch_ridge, two_state_chain
from unittest.mock import MagicMock
import unittest


def constant_beta(value):
    return lambda t: value


class TestAgentPrimitives(unittest.TestCase):

    def setUp(self) -> None:
        self.spec = generate_linear_mdp(4, 2, 2, 3, 0)
        self.tables = self.spec.features[None]

    def make_agent(self, agent_id=0):
        return AgentLearnerState.create(agent_id, self.tables, self.spec.horizon, 1.0)

    def test_first_transition_below_threshold(self):
        agent = self.make_agent()
        record = TransitionRecord(0, 1, 0, 1, 0, 2, 0.5)
        self.assertFalse(observe(agent, 0, record, SyncPolicy(5.0)))
        self.assertLessEqual(agent.log_det_ratios[0], np.log(2.0) + 1e-12)
        self.assertEqual(agent.outbox[0], [record])

    def test_always_fires(self):
        agent = self.make_agent()
        self.assertTrue(observe(agent, 0, TransitionRecord(0, 1, 0, 1, 0, 2, 0.5), SyncPolicy('always')))

    def test_never_fires(self):
        agent = self.make_agent()
        for t in range(1, 30):
            self.assertFalse(observe(agent, 0, TransitionRecord(0, t, 0, 1, 0, 2, 0.5), SyncPolicy('never')))

    def test_duplicate_transition(self):
        agent = self.make_agent()
        record = TransitionRecord(0, 1, 0, 1, 0, 2, 0.5)
        observe(agent, 0, record, SyncPolicy(5.0))
        with self.assertRaises(ProtocolViolationError):
            observe(agent, 0, record, SyncPolicy(5.0))

    def test_foreign_transition(self):
        agent = self.make_agent()
        with self.assertRaises(InvalidArgumentError):
            observe(agent, 0, TransitionRecord(1, 1, 0, 1, 0, 2, 0.5), SyncPolicy(5.0))
        with self.assertRaises(InvalidArgumentError):
            observe(agent, 1, TransitionRecord(0, 1, 0, 1, 0, 2, 0.5), SyncPolicy(5.0))

    def test_empty_store_plans_on_bonus_only(self):
        agent = self.make_agent()
        for h, q in enumerate(plan(agent, constant_beta(0.0), 1)):
            np.testing.assert_array_equal(q.table, np.zeros((4, 2)))
        for h, q in enumerate(plan(agent, constant_beta(1e6), 1)):
            np.testing.assert_array_equal(q.table, np.full((4, 2), 2.0 - h))

    def test_plan_contextual_needs_contexts(self):
        with self.assertRaises(InvalidArgumentError):
            plan_contextual(self.make_agent(), constant_beta(1.0), 1)

    def test_unit_feature_crosses_half_threshold(self):
        chain = two_state_chain(2)
        agent = AgentLearnerState.create(0, chain.features[None], 2, 1.0)
        self.assertTrue(observe(agent, 0, TransitionRecord(0, 1, 0, 0, 0, 0, 0.0), SyncPolicy(0.5)))
        self.assertAlmostEqual(agent.log_det_ratios[0], np.log(2.0), places=12)
        fresh = AgentLearnerState.create(0, chain.features[None], 2, 1.0)
        self.assertFalse(observe(fresh, 0, TransitionRecord(0, 1, 0, 0, 0, 0, 0.0), SyncPolicy(1.0)))

    def test_single_transition_weights(self):
        agent = AgentLearnerState.create(0, two_state_chain(2).features[None], 2, 1.0)
        observe(agent, 1, TransitionRecord(0, 1, 1, 0, 0, 0, 1.0), SyncPolicy('never'))
        handles = plan(agent, constant_beta(0.0), 2)
        np.testing.assert_allclose(agent.weights[1], [0.5, 0.0, 0.0, 0.0], atol=1e-15)
        np.testing.assert_array_equal(agent.weights[0], np.zeros(4))
        self.assertAlmostEqual(handles[1](0, 0), 0.5, places=15)
        self.assertEqual(handles[1](1, 1), 0.0)

    def test_act_greedy_ties(self):
        self.assertEqual(act_greedy(QFunction(np.zeros((2, 3))), 1), 0)
        self.assertEqual(act_greedy(QFunction(np.array([[0.0, 1.0, 1.0]])), 0), 1)
        with self.assertRaises(InvalidArgumentError):
            act_greedy(QFunction(np.zeros((2, 2, 2))), 0)

    def test_q_function_handle(self):
        q = QFunction(np.array([[0.25, 0.75], [1.0, 0.0]]))
        self.assertEqual(q(0, 1), 0.75)
        np.testing.assert_array_equal(q.values(), [0.75, 1.0])


class TestServerSync(unittest.TestCase):

    def setUp(self) -> None:
        self.spec = generate_linear_mdp(4, 2, 3, 3, 1)
        tables = self.spec.features[None]
        self.agents = [AgentLearnerState.create(m, tables, self.spec.horizon, 1.0) for m in range(2)]
        policy = SyncPolicy(5.0)
        observe(self.agents[0], 0, TransitionRecord(0, 1, 0, 1, 0, 2, 0.5), policy)
        observe(self.agents[1], 0, TransitionRecord(1, 1, 0, 3, 1, 0, 0.25), policy)
        observe(self.agents[1], 1, TransitionRecord(1, 1, 1, 0, 1, 1, 0.75), policy)

    def test_agents_agree_after_sync(self):
        report = server_sync(self.agents, range(3), 1)
        first, second = self.agents
        for h in range(3):
            np.testing.assert_array_equal(first.synced_cov[h].matrix, second.synced_cov[h].matrix)
            self.assertEqual(first.store[h], second.store[h])
            self.assertIs(first.plan_cov[h], first.synced_cov[h])
            self.assertEqual(first.outbox[h], [])
        self.assertEqual([r.agent for r in first.store[0]], [0, 1])
        self.assertEqual(first.last_sync, 1)
        self.assertEqual(report.uploads, [2, 2, 2])
        self.assertEqual(report.upload_payload, [2 * RECORD_SIZE, RECORD_SIZE, 0])
        self.assertEqual(report.download_payload, [4 * RECORD_SIZE, 2 * RECORD_SIZE, 0])
        self.assertEqual(report.total_payload, 9 * RECORD_SIZE)

    def test_synced_covariance_counts_every_transition(self):
        server_sync(self.agents, range(3), 1)
        features = self.agents[0].store_features(0)
        np.testing.assert_allclose(self.agents[0].synced_cov[0].matrix, np.eye(3) + features.T @ features)

    def test_repeated_sync_is_stable(self):
        server_sync(self.agents, range(3), 1)
        before = [cov.matrix.copy() for cov in self.agents[0].synced_cov]
        report = server_sync(self.agents, range(3), 2)
        for h in range(3):
            np.testing.assert_allclose(self.agents[0].synced_cov[h].matrix, before[h])
        self.assertEqual(report.upload_payload, [0, 0, 0])

    def test_inconsistent_ranges(self):
        for steps in ([], [0, 0], [3], [-1]):
            with self.assertRaises(ProtocolViolationError):
                server_sync(self.agents, steps, 1)
        with self.assertRaises(ProtocolViolationError):
            server_sync([], range(3), 1)


class TestCoopParallelLearner(unittest.TestCase):

    def setUp(self) -> None:
        self.env_set = homogeneous_set(generate_linear_mdp(4, 2, 3, 3, 2), 3)
        self.beta = BetaSchedule(BETA_HOMOGENEOUS, 0.1, 3, 3, 3)

    def make_learner(self, threshold, **kwargs):
        return CoopParallelLearner(self.env_set, self.beta, SyncPolicy(threshold), 7, MagicMock(), **kwargs)

    def test_no_episodes(self):
        self.assertEqual(list(self.make_learner(5.0).run(0)), [])

    def test_always_sync_keeps_agents_identical(self):
        learner = self.make_learner('always')
        for result in learner.run(6):
            self.assertTrue(result.synced)
            self.assertEqual(result.report.total_uploads, 3 * 3)
            reference = learner.agents[0]
            for agent in learner.agents[1:]:
                for h in range(3):
                    np.testing.assert_array_equal(agent.plan_cov[h].matrix, reference.plan_cov[h].matrix)
                    self.assertEqual(len(agent.store[h]), 3 * result.episode)

    def test_never_sync_matches_isolated_agent(self):
        shared = [r for r in self.make_learner('never').run(8)]
        isolated = [r for r in self.make_learner('never', agent_ids=[1]).run(8)]
        for together, alone in zip(shared, isolated):
            self.assertFalse(together.synced)
            self.assertIsNone(together.report)
            np.testing.assert_allclose(together.q_tables[1], alone.q_tables[1])
            self.assertEqual(together.events[1]['actions_digest'], alone.events[0]['actions_digest'])

    def test_runs_are_deterministic(self):
        first = [r.events for r in self.make_learner(2.0).run(10)]
        second = [r.events for r in self.make_learner(2.0).run(10)]
        self.assertEqual(first, second)

    def test_threshold_run_keeps_invariants(self):
        learner = self.make_learner(2.0)
        results = list(learner.run(20))
        self.assertFalse(learner.invariant_violations)
        self.assertTrue(any(r.synced for r in results))
        for result in results:
            for m, table in result.q_tables.items():
                self.assertEqual(table.shape, (3, 4, 2))
                for h in range(3):
                    self.assertTrue(np.all(table[h] <= 3 - h))
                np.testing.assert_array_equal(result.policies[m], table.argmax(axis=-1))

    def test_weights_match_batch_regression(self):
        learner = self.make_learner(2.0)
        list(learner.run(10))
        for agent in learner.agents:
            handles = plan(agent, self.beta, 11)
            for h in range(3):
                next_values = handles[h + 1].values() if h + 1 < 3 else np.zeros(4)
                targets = [r.reward + next_values[r.next_state] for r in agent.store[h]]
                expected = batch_ridge(agent.store_features(h), targets, 1.0)
                np.testing.assert_allclose(agent.weights[h], expected, atol=1e-8)

    def test_fixed_start(self):
        learner = self.make_learner(5.0, fixed_start=2)
        result = learner.run_episode(1)
        self.assertEqual(result.start_states, {0: 2, 1: 2, 2: 2})

    def test_invalid_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            self.make_learner(5.0, agent_ids=[3])
        with self.assertRaises(InvalidArgumentError):
            self.make_learner(5.0, fixed_start=4)
        with self.assertRaises(InvalidArgumentError):
            self.make_learner(5.0, ridge=0.0)


class TestContextualLearner(unittest.TestCase):

    def setUp(self) -> None:
        self.env_set = build_contextual_set(4, 2, 2, 2, 2, 3, 2, seed=0)
        self.beta = BetaSchedule(BETA_CONTEXTUAL, 0.1, 4, 2, 3)

    def test_shapes(self):
        learner = CoopParallelLearner(self.env_set, self.beta, SyncPolicy(3.0), 1, MagicMock())
        self.assertEqual(learner.d_eff, 4)
        for result in learner.run(5):
            for table in result.q_tables.values():
                self.assertEqual(table.shape, (2, 4, 2))
        tables = plan_contextual(learner.agents[0], self.beta, 6)
        self.assertEqual(tables[0].table.shape, (3, 4, 2))
        self.assertEqual(tables[0].context(1).table.shape, (4, 2))
        self.assertFalse(learner.invariant_violations)

    def test_own_slice(self):
        learner = CoopParallelLearner(self.env_set, self.beta, SyncPolicy('always'), 1, MagicMock())
        list(learner.run(3))
        agent = learner.agents[2]
        full = plan_contextual(agent, self.beta, 4)
        own = plan(agent, self.beta, 4)
        for h in range(2):
            np.testing.assert_array_equal(own[h].table, full[h].table[2])

    def test_weights_match_batch_regression(self):
        learner = CoopParallelLearner(self.env_set, self.beta, SyncPolicy(3.0), 1, MagicMock())
        list(learner.run(8))
        for agent in learner.agents:
            handles = plan_contextual(agent, self.beta, 9)
            for h in range(2):
                next_values = handles[h + 1].values() if h + 1 < 2 else np.zeros((3, 4))
                targets = [r.reward + next_values[r.agent, r.next_state] for r in agent.store[h]]
                features = agent.store_features(h)
                self.assertEqual(features.shape[1], 4)
                expected = batch_ridge(features, targets, 1.0)
                np.testing.assert_allclose(agent.weights[h], expected, atol=1e-8)

    def test_empty_context_reduces_to_plain_agent(self):
        env_set = build_contextual_set(4, 2, 2, 3, 0, 3, 0, seed=0)
        contextual = AgentLearnerState.create(0, np.stack([s.features for s in env_set.specs]), 2, 1.0,
                                              contextual=True)
        plain = AgentLearnerState.create(0, env_set.base_features[None], 2, 1.0)
        for t in range(1, 7):
            for h in range(2):
                record = TransitionRecord(0, t, h, (t + h) % 4, t % 2, (3 * t + h) % 4, 0.1 * t)
                self.assertEqual(observe(contextual, h, record, SyncPolicy(2.0)),
                                 observe(plain, h, record, SyncPolicy(2.0)))
        beta = constant_beta(0.3)
        for with_context, without in zip(plan(contextual, beta, 7), plan(plain, beta, 7)):
            np.testing.assert_allclose(with_context.table, without.table, atol=1e-12)
        for h in range(2):
            np.testing.assert_allclose(contextual.weights[h], plain.weights[h], atol=1e-12)

    def test_equal_contexts_give_equal_q(self):
        env_set = build_contextual_set(3, 2, 2, 2, 2, 3, 1, seed=0)
        learner = CoopParallelLearner(env_set, self.beta, SyncPolicy('always'), 2, MagicMock())
        list(learner.run(4))
        for agent in learner.agents:
            for handle in plan_contextual(agent, self.beta, 5):
                for n in range(1, 3):
                    np.testing.assert_allclose(handle.table[n], handle.table[0], atol=1e-12)


class TestBetaAndSyncPolicy(unittest.TestCase):

    def test_beta_grows(self):
        beta = BetaSchedule(BETA_HOMOGENEOUS, 1.0, 3, 2, 2)
        self.assertLess(beta(1), beta(100))
        self.assertAlmostEqual(beta(1), 2 * np.sqrt(3 * np.log1p(4)), places=12)

    def test_small_deviation_offset(self):
        plain = BetaSchedule(BETA_HOMOGENEOUS, 1.0, 3, 2, 2, episodes=50)
        deviated = BetaSchedule('small_deviation', 1.0, 3, 2, 2, episodes=50, xi=0.1)
        self.assertAlmostEqual(deviated(5) - plain(5), 0.1 * np.sqrt(3 * 2 * 50), places=12)

    def test_radius_scale_applies_to_deviation_term(self):
        plain = BetaSchedule(BETA_HOMOGENEOUS, 0.05, 3, 2, 2, episodes=50)
        deviated = BetaSchedule('small_deviation', 0.05, 3, 2, 2, episodes=50, xi=0.1)
        self.assertAlmostEqual(plain(5), 0.05 * 2 * np.sqrt(3 * np.log1p(20)), places=12)
        self.assertAlmostEqual(deviated(5) - plain(5), 0.05 * 0.1 * np.sqrt(3 * 2 * 50), places=12)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            BetaSchedule('unknown', 1.0, 3, 2, 2)
        with self.assertRaises(InvalidArgumentError):
            BetaSchedule(BETA_HOMOGENEOUS, 0.0, 3, 2, 2)
        with self.assertRaises(InvalidArgumentError):
            SyncPolicy('sometimes')
        with self.assertRaises(InvalidArgumentError):
            SyncPolicy(0.0)

    def test_parallel_trigger(self):
        policy = SyncPolicy(4.0)
        self.assertFalse(policy.parallel_fires(1.0, 4))
        self.assertTrue(policy.parallel_fires(1.01, 4))
        self.assertTrue(policy.parallel_fires(4.5, 0))

    def test_joint_trigger(self):
        self.assertTrue(SyncPolicy(1.0).joint_fires(0.0))
        self.assertTrue(SyncPolicy(np.e).joint_fires(1.01))
        self.assertFalse(SyncPolicy(np.e).joint_fires(0.99))


if __name__ == "__main__":
    unittest.main()
