from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from coop_lsvi.errors import InvalidArgumentError

SYNC_ALWAYS = 'always'
SYNC_NEVER = 'never'

BETA_HOMOGENEOUS = 'homogeneous'
BETA_SMALL_DEVIATION = 'small_deviation'
BETA_CONTEXTUAL = 'contextual'
BETA_MMDP = 'mmdp'


@dataclass(frozen=True)
class BetaSchedule:
    """
    Exploration radius β(t) = c_β·(H·sqrt(d_eff·ln(1 + tMH)) + ξ·sqrt(d_eff·M·T)), the ξ term only in the
    small deviation mode.
    """
    mode: str
    c_beta: float
    d_eff: int
    horizon: int
    agents: int
    episodes: int = 0
    xi: float = 0.0

    def __post_init__(self):
        if self.mode not in (BETA_HOMOGENEOUS, BETA_SMALL_DEVIATION, BETA_CONTEXTUAL, BETA_MMDP):
            raise InvalidArgumentError(f'Unknown beta mode {self.mode}')
        if not self.c_beta > 0:
            raise InvalidArgumentError(f'c_beta must be positive, got {self.c_beta}')
        if self.xi < 0:
            raise InvalidArgumentError(f'xi must be non-negative, got {self.xi}')

    def __call__(self, t):
        t = max(int(t), 1)
        value = self.horizon * np.sqrt(self.d_eff * np.log1p(t * self.agents * self.horizon))
        if self.mode == BETA_SMALL_DEVIATION:
            value += self.xi * np.sqrt(self.d_eff * self.agents * max(self.episodes, 1))
        return float(self.c_beta * value)


@dataclass(frozen=True)
class SyncPolicy:
    """
    Determinant trigger threshold S, or one of the sentinels 'always' and 'never'.
    """
    threshold: object

    def __post_init__(self):
        if isinstance(self.threshold, str):
            if self.threshold not in (SYNC_ALWAYS, SYNC_NEVER):
                raise InvalidArgumentError(f'Unknown sync sentinel {self.threshold}')
        elif not float(self.threshold) > 0:
            raise InvalidArgumentError(f'Sync threshold must be positive, got {self.threshold}')

    @property
    def always(self):
        return self.threshold == SYNC_ALWAYS

    @property
    def never(self):
        return self.threshold == SYNC_NEVER

    def parallel_fires(self, log_ratio, episodes_since_sync):
        """
        ln det ratio > S / max(Δt, 1)
        """
        if self.always:
            return True
        if self.never:
            return False
        return log_ratio > float(self.threshold) / max(episodes_since_sync, 1)

    def joint_fires(self, log_ratio):
        """
        ln det ratio >= ln S; a threshold at or below 1 fires every time.
        """
        if self.always:
            return True
        if self.never:
            return False
        threshold = float(self.threshold)
        return threshold <= 1.0 or log_ratio >= np.log(threshold)


@dataclass
class SyncReport:
    """
    Messages and scalar payloads exchanged in one synchronization round, per step h.
    """
    episode: int
    uploads: list
    downloads: list
    upload_payload: list
    download_payload: list

    @property
    def total_uploads(self):
        return int(sum(self.uploads))

    @property
    def total_downloads(self):
        return int(sum(self.downloads))

    @property
    def total_payload(self):
        return int(sum(self.upload_payload) + sum(self.download_payload))


@dataclass(frozen=True, eq=False)
class QFunction:
    """
    Read-only Q table. Indexed as q(x, a), or q(n, x, a) when the table carries a leading context axis.
    """
    table: np.ndarray

    def __call__(self, *index):
        return float(self.table[index])

    def values(self):
        return self.table.max(axis=-1)

    def context(self, n):
        return QFunction(self.table[n])


@dataclass
class EpisodeResult:
    """
    Everything the ledgers need from one episode. q_tables and policies map an agent id (0 for the joint learner)
    to its acting tables of shape (H, S, A) and (H, S).
    """
    episode: int
    start_states: dict
    q_tables: dict
    policies: dict
    synced: bool = False
    report: SyncReport = None
    log_det_ratios: list = None
    upsilon: np.ndarray = None
    events: list = field(default_factory=list)


class CoopLearnerBase(ABC):
    """
    Base class for cooperative LSVI learners
    """

    def __init__(self, horizon, ridge, beta, sync_policy, seed, logger, check_invariants=True):
        if not ridge > 0:
            raise InvalidArgumentError(f'Ridge must be positive, got {ridge}')
        self.horizon = int(horizon)
        self.ridge = float(ridge)
        self.beta = beta
        self.sync_policy = sync_policy
        self.seed = int(seed)
        self.logger = logger
        self.check_invariants = check_invariants
        self.invariant_violations = Counter()
        super().__init__()

    def clip(self, q, h):
        """
        Clips Q values of step h to [0, H - h].
        """
        return np.clip(q, 0.0, float(self.horizon - h))

    def record_violation(self, kind, message):
        self.invariant_violations[kind] += 1
        self.logger.error(f'Invariant violation ({kind}): {message}')

    def check_weight_bound(self, weights, bound, t, label):
        norm = float(np.linalg.norm(weights))
        if norm > bound:
            self.record_violation('weight_norm', f'{label} at episode {t}: ‖w‖ = {norm:.6g} > {bound:.6g}')

    def check_covariance(self, cov, reference, label):
        """
        Compares an incrementally maintained covariance against one assembled from scratch.
        """
        scale = max(1.0, float(np.max(np.abs(reference.matrix))))
        if np.max(np.abs(cov.matrix - reference.matrix)) > 1e-9 * scale or \
                abs(cov.log_det - reference.log_det) > 1e-9 * max(1.0, abs(reference.log_det)):
            self.record_violation('covariance_drift', label)

    def run(self, episodes):
        """
        Generator over the results of episodes 1..T.
        """
        for t in range(1, int(episodes) + 1):
            yield self.run_episode(t)

    @abstractmethod
    def run_episode(self, t):
        raise NotImplementedError
