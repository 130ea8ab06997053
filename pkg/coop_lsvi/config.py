import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from coop_lsvi.errors import ConfigError
from coop_lsvi.metrics import mmdp_threshold_for_budget

MODE_HOMOGENEOUS = 'parallel_homogeneous'
MODE_SMALL_DEV = 'parallel_small_dev'
MODE_CONTEXTUAL = 'parallel_contextual'
MODE_MMDP = 'mmdp'
MODES = (MODE_HOMOGENEOUS, MODE_SMALL_DEV, MODE_CONTEXTUAL, MODE_MMDP)

SAMPLER_KEYS = ('mode', 'alpha', 'point', 'atoms', 'weights', 'seed')


def output_root():
    return os.getenv('output_root', './runs')


def _positive_int(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < 1:
        raise ConfigError(path, f'expected a positive integer, got {value!r}')
    return int(value)


def _non_negative_int(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < 0:
        raise ConfigError(path, f'expected a non-negative integer, got {value!r}')
    return int(value)


def _optional_non_negative_int(path, value):
    return None if value is None else _non_negative_int(path, value)


def _positive_float(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(path, f'expected a positive number, got {value!r}')
    return float(value)


def _optional_positive_float(path, value):
    return None if value is None else _positive_float(path, value)


def _deviation(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value < 1.0:
        raise ConfigError(path, f'expected a number in [0, 1), got {value!r}')
    return float(value)


def _threshold(path, value):
    if value in ('always', 'never'):
        return value
    return _positive_float(path, value)


def _flag(path, value):
    if not isinstance(value, bool):
        raise ConfigError(path, f'expected true or false, got {value!r}')
    return value


def _sizes(path, value):
    if isinstance(value, list):
        if not value:
            raise ConfigError(path, 'expected at least one size')
        return [_positive_int(f'{path}[{i}]', v) for i, v in enumerate(value)]
    return _positive_int(path, value)


def _text(path, value):
    if value is not None and not isinstance(value, str):
        raise ConfigError(path, f'expected a string, got {value!r}')
    return value


def _choice(*options):
    def coerce(path, value):
        if value not in options:
            raise ConfigError(path, f'expected one of {list(options)}, got {value!r}')
        return value
    return coerce


def _sampler(path, value):
    if not isinstance(value, dict):
        raise ConfigError(path, f'expected an object, got {value!r}')
    for key in value:
        if key not in SAMPLER_KEYS:
            raise ConfigError(f'{path}.{key}', 'unknown key')
    resolved = dict(value)
    resolved['mode'] = _choice('dirichlet', 'point_mass', 'finite_support')(f'{path}.mode',
                                                                           value.get('mode', 'dirichlet'))
    if 'alpha' in value:
        resolved['alpha'] = _positive_float(f'{path}.alpha', value['alpha'])
    if 'seed' in value:
        resolved['seed'] = _non_negative_int(f'{path}.seed', value['seed'])
    for key in ('point', 'weights'):
        if key in value and not isinstance(value[key], list):
            raise ConfigError(f'{path}.{key}', 'expected a list of numbers')
    if 'atoms' in value and not (isinstance(value['atoms'], list) and all(isinstance(a, list) for a in value['atoms'])):
        raise ConfigError(f'{path}.atoms', 'expected a list of lists')
    if resolved['mode'] == 'point_mass' and 'point' not in value:
        raise ConfigError(f'{path}.point', 'required for the point_mass sampler')
    if resolved['mode'] == 'finite_support' and 'atoms' not in value:
        raise ConfigError(f'{path}.atoms', 'required for the finite_support sampler')
    return resolved


@dataclass
class ExperimentConfig:
    """
    Every user-facing knob of a run. Build it with from_dict, which rejects unknown keys and coerces values; to_dict
    gives the resolved form written next to the run outputs.
    """
    mode: str = MODE_HOMOGENEOUS
    name: str = None
    num_states: int = 5
    num_actions: int = 3
    horizon: int = 3
    feat_dim: int = 5
    agents: int = 3
    episodes: int = 200
    xi: float = 0.0
    context_dim: int = 0
    chi: int = 0
    agent_states: object = 2
    agent_actions: object = 2
    reward_feat_dim: int = 2
    trans_feat_dim: int = 2
    ridge: float = 1.0
    c_beta: float = 0.05
    sync_threshold: object = 5.0
    sync_rounds: float = None
    sampler: dict = field(default_factory=lambda: {'mode': 'dirichlet', 'alpha': 1.0})
    seed: int = 0
    env_seed: int = None
    fixed_start: int = None
    bonus_form: str = 'spectral'
    replica_checks: int = 1
    fully_cooperative: bool = False
    check_invariants: bool = True
    max_joint: int = 4096
    bayes_samples: int = 200
    output_dir: str = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError('<root>', 'expected a JSON object')
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, 'unknown key')
        values = {key: _SCHEMA[key](key, value) for key, value in data.items()}
        if values.get('mode') == MODE_SMALL_DEV and 'xi' not in values:
            raise ConfigError('xi', f'required in {MODE_SMALL_DEV} mode')
        config = cls(**values)
        config.check()
        return config

    def check(self):
        """
        Cross-field constraints.
        """
        if self.mode == MODE_CONTEXTUAL:
            if self.context_dim == 0 and self.chi != 0:
                raise ConfigError('chi', 'must be 0 when context_dim is 0')
            if self.context_dim > 0 and not 1 <= self.chi <= min(self.context_dim, self.agents, self.num_states):
                raise ConfigError('chi', f'must lie in [1, min(context_dim, agents, num_states)], got {self.chi}')
        if self.mode != MODE_MMDP and self.feat_dim > self.num_states * self.num_actions:
            raise ConfigError('feat_dim', 'exceeds the number of state-action pairs')
        if self.fixed_start is not None and self.mode != MODE_MMDP and self.fixed_start >= self.num_states:
            raise ConfigError('fixed_start', f'outside [0, {self.num_states})')
        if self.sync_rounds is not None:
            if self.mode != MODE_MMDP:
                raise ConfigError('sync_rounds', f'only used in {MODE_MMDP} mode')
            # the round budget overrides any explicit threshold
            self.sync_threshold = mmdp_threshold_for_budget(self.d_eff, self.horizon, self.agents, self.episodes,
                                                            self.sync_rounds)
        for key in ('agent_states', 'agent_actions'):
            sizes = getattr(self, key)
            if isinstance(sizes, list) and len(sizes) != self.agents:
                raise ConfigError(key, f'lists {len(sizes)} agents, expected {self.agents}')

    @property
    def d_eff(self):
        if self.mode == MODE_MMDP:
            return self.reward_feat_dim + self.trans_feat_dim
        if self.mode == MODE_CONTEXTUAL:
            return self.feat_dim + self.context_dim
        return self.feat_dim

    @property
    def resolved_env_seed(self):
        return self.seed if self.env_seed is None else self.env_seed

    @property
    def is_parallel(self):
        return self.mode != MODE_MMDP

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_dict(data)

    def digest(self):
        """
        sha256 over the resolved configuration without its output location.
        """
        data = self.to_dict()
        data.pop('output_dir')
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


_SCHEMA = {
    'mode': _choice(*MODES),
    'name': _text,
    'num_states': _positive_int,
    'num_actions': _positive_int,
    'horizon': _positive_int,
    'feat_dim': _positive_int,
    'agents': _positive_int,
    'episodes': _non_negative_int,
    'xi': _deviation,
    'context_dim': _non_negative_int,
    'chi': _non_negative_int,
    'agent_states': _sizes,
    'agent_actions': _sizes,
    'reward_feat_dim': _positive_int,
    'trans_feat_dim': _positive_int,
    'ridge': _positive_float,
    'c_beta': _positive_float,
    'sync_threshold': _threshold,
    'sync_rounds': _optional_positive_float,
    'sampler': _sampler,
    'seed': _non_negative_int,
    'env_seed': _optional_non_negative_int,
    'fixed_start': _optional_non_negative_int,
    'bonus_form': _choice('spectral', 'sqrt_spectral'),
    'replica_checks': _non_negative_int,
    'fully_cooperative': _flag,
    'check_invariants': _flag,
    'max_joint': _positive_int,
    'bayes_samples': _positive_int,
    'output_dir': _text,
}


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data, overrides):
    """
    Applies `--key value` pairs on top of a configuration dictionary. Dotted keys reach into the sampler object and
    values are parsed as JSON when possible.
    :param overrides: Flat list of command line tokens, e.g. ['--horizon', '4', '--sampler.alpha', '0.5']
    :return: A new dictionary
    """
    data = json.loads(json.dumps(data))
    tokens = list(overrides)
    if len(tokens) % 2:
        raise ConfigError(tokens[-1].lstrip('-'), 'missing value')
    for flag, raw in zip(tokens[0::2], tokens[1::2]):
        if not flag.startswith('--'):
            raise ConfigError(flag, 'expected a --key flag')
        path = flag[2:].replace('-', '_')
        value = _parse_value(raw)
        if '.' in path:
            head, key = path.split('.', 1)
            if head != 'sampler':
                raise ConfigError(path, 'unknown key')
            data.setdefault('sampler', {})[key] = value
        else:
            data[path] = value
    return data


def load_config(path=None, overrides=()):
    """
    Reads a JSON configuration file, if given, applies overrides and validates the result.
    """
    data = {}
    if path:
        with open(path, 'r') as config_file:
            try:
                data = json.load(config_file)
            except json.JSONDecodeError as err:
                raise ConfigError('<root>', f'invalid JSON: {err}') from err
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))
