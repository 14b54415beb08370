"""
Experiment configuration.

Experiments are YAML files under config/experiments/. A file may name a
parent with `extends: <name or path>`; the child is deep-merged over the
parent. validate_config turns the merged mapping into typed settings and
reports every violation with its field path.
"""

import copy
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .attack import CORNERS, BackdoorKey
from .defense_matching import MatchingConfig
from .errors import AttackError, ConfigError, DefenseError, SpecError
from .federation import FederationConfig
from .meta_reptile import FineTuneConfig, ReptileConfig
from .nn_core import NetworkSpec

logger = logging.getLogger(__name__)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_EXPERIMENTS_DIR = os.path.join(PROJECT_ROOT, 'config', 'experiments')

MODES = ('meta_training', 'fine_tuning')
SCENARIOS = ('absent', 'in_pretraining', 'in_pretraining_and_finetuning')
DEFENSES = ('none', 'supervised', 'supervised+noisy', 'matching')

PAPER_SCALE = {
    'network': {'filters': 64},
    'reptile': {'episodes': 1000},
    'attack': {'episodes': 50000, 'inner_steps': 50, 'inner_unit': 'epochs'},
    'evaluation': {'episodes': 40, 'meta_test_episodes': 40, 'meta_test_steps': 50},
    'meta_training': {'rounds': 50},
}


def experiments_dir() -> str:
    return os.getenv('FEDMETA_EXPERIMENTS_DIR', DEFAULT_EXPERIMENTS_DIR)


def list_experiments(directory: Optional[str] = None) -> List[str]:
    directory = directory or experiments_dir()
    names = [f[:-5] for f in os.listdir(directory) if f.endswith('.yaml')]
    return sorted(n for n in names if n != 'base')


def deep_merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_path(name_or_path: str, relative_to: Optional[str] = None) -> str:
    """A file path, or the built-in experiment of that name."""
    candidates = [name_or_path]
    if relative_to:
        candidates.append(os.path.join(relative_to, name_or_path))
        candidates.append(os.path.join(relative_to, name_or_path + '.yaml'))
    candidates.append(os.path.join(experiments_dir(), name_or_path + '.yaml'))
    for candidate in candidates:
        if os.path.isfile(candidate):
            return candidate
    raise ConfigError([('extends' if relative_to else 'config', f'no experiment named {name_or_path!r}')])


def load_raw_config(name_or_path: str, _seen: Tuple[str, ...] = (), relative_to: Optional[str] = None) -> Dict:
    """Read a YAML experiment and fold in its `extends` chain."""
    path = os.path.abspath(resolve_path(name_or_path, relative_to))
    if path in _seen:
        raise ConfigError([('extends', f'cycle through {os.path.basename(path)}')])
    try:
        with open(path, 'r') as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError([('config', f'cannot parse {path}: {e}')]) from None
    if not isinstance(raw, dict):
        raise ConfigError([('config', f'{path} does not hold a mapping')])
    parent = raw.pop('extends', None)
    name = raw.get('name') or os.path.splitext(os.path.basename(path))[0]
    if parent:
        base = load_raw_config(parent, _seen + (path,), os.path.dirname(path))
        raw = deep_merge(base, raw)
    raw['name'] = name
    return raw


def apply_overrides(raw: Dict, seed: Optional[int] = None, out_dir: Optional[str] = None,
                    paper_scale: bool = False) -> Dict:
    """CLI flags over environment over file values."""
    resolved = copy.deepcopy(raw)
    if paper_scale:
        resolved = deep_merge(resolved, PAPER_SCALE)
        resolved['profile'] = 'paper'
    if os.getenv('FEDMETA_SEED'):
        resolved['seed'] = int(os.getenv('FEDMETA_SEED'))
    if os.getenv('FEDMETA_OUT_DIR'):
        resolved['output_dir'] = os.getenv('FEDMETA_OUT_DIR')
    if seed is not None:
        resolved['seed'] = seed
    if out_dir is not None:
        resolved['output_dir'] = out_dir
    return resolved


@dataclass
class DatasetSettings:
    kind: str = 'synthetic'
    path: Optional[str] = None
    meta_train_classes: int = 64
    meta_test_classes: int = 12
    backdoor_classes: int = 4
    target_classes: int = 1
    examples_per_class: int = 20
    image_size: int = 16
    jitter: float = 0.04
    rotate: bool = False
    holdout: int = 0
    sharding: str = 'disjoint'
    benign_per_class: int = 10
    attack_per_class: int = 5


@dataclass
class PretrainingSettings:
    max_rounds: int = 40
    patience: int = 5
    min_delta: float = 0.005


@dataclass
class AttackSettings:
    enabled: bool = True
    attacker_id: int = 3
    boost: float = 3.0
    ratio: Tuple[int, int] = (2, 3)
    episodes: int = 500
    inner_steps: int = 5
    inner_unit: str = 'epochs'
    key: Dict[str, Any] = field(default_factory=lambda: {'size': 3, 'value': 255, 'corner': 'bottom_right', 'margin': 1})


@dataclass
class FineTuningSettings:
    steps: int = 50
    batch_size: int = 10
    learning_rate: float = 0.001
    optimizer: str = 'adam'
    extra_local_episodes: int = 0

    def finetune(self) -> FineTuneConfig:
        return FineTuneConfig(self.steps, self.batch_size, self.learning_rate, self.optimizer)


@dataclass
class EvaluationSettings:
    ways: int = 5
    shots: int = 5
    episodes: int = 10
    meta_test_episodes: int = 10
    meta_test_steps: int = 50


@dataclass
class DefenseSettings:
    mode: str = 'none'
    mix: float = 0.3
    stage1_iterations: int = 20
    learning_rate: float = 0.001
    head_learning_rate: Optional[float] = None


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    mode: str
    scenario: str
    output_dir: str
    profile: str
    dataset: DatasetSettings
    network: NetworkSpec
    federation: FederationConfig
    reptile: ReptileConfig
    pretraining: PretrainingSettings
    attack: AttackSettings
    meta_training_rounds: int
    fine_tuning: FineTuningSettings
    evaluation: EvaluationSettings
    defense: DefenseSettings

    def matching(self) -> MatchingConfig:
        return MatchingConfig(
            mix=self.defense.mix,
            stage1_iterations=min(self.defense.stage1_iterations, self.fine_tuning.steps),
            stage2_iterations=max(self.fine_tuning.steps - self.defense.stage1_iterations, 0),
            learning_rate=self.defense.learning_rate,
            head_learning_rate=self.defense.head_learning_rate,
            optimizer=self.fine_tuning.optimizer,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['meta_training'] = {'rounds': data.pop('meta_training_rounds')}
        data['network'] = {
            'input_shape': list(self.network.input_shape), 'modules': self.network.modules,
            'filters': self.network.filters, 'kernel_size': self.network.kernel_size,
            'pool': self.network.pool, 'ways': self.network.ways,
        }
        data['attack']['ratio'] = list(self.attack.ratio)
        return data


class _Reader:
    """Typed field access that records violations instead of raising."""

    def __init__(self, raw: Dict):
        self.raw = raw
        self.violations: List[Tuple[str, str]] = []

    def section(self, name: str) -> Dict:
        """The mapping at a dotted path; {} when absent or malformed."""
        value = self.raw
        for part in name.split('.'):
            value = value.get(part, {}) if isinstance(value, dict) else {}
        if value is None:
            return {}
        if not isinstance(value, dict):
            if (name, 'must be a mapping') not in self.violations:
                self.violations.append((name, 'must be a mapping'))
            return {}
        return value

    def get(self, section: Optional[str], key: str, kind, default, minimum=None, maximum=None, choices=None,
            required: bool = False):
        source = self.raw if section is None else self.section(section)
        path = key if section is None else f'{section}.{key}'
        if key not in source or source[key] is None:
            if required:
                self.violations.append((path, 'is required'))
            return default
        value = source[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool) or not isinstance(value, kind):
            self.violations.append((path, f'expected {kind.__name__}, got {type(value).__name__}'))
            return default
        if choices is not None and value not in choices:
            self.violations.append((path, f'{value!r} is not one of {list(choices)}'))
            return default
        if minimum is not None and value < minimum:
            self.violations.append((path, f'{value} is below the minimum {minimum}'))
        if maximum is not None and value > maximum:
            self.violations.append((path, f'{value} is above the maximum {maximum}'))
        return value

    def build(self, path: str, factory, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (TypeError, ValueError, SpecError, AttackError, DefenseError) as e:
            self.violations.append((path, str(e)))
            return None


def read_key(r: _Reader) -> Dict[str, Any]:
    if 'pixels' in r.section('attack.key'):
        pixels = r.get('attack.key', 'pixels', list, [])
        if not all(isinstance(p, list) and len(p) == 3 and all(isinstance(x, int) and not isinstance(x, bool)
                                                               for x in p) for p in pixels):
            r.violations.append(('attack.key.pixels', 'expected [row, col, value] integer triples'))
            return {'size': 3, 'value': 255, 'corner': 'bottom_right', 'margin': 1}
        return {'pixels': pixels}
    return {
        'size': r.get('attack.key', 'size', int, 3, minimum=1),
        'value': r.get('attack.key', 'value', int, 255, minimum=0, maximum=255),
        'corner': r.get('attack.key', 'corner', str, 'bottom_right', choices=CORNERS),
        'margin': r.get('attack.key', 'margin', int, 1, minimum=0),
    }


def validate_config(raw: Dict) -> ExperimentConfig:
    """Resolve defaults, check every field and cross-field rule, raise ConfigError listing all violations."""
    if not isinstance(raw, dict):
        raise ConfigError([('config', 'must be a mapping')])
    r = _Reader(raw)

    if 'dataset' not in raw or not raw.get('dataset'):
        r.violations.append(('dataset', 'dataset section is missing'))
    d = DatasetSettings(
        kind=r.get('dataset', 'kind', str, 'synthetic', choices=('synthetic', 'packed')),
        path=r.get('dataset', 'path', str, None),
        meta_train_classes=r.get('dataset', 'meta_train_classes', int, 64, minimum=1),
        meta_test_classes=r.get('dataset', 'meta_test_classes', int, 12, minimum=1),
        backdoor_classes=r.get('dataset', 'backdoor_classes', int, 4, minimum=1),
        target_classes=r.get('dataset', 'target_classes', int, 1, minimum=1, maximum=1),
        examples_per_class=r.get('dataset', 'examples_per_class', int, 20, minimum=2),
        image_size=r.get('dataset', 'image_size', int, 16, minimum=8),
        jitter=r.get('dataset', 'jitter', float, 0.04, minimum=0.0, maximum=0.5),
        rotate=r.get('dataset', 'rotate', bool, False),
        holdout=r.get('dataset', 'holdout', int, 0, minimum=0),
        sharding=r.get('dataset', 'sharding', str, 'disjoint', choices=('disjoint', 'overlapping')),
        benign_per_class=r.get('dataset', 'benign_per_class', int, 10, minimum=1),
        attack_per_class=r.get('dataset', 'attack_per_class', int, 5, minimum=1),
    )
    if d.kind == 'packed' and not d.path:
        r.violations.append(('dataset.path', 'packed datasets need a path'))
    if d.examples_per_class <= d.benign_per_class + d.attack_per_class:
        r.violations.append(('dataset.examples_per_class',
                             'must exceed benign_per_class + attack_per_class to leave attack-validation examples'))

    ways = r.get('reptile', 'ways', int, 5, minimum=1)
    network = r.build('network', NetworkSpec,
                      input_shape=(d.image_size, d.image_size, 1),
                      modules=r.get('network', 'modules', int, 4, minimum=0),
                      filters=r.get('network', 'filters', int, 32, minimum=1),
                      kernel_size=r.get('network', 'kernel_size', int, 3, minimum=1),
                      pool=r.get('network', 'pool', int, 2, minimum=1),
                      head='classifier', ways=ways)

    weights = r.get('federation', 'weights', list, None)
    if weights and any(isinstance(w, bool) or not isinstance(w, (int, float)) for w in weights):
        r.violations.append(('federation.weights', f'{weights!r} is not a list of numbers'))
        weights = None
    federation = FederationConfig(
        users=r.get('federation', 'users', int, 4, minimum=1),
        selected=r.get('federation', 'selected', int, 3, minimum=1),
        quorum=r.get('federation', 'quorum', int, 3, minimum=1),
        weighting=r.get('federation', 'weighting', str, 'uniform'),
        weights=[float(w) for w in weights] if weights else None,
    )
    if d.sharding == 'disjoint' and d.meta_train_classes // max(federation.users, 1) + d.target_classes < ways:
        r.violations.append(('dataset.meta_train_classes',
                             f'every user needs at least {ways} classes for {ways}-way episodes'))
    reptile = r.build('reptile', ReptileConfig,
                      episodes=r.get('reptile', 'episodes', int, 50, minimum=0),
                      meta_batch=r.get('reptile', 'meta_batch', int, 5, minimum=1),
                      inner_steps=r.get('reptile', 'inner_steps', int, 10, minimum=0),
                      inner_unit=r.get('reptile', 'inner_unit', str, 'steps', choices=('steps', 'epochs')),
                      inner_batch=r.get('reptile', 'inner_batch', int, 10, minimum=1),
                      inner_lr=r.get('reptile', 'inner_lr', float, 0.001, minimum=0.0),
                      outer_lr=r.get('reptile', 'outer_lr', float, 0.1, minimum=0.0, maximum=1.0),
                      shots=r.get('reptile', 'shots', int, 10, minimum=1),
                      ways=ways,
                      optimizer=r.get('reptile', 'optimizer', str, 'adam', choices=('adam', 'sgd')))

    pretraining = PretrainingSettings(
        max_rounds=r.get('pretraining', 'max_rounds', int, 40, minimum=0),
        patience=r.get('pretraining', 'patience', int, 5, minimum=1),
        min_delta=r.get('pretraining', 'min_delta', float, 0.005, minimum=0.0),
    )

    ratio = r.get('attack', 'ratio', list, [2, 3])
    attack = AttackSettings(
        enabled=r.get('attack', 'enabled', bool, True),
        attacker_id=r.get('attack', 'attacker_id', int, 3, minimum=0),
        boost=r.get('attack', 'boost', float, 3.0),
        ratio=tuple(ratio),
        episodes=r.get('attack', 'episodes', int, 500, minimum=0),
        inner_steps=r.get('attack', 'inner_steps', int, 5, minimum=0),
        inner_unit=r.get('attack', 'inner_unit', str, 'epochs', choices=('steps', 'epochs')),
        key=read_key(r),
    )
    if attack.boost <= 0:
        r.violations.append(('attack.boost', 'boosting factor must be positive'))
    if len(attack.ratio) != 2 or any(not isinstance(p, int) or p < 0 for p in attack.ratio) or sum(attack.ratio) == 0:
        r.violations.append(('attack.ratio', f'{list(attack.ratio)} is not a backdoor:target pair of non-negative ints'))
    r.build('attack.key', BackdoorKey.from_config, attack.key, d.image_size)
    if attack.enabled:
        if d.backdoor_classes < 1 and attack.ratio and attack.ratio[0]:
            r.violations.append(('dataset.backdoor_classes', 'an attack with a backdoor share needs backdoor classes'))
        federation.attacker_id = attack.attacker_id
        federation.attack_round = -1  # scheduled by the runner once pre-training plateaus
    for path, message in federation.violations():
        r.violations.append((f'federation.{path}', message))

    fine_tuning = FineTuningSettings(
        steps=r.get('fine_tuning', 'steps', int, 50, minimum=0),
        batch_size=r.get('fine_tuning', 'batch_size', int, 10, minimum=1),
        learning_rate=r.get('fine_tuning', 'learning_rate', float, 0.001, minimum=0.0),
        optimizer=r.get('fine_tuning', 'optimizer', str, 'adam', choices=('adam', 'sgd')),
        extra_local_episodes=r.get('fine_tuning', 'extra_local_episodes', int, 0, minimum=0),
    )
    evaluation = EvaluationSettings(
        ways=r.get('evaluation', 'ways', int, 5, minimum=2),
        shots=r.get('evaluation', 'shots', int, 5, minimum=1),
        episodes=r.get('evaluation', 'episodes', int, 10, minimum=1),
        meta_test_episodes=r.get('evaluation', 'meta_test_episodes', int, 10, minimum=1),
        meta_test_steps=r.get('evaluation', 'meta_test_steps', int, 50, minimum=0),
    )
    if network is not None and evaluation.ways != network.ways:
        r.violations.append(('evaluation.ways', f'must equal reptile.ways={network.ways} (shared classifier head)'))
    if evaluation.ways > d.meta_test_classes:
        r.violations.append(('evaluation.ways', f'{evaluation.ways}-way meta-testing needs that many meta-test classes'))
    if evaluation.shots + 1 > d.examples_per_class:
        r.violations.append(('evaluation.shots', 'K + 1 examples per class are needed for meta-testing'))

    defense = DefenseSettings(
        mode=r.get('defense', 'mode', str, 'none', choices=DEFENSES),
        mix=r.get('defense', 'mix', float, 0.3, minimum=0.0, maximum=1.0),
        stage1_iterations=r.get('defense', 'stage1_iterations', int, 20, minimum=0),
        learning_rate=r.get('defense', 'learning_rate', float, 0.001, minimum=0.0),
        head_learning_rate=r.get('defense', 'head_learning_rate', float, None, minimum=0.0),
    )
    mode = r.get(None, 'mode', str, 'meta_training', choices=MODES)
    scenario = r.get(None, 'scenario', str, 'in_pretraining', choices=SCENARIOS)
    if defense.mode == 'matching' and evaluation.shots < 2:
        r.violations.append(('defense.mode', 'matching defense needs at least 2 shots to hold one out per class'))
    if defense.mode != 'none' and mode != 'fine_tuning':
        r.violations.append(('defense.mode', 'defenses apply to fine_tuning mode only'))
    if scenario == 'in_pretraining_and_finetuning' and evaluation.ways < 3:
        r.violations.append(('scenario', 'a benign backdoor slot needs at least 3-way evaluation episodes'))
    if d.meta_train_classes < ways:
        r.violations.append(('dataset.meta_train_classes', f'{ways}-way episodes need at least {ways} classes'))

    meta_training_rounds = r.get('meta_training', 'rounds', int, 20, minimum=0)
    seed = r.get(None, 'seed', int, 1)
    name = r.get(None, 'name', str, 'experiment')
    output_dir = r.get(None, 'output_dir', str, 'runs')
    profile = r.get(None, 'profile', str, 'desk', choices=('desk', 'paper'))

    if r.violations:
        raise ConfigError(r.violations)
    return ExperimentConfig(
        name=name, seed=seed, mode=mode, scenario=scenario, output_dir=output_dir, profile=profile,
        dataset=d, network=network, federation=federation, reptile=reptile, pretraining=pretraining,
        attack=attack, meta_training_rounds=meta_training_rounds, fine_tuning=fine_tuning,
        evaluation=evaluation, defense=defense,
    )


def load_config(name_or_path: str, seed: Optional[int] = None, out_dir: Optional[str] = None,
                paper_scale: bool = False) -> ExperimentConfig:
    raw = apply_overrides(load_raw_config(name_or_path), seed, out_dir, paper_scale)
    return validate_config(raw)
