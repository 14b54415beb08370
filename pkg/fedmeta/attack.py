"""
One-shot backdoor attack: key stamping, poisoned episodes and the boosted
attacker client.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .episodes import (
    ClassData,
    Dataset,
    Episode,
    EpisodeConstraints,
    Role,
    as_float,
    assemble_episode,
    choose_classes,
    draw_examples,
    slot_part,
)
from .errors import AttackError
from .federation import ClientUpdate, Message, compute_delta, scale_boost
from .meta_reptile import ReptileConfig, local_meta_train
from .nn_core import NetworkSpec, ParamVector

logger = logging.getLogger(__name__)

CORNERS = ('top_left', 'top_right', 'bottom_left', 'bottom_right')


@dataclass(frozen=True)
class BackdoorKey:
    """Pixel pattern: (row, col, value) triples, value written to every channel."""
    pixels: Tuple[Tuple[int, int, int], ...]

    def __post_init__(self):
        pixels = tuple((int(r), int(c), int(v)) for r, c, v in self.pixels)
        if not pixels:
            raise AttackError("backdoor key mask is empty")
        if any(r < 0 or c < 0 for r, c, _ in pixels):
            raise AttackError("backdoor key coordinates must be non-negative")
        if any(not 0 <= v <= 255 for _, _, v in pixels):
            raise AttackError("backdoor key values must be in [0, 255]")
        object.__setattr__(self, 'pixels', pixels)

    @classmethod
    def square(cls, size: int = 3, value: int = 255, corner: str = 'bottom_right', margin: int = 1,
               image_size: int = 16) -> 'BackdoorKey':
        if size < 1:
            raise AttackError("backdoor key size must be >= 1")
        if corner not in CORNERS:
            raise AttackError(f"unknown corner {corner!r}")
        top = margin if corner.startswith('top') else image_size - margin - size
        left = margin if corner.endswith('left') else image_size - margin - size
        if top < 0 or left < 0:
            raise AttackError(f"a {size}px key with margin {margin} does not fit a {image_size}px image")
        return cls(tuple((top + r, left + c, value) for r in range(size) for c in range(size)))

    @classmethod
    def from_config(cls, mapping: Mapping, image_size: int) -> 'BackdoorKey':
        if 'pixels' in mapping:
            return cls(tuple(tuple(p) for p in mapping['pixels']))
        return cls.square(
            size=mapping.get('size', 3),
            value=mapping.get('value', 255),
            corner=mapping.get('corner', 'bottom_right'),
            margin=mapping.get('margin', 1),
            image_size=image_size,
        )

    def check_fits(self, height: int, width: int):
        for r, c, _ in self.pixels:
            if r >= height or c >= width:
                raise AttackError(f"key pixel ({r}, {c}) outside a {height}x{width} image")

    def to_config(self) -> Dict:
        return {'pixels': [list(p) for p in self.pixels]}


def stamp_key(image: np.ndarray, key: BackdoorKey) -> np.ndarray:
    """Copy of an (H, W, C) image or (n, H, W, C) stack with the key written in."""
    image = np.asarray(image)
    height, width = image.shape[-3], image.shape[-2]
    key.check_fits(height, width)
    stamped = image.copy()
    rows = np.array([p[0] for p in key.pixels])
    cols = np.array([p[1] for p in key.pixels])
    values = np.array([p[2] for p in key.pixels], dtype=image.dtype)
    if image.dtype.kind == 'f':
        values = np.array([p[2] / 255.0 for p in key.pixels], dtype=image.dtype)
    stamped[..., rows, cols, :] = values[:, None]
    return stamped


@dataclass
class AttackConfig:
    backdoor_classes: Tuple[int, ...]
    target_class: int
    key: BackdoorKey
    boost: float = 3.0
    ratio: Tuple[int, int] = (2, 3)
    episodes: int = 500
    inner_steps: int = 5
    inner_unit: str = 'epochs'

    def __post_init__(self):
        self.backdoor_classes = tuple(int(c) for c in self.backdoor_classes)
        self.ratio = tuple(int(p) for p in self.ratio)
        if self.boost <= 0:
            raise AttackError("boosting factor must be positive")
        if len(self.ratio) != 2 or min(self.ratio) < 0 or sum(self.ratio) == 0:
            raise AttackError(f"backdoor:target ratio {self.ratio} is invalid")
        if self.target_class in self.backdoor_classes:
            raise AttackError("target class cannot also be a backdoor class")
        if self.ratio[0] and not self.backdoor_classes:
            raise AttackError("a nonzero backdoor share needs backdoor classes")

    def backdoor_count(self, shots: int) -> int:
        """Stamped examples in the target slot, rounded half up."""
        b, t = self.ratio
        return int(np.floor(shots * b / (b + t) + 0.5))

    def reptile(self, base: ReptileConfig) -> ReptileConfig:
        return replace(base, episodes=self.episodes, inner_steps=self.inner_steps, inner_unit=self.inner_unit)


@dataclass
class AttackData:
    """Per-class split of the backdoor and target classes.

    benign: examples benign users may hold. attacker: the attacker's dataset
    (stamped backdoor examples, clean target examples, its ordinary shard).
    attack_train / attack_validation: stamped examples per backdoor class,
    used by the attacker / never seen in training.
    """
    benign: Dataset
    attacker: Dataset
    attack_train: Dict[int, Tuple[np.ndarray, np.ndarray]]
    attack_validation: Dict[int, Tuple[np.ndarray, np.ndarray]]
    clean: Dataset

    def stamped(self, split: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(float images, example ids, origin classes) for attack_train or attack_validation."""
        pools = {'attack_train': self.attack_train, 'attack_validation': self.attack_validation}[split]
        images, ids, origin = [], [], []
        for c, (imgs, idx) in sorted(pools.items()):
            images.append(as_float(imgs))
            ids.append(idx)
            origin.append(np.full(len(idx), c, dtype=np.int64))
        return np.concatenate(images), np.concatenate(ids), np.concatenate(origin)


def prepare_attack_data(dataset: Dataset, atk: AttackConfig, attacker_shard: Optional[Dataset] = None,
                        benign_per_class: int = 10, attack_per_class: int = 5) -> AttackData:
    """Stamp the backdoor classes once and hand out the pieces.

    Per class, in example-id order: the first `benign_per_class` examples are
    benign, the next `attack_per_class` are attack examples, the rest are held
    out. Target attack examples stay clean and go to the attacker with the
    benign target examples; held-out target examples stay for evaluation.
    """
    for c in atk.backdoor_classes + (atk.target_class,):
        if c not in dataset.classes:
            raise AttackError(f"class {c} is not in the dataset")
    height, width, _ = dataset.image_shape
    atk.key.check_fits(height, width)

    benign_classes, attacker_classes = {}, {}
    attack_train, attack_validation = {}, {}
    for c in atk.backdoor_classes + (atk.target_class,):
        data = dataset.classes[c]
        if len(data) <= benign_per_class + attack_per_class:
            raise AttackError(
                f"class {c} has {len(data)} examples, needs more than {benign_per_class + attack_per_class}")
        order = np.argsort(data.ids, kind='stable')
        benign, attack, held = np.split(order, [benign_per_class, benign_per_class + attack_per_class])
        if c == atk.target_class:
            benign_classes[c] = ClassData(data.images[np.concatenate([benign, held])],
                                          data.ids[np.concatenate([benign, held])],
                                          np.zeros(len(benign) + len(held), dtype=bool))
            pool = np.concatenate([benign, attack])
            attacker_classes[c] = ClassData(data.images[pool], data.ids[pool], np.zeros(len(pool), dtype=bool))
        else:
            benign_classes[c] = ClassData(data.images[benign], data.ids[benign], np.zeros(len(benign), dtype=bool))
            stamped_attack = stamp_key(data.images[attack], atk.key)
            attack_train[c] = (stamped_attack, data.ids[attack])
            attack_validation[c] = (stamp_key(data.images[held], atk.key), data.ids[held])
            attacker_classes[c] = ClassData(stamped_attack, data.ids[attack], np.zeros(len(attack), dtype=bool))

    roles = {c: Role.BACKDOOR for c in atk.backdoor_classes}
    roles[atk.target_class] = Role.TARGET
    attacker = Dataset(attacker_classes, roles)
    if attacker_shard is not None:
        attacker = attacker_shard.subset([c for c in attacker_shard.class_ids() if c not in roles]).merge(attacker)
    logger.info(f"Prepared attack data: {len(attack_train)} backdoor classes, target class {atk.target_class}")
    return AttackData(Dataset(benign_classes, roles), attacker, attack_train, attack_validation, dataset)


def build_poisoned_episode(dataset: Dataset, atk: AttackConfig, ways: int, shots: int, seed: int) -> Episode:
    """Meta-training episode whose last slot is the target class.

    The target slot mixes stamped backdoor examples (poison flag set, labelled
    as the target slot) with clean target examples in the configured ratio.
    `dataset` must already carry stamped backdoor images.
    """
    rng = np.random.default_rng(seed)
    constraints = EpisodeConstraints(roles=(Role.ORDINARY,), query_per_class=0,
                                     support_split='all', query_split='all')
    classes = _poisoned_slots(dataset, atk, ways, shots, constraints, rng)
    support = []
    for slot, c in enumerate(classes[:-1]):
        (images, ids), _ = draw_examples(dataset, c, shots, 0, constraints, rng)
        support.append(slot_part(images, ids, slot, c))

    target_slot = ways - 1
    n_backdoor = atk.backdoor_count(shots)
    n_target = shots - n_backdoor
    if n_backdoor:
        pool = [(c, i) for c in atk.backdoor_classes if c in dataset.classes
                for i in range(len(dataset.classes[c]))]
        if len(pool) < n_backdoor:
            raise AttackError(f"{len(pool)} backdoor examples available, target slot needs {n_backdoor}")
        for pick in sorted(rng.choice(len(pool), size=n_backdoor, replace=False)):
            c, i = pool[pick]
            data = dataset.classes[c]
            support.append(slot_part(data.images[i:i + 1], data.ids[i:i + 1], target_slot, c, poison=True))
    target = dataset.classes[atk.target_class]
    if len(target) < n_target:
        raise AttackError(f"{len(target)} target examples available, target slot needs {n_target}")
    picks = rng.permutation(len(target))[:n_target]
    support.append(slot_part(target.images[picks], target.ids[picks], target_slot, atk.target_class))
    return assemble_episode(classes, support, [], dataset.image_shape)


def _poisoned_slots(dataset: Dataset, atk: AttackConfig, ways: int, shots: int,
                    constraints: EpisodeConstraints, rng: np.random.Generator) -> List[int]:
    if atk.target_class not in dataset.classes:
        raise AttackError(f"target class {atk.target_class} is not in the attacker's dataset")
    others = replace(constraints, exclude=tuple(atk.backdoor_classes) + (atk.target_class,))
    return choose_classes(dataset, ways - 1, shots, others, rng) + [atk.target_class]


def restore_episode(episode: Episode, clean: Dataset) -> Episode:
    """Undo poisoning: clean pixels for stamped examples, labels back to their
    own class (appended as new slots when absent)."""
    classes = list(episode.classes)

    def restore(x, y, ids, origin, poison):
        x, y = x.copy(), y.copy()
        for n in np.flatnonzero(poison):
            c = int(origin[n])
            if c not in classes:
                classes.append(c)
            x[n] = as_float(clean.lookup(c, [ids[n]]))[0]
            y[n] = classes.index(c)
        return x, y

    s_x, s_y = restore(episode.support_x, episode.support_y, episode.support_ids,
                       episode.support_origin, episode.support_poison)
    q_x, q_y = restore(episode.query_x, episode.query_y, episode.query_ids,
                       episode.query_origin, episode.query_poison)
    return replace(
        episode, classes=tuple(classes),
        support_x=s_x, support_y=s_y, support_poison=np.zeros_like(episode.support_poison),
        query_x=q_x, query_y=q_y, query_poison=np.zeros_like(episode.query_poison),
    )


def attacker_local_train(theta_global: ParamVector, dataset: Dataset, atk: AttackConfig, cfg: ReptileConfig,
                         spec: NetworkSpec, seed: int, client_id: int = 0, round_index: int = 0) -> ClientUpdate:
    """Local Reptile over poisoned episodes, returned as boost * (theta_a - theta_G)."""
    attack_cfg = atk.reptile(cfg)

    def source(index: int, episode_seed: int) -> Episode:
        return build_poisoned_episode(dataset, atk, cfg.ways, cfg.shots, episode_seed)

    theta_a = local_meta_train(theta_global, None, attack_cfg, spec, seed, episode_source=source)
    delta = scale_boost(compute_delta(theta_a, theta_global), atk.boost)
    logger.info(f"Attacker {client_id} trained {attack_cfg.episodes} poisoned episodes, boosted norm {delta.norm():.4f}")
    size = sum(len(d) for d in dataset.classes.values())
    return ClientUpdate(client_id, round_index, delta, size)


class AttackerClient:
    """A client whose episodes are poisoned and whose update is boosted."""

    def __init__(self, client_id: int, dataset: Dataset, atk: AttackConfig, cfg: ReptileConfig, spec: NetworkSpec):
        self.client_id = client_id
        self.dataset = dataset
        self.atk = atk
        self.cfg = cfg
        self.spec = spec

    def local_update(self, broadcast: Message, seed: int) -> ClientUpdate:
        return attacker_local_train(broadcast.payload, self.dataset, self.atk, self.cfg, self.spec, seed,
                                    self.client_id, broadcast.round_index)
