"""
Datasets and N-way K-shot episode sampling.

A Dataset maps class ids to uint8 image stacks (n, H, W, C) with stable
example ids, a per-example validation flag and one role tag per class.
Episodes carry float images scaled to [0, 1], slot labels and the poison
annotations used by the attack and evaluation code.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .binio import ByteReader
from .errors import CorruptHeaderError, DatasetError, EpisodeError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'FMD1'
SPLITS = ('train', 'validation', 'all')
MIN_PROTOTYPE_DISTANCE = 0.15


class Role(IntEnum):
    ORDINARY = 0
    BACKDOOR = 1
    TARGET = 2
    META_TEST = 3


@dataclass(frozen=True)
class ClassData:
    images: np.ndarray
    ids: np.ndarray
    validation: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.uint8)
        ids = np.asarray(self.ids, dtype=np.int64)
        validation = np.asarray(self.validation, dtype=bool)
        if images.ndim != 4:
            raise DatasetError(f"class images must be (n, H, W, C), got shape {images.shape}")
        if not (len(images) == len(ids) == len(validation)):
            raise DatasetError("images, ids and validation flags differ in length")
        for array in (images, ids, validation):
            array.setflags(write=False)
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'ids', ids)
        object.__setattr__(self, 'validation', validation)

    def __len__(self) -> int:
        return len(self.ids)

    def mask(self, split: str) -> np.ndarray:
        if split == 'train':
            return ~self.validation
        if split == 'validation':
            return self.validation.copy()
        if split == 'all':
            return np.ones(len(self), dtype=bool)
        raise ValueError(f"unknown split {split!r}")


@dataclass(frozen=True)
class Dataset:
    """Immutable class-indexed image collection."""
    classes: Mapping[int, ClassData]
    roles: Mapping[int, Role] = field(default_factory=dict)
    prototypes: Optional[Mapping[int, np.ndarray]] = None

    def __post_init__(self):
        classes = {int(c): data for c, data in sorted(self.classes.items())}
        roles = {c: Role(self.roles.get(c, Role.ORDINARY)) for c in classes}
        unknown = set(self.roles) - set(classes)
        if unknown:
            raise DatasetError(f"roles given for unknown classes {sorted(unknown)}")
        shapes = {data.images.shape[1:] for data in classes.values() if len(data)}
        if len(shapes) > 1:
            raise DatasetError(f"classes have different image shapes: {sorted(shapes)}")
        object.__setattr__(self, 'classes', classes)
        object.__setattr__(self, 'roles', roles)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        for data in self.classes.values():
            if len(data):
                return tuple(int(d) for d in data.images.shape[1:])
        raise DatasetError("dataset has no examples")

    def class_ids(self, roles: Optional[Iterable[Role]] = None) -> List[int]:
        if roles is None:
            return list(self.classes)
        wanted = set(roles)
        return [c for c in self.classes if self.roles[c] in wanted]

    def role(self, class_id: int) -> Role:
        return self.roles[class_id]

    def count(self, class_id: int, split: str = 'all') -> int:
        return int(self.classes[class_id].mask(split).sum())

    def examples(self, class_id: int, split: str = 'all') -> Tuple[np.ndarray, np.ndarray]:
        """(images, ids) of one class restricted to a split."""
        if class_id not in self.classes:
            raise DatasetError(f"class {class_id} not in dataset")
        data = self.classes[class_id]
        mask = data.mask(split)
        return data.images[mask], data.ids[mask]

    def lookup(self, class_id: int, example_ids: Sequence[int]) -> np.ndarray:
        """Images of the given example ids, in the order requested."""
        data = self.classes[class_id]
        position = {int(i): n for n, i in enumerate(data.ids)}
        try:
            return data.images[[position[int(i)] for i in example_ids]]
        except KeyError as e:
            raise DatasetError(f"example {e.args[0]} not in class {class_id}") from None

    def subset(self, class_ids: Optional[Iterable[int]] = None,
               keep: Optional[Mapping[int, Iterable[int]]] = None) -> 'Dataset':
        """Restrict to some classes and, per class, to some example ids."""
        chosen = list(self.classes) if class_ids is None else list(class_ids)
        classes = {}
        for c in chosen:
            data = self.classes[c]
            if keep is not None and c in keep:
                mask = np.isin(data.ids, np.fromiter(keep[c], dtype=np.int64))
                data = ClassData(data.images[mask], data.ids[mask], data.validation[mask])
            classes[c] = data
        protos = None if self.prototypes is None else {
            c: p for c, p in self.prototypes.items() if c in classes}
        return Dataset(classes, {c: self.roles[c] for c in classes}, protos)

    def with_roles(self, roles: Mapping[int, Role]) -> 'Dataset':
        merged = dict(self.roles)
        merged.update(roles)
        return replace(self, roles=merged)

    def with_class(self, class_id: int, data: ClassData) -> 'Dataset':
        classes = dict(self.classes)
        classes[class_id] = data
        return replace(self, classes=classes)

    def merge(self, other: 'Dataset') -> 'Dataset':
        overlap = set(self.classes) & set(other.classes)
        if overlap:
            raise DatasetError(f"cannot merge datasets sharing classes {sorted(overlap)}")
        protos = None
        if self.prototypes is not None or other.prototypes is not None:
            protos = dict(self.prototypes or {})
            protos.update(other.prototypes or {})
        return Dataset({**self.classes, **other.classes}, {**self.roles, **other.roles}, protos)


def as_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


def assign_roles(dataset: Dataset, backdoor: int, target: int, meta_test: int, seed: int) -> Dataset:
    """Tag randomly chosen classes as backdoor, target and meta-test; the rest are ordinary."""
    needed = backdoor + target + meta_test
    classes = dataset.class_ids()
    if needed > len(classes):
        raise DatasetError(f"{needed} role-tagged classes requested from {len(classes)}")
    order = np.random.default_rng(seed).permutation(classes)
    roles = {int(c): Role.ORDINARY for c in classes}
    for c in order[:backdoor]:
        roles[int(c)] = Role.BACKDOOR
    for c in order[backdoor:backdoor + target]:
        roles[int(c)] = Role.TARGET
    for c in order[backdoor + target:needed]:
        roles[int(c)] = Role.META_TEST
    return dataset.with_roles(roles)


def split_validation(dataset: Dataset, holdout: int) -> Dataset:
    """Mark the last `holdout` examples of every class as validation."""
    if holdout < 0:
        raise DatasetError("holdout must be >= 0")
    classes = {}
    for c, data in dataset.classes.items():
        if holdout >= len(data) and holdout > 0:
            raise DatasetError(f"class {c} has {len(data)} examples, cannot hold out {holdout}")
        flags = np.zeros(len(data), dtype=bool)
        if holdout:
            flags[-holdout:] = True
        classes[c] = ClassData(data.images, data.ids, flags)
    return replace(dataset, classes=classes)


@dataclass(frozen=True)
class EpisodeConstraints:
    """Which classes and examples an episode may draw from."""
    roles: Tuple[Role, ...] = (Role.ORDINARY,)
    required_class: Optional[int] = None
    required_slot: int = -1
    support_split: str = 'train'
    query_split: str = 'train'
    query_per_class: int = 1
    exclude: Tuple[int, ...] = ()

    def __post_init__(self):
        for split in (self.support_split, self.query_split):
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
        if self.query_per_class < 0:
            raise ValueError("query_per_class must be >= 0")


META_TRAIN = EpisodeConstraints(query_per_class=0)


@dataclass
class Episode:
    """N class slots with support and query examples.

    `*_origin` holds the dataset class an example was drawn from; it equals
    the slot's class for every benign example.
    """
    classes: Tuple[int, ...]
    support_x: np.ndarray
    support_y: np.ndarray
    support_ids: np.ndarray
    support_origin: np.ndarray
    support_poison: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    query_ids: np.ndarray
    query_origin: np.ndarray
    query_poison: np.ndarray

    @property
    def ways(self) -> int:
        return len(self.classes)

    @property
    def shots(self) -> int:
        return len(self.support_y) // max(self.ways, 1)

    def slot_of(self, class_id: int) -> int:
        try:
            return self.classes.index(class_id)
        except ValueError:
            raise EpisodeError(f"class {class_id} is not a slot of this episode") from None

    def is_benign(self) -> bool:
        slots = np.asarray(self.classes, dtype=np.int64)
        return bool(
            not self.support_poison.any() and not self.query_poison.any()
            and np.array_equal(slots[self.support_y], self.support_origin)
            and np.array_equal(slots[self.query_y], self.query_origin))


def _empty_part(shape: Tuple[int, ...]) -> Dict[str, np.ndarray]:
    return {
        'x': np.zeros((0,) + tuple(shape), dtype=np.float32),
        'y': np.zeros(0, dtype=np.int64),
        'ids': np.zeros(0, dtype=np.int64),
        'origin': np.zeros(0, dtype=np.int64),
        'poison': np.zeros(0, dtype=bool),
    }


def assemble_episode(classes: Sequence[int], support: Sequence[Dict], query: Sequence[Dict],
                     image_shape: Tuple[int, ...]) -> Episode:
    """Concatenate per-slot parts (dicts with x, y, ids, origin, poison) into an Episode."""
    def stack(parts):
        parts = list(parts) or [_empty_part(image_shape)]
        return {key: np.concatenate([np.asarray(p[key]) for p in parts]) for key in parts[0]}

    s, q = stack(support), stack(query)
    return Episode(
        classes=tuple(int(c) for c in classes),
        support_x=s['x'].astype(np.float32), support_y=s['y'].astype(np.int64),
        support_ids=s['ids'].astype(np.int64), support_origin=s['origin'].astype(np.int64),
        support_poison=s['poison'].astype(bool),
        query_x=q['x'].astype(np.float32), query_y=q['y'].astype(np.int64),
        query_ids=q['ids'].astype(np.int64), query_origin=q['origin'].astype(np.int64),
        query_poison=q['poison'].astype(bool),
    )


def slot_part(images: np.ndarray, ids: np.ndarray, slot: int, origin: int, poison: bool = False) -> Dict:
    n = len(ids)
    return {
        'x': as_float(images),
        'y': np.full(n, slot, dtype=np.int64),
        'ids': np.asarray(ids, dtype=np.int64),
        'origin': np.full(n, origin, dtype=np.int64),
        'poison': np.full(n, poison, dtype=bool),
    }


def draw_examples(dataset: Dataset, class_id: int, support: int, query: int,
                  constraints: EpisodeConstraints, rng: np.random.Generator):
    """Disjoint support and query draws from one class."""
    if constraints.support_split == constraints.query_split:
        images, ids = dataset.examples(class_id, constraints.support_split)
        if len(ids) < support + query:
            raise EpisodeError(
                f"class {class_id} has {len(ids)} examples, episode needs {support + query}")
        order = rng.permutation(len(ids))
        s, q = order[:support], order[support:support + query]
        return (images[s], ids[s]), (images[q], ids[q])

    s_images, s_ids = dataset.examples(class_id, constraints.support_split)
    q_images, q_ids = dataset.examples(class_id, constraints.query_split)
    if constraints.support_split == 'all' or constraints.query_split == 'all':
        # 'all' overlaps every other split; keep the draws apart by id
        raise EpisodeError("support and query splits overlap")
    if len(s_ids) < support or len(q_ids) < query:
        raise EpisodeError(f"class {class_id} lacks examples for the requested splits")
    s = rng.permutation(len(s_ids))[:support]
    q = rng.permutation(len(q_ids))[:query]
    return (s_images[s], s_ids[s]), (q_images[q], q_ids[q])


def choose_classes(dataset: Dataset, ways: int, needed: int, constraints: EpisodeConstraints,
                   rng: np.random.Generator) -> List[int]:
    """Slot order for an episode, the required class placed at its slot."""
    if ways < 1:
        raise EpisodeError("an episode needs at least one way")
    required = constraints.required_class
    if required is not None and required not in dataset.classes:
        raise EpisodeError(f"required class {required} is not in the dataset")

    def enough(c):
        if constraints.support_split == constraints.query_split:
            return dataset.count(c, constraints.support_split) >= needed
        return (dataset.count(c, constraints.support_split) >= needed - constraints.query_per_class
                and dataset.count(c, constraints.query_split) >= constraints.query_per_class)

    eligible = [c for c in dataset.class_ids(constraints.roles)
                if c != required and c not in constraints.exclude and enough(c)]
    others = ways - (1 if required is not None else 0)
    if len(eligible) < others:
        raise EpisodeError(f"{len(eligible)} eligible classes, episode needs {others}")
    chosen = [int(c) for c in rng.choice(eligible, size=others, replace=False)]
    if required is not None:
        slot = constraints.required_slot % ways
        chosen.insert(slot, int(required))
    return chosen


def sample_episode(dataset: Dataset, ways: int, shots: int, seed: int,
                   constraints: Optional[EpisodeConstraints] = None) -> Episode:
    """Sample an N-way K-shot episode; identical for identical seeds."""
    constraints = constraints or EpisodeConstraints()
    if shots < 1:
        raise EpisodeError("an episode needs at least one shot")
    rng = np.random.default_rng(seed)
    query = constraints.query_per_class
    classes = choose_classes(dataset, ways, shots + query, constraints, rng)
    support_parts, query_parts = [], []
    for slot, c in enumerate(classes):
        (s_img, s_ids), (q_img, q_ids) = draw_examples(dataset, c, shots, query, constraints, rng)
        support_parts.append(slot_part(s_img, s_ids, slot, c))
        if query:
            query_parts.append(slot_part(q_img, q_ids, slot, c))
    return assemble_episode(classes, support_parts, query_parts, dataset.image_shape)


def rotate_image(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate an (H, W, C) or (n, H, W, C) array counter-clockwise by 90° steps."""
    axes = (0, 1) if image.ndim == 3 else (1, 2)
    return np.rot90(image, k=quarter_turns % 4, axes=axes).copy()


def rotate_augment(dataset: Dataset) -> Dataset:
    """Four classes per class (0°, 90°, 180°, 270°).

    Class c becomes 4c + r and example i becomes 4i + r. Backdoor and
    target tags stay on the unrotated copy; meta-test tags follow every copy.
    """
    height, width, _ = dataset.image_shape
    if height != width:
        raise DatasetError(f"rotation needs square images, got {height}x{width}")
    classes, roles, protos = {}, {}, {}
    for c, data in dataset.classes.items():
        role = dataset.role(c)
        for r in range(4):
            new_id = 4 * c + r
            classes[new_id] = ClassData(rotate_image(data.images, r), data.ids * 4 + r, data.validation)
            if r == 0 or role == Role.META_TEST:
                roles[new_id] = role
            else:
                roles[new_id] = Role.ORDINARY
            if dataset.prototypes is not None and c in dataset.prototypes:
                protos[new_id] = rotate_image(dataset.prototypes[c], r)
    return Dataset(classes, roles, protos if dataset.prototypes is not None else None)


def _draw_glyph(size: int, rng: np.random.Generator) -> np.ndarray:
    glyph = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(3, 6))):
        start, end = rng.integers(0, size, size=(2, 2))
        steps = int(np.abs(end - start).max()) + 1
        rows = np.rint(np.linspace(start[0], end[0], steps)).astype(int)
        cols = np.rint(np.linspace(start[1], end[1], steps)).astype(int)
        glyph[rows, cols] = True
    return glyph


def make_synthetic_dataset(num_classes: int, examples_per_class: int, image_size: int = 16,
                           seed: int = 0, jitter: float = 0.04, channels: int = 1,
                           max_attempts: int = 1000) -> Dataset:
    """Random-stroke glyph classes, pairwise >= 15% of pixels apart.

    Examples are the class prototype with a fraction `jitter` of pixels flipped.
    """
    if image_size < 8:
        raise DatasetError("synthetic images must be at least 8x8")
    if num_classes < 1 or examples_per_class < 1:
        raise DatasetError("synthetic dataset needs at least one class and one example")
    rng = np.random.default_rng(seed)
    pixels = image_size * image_size
    min_distance = MIN_PROTOTYPE_DISTANCE * pixels
    prototypes: List[np.ndarray] = []
    attempts = 0
    while len(prototypes) < num_classes:
        attempts += 1
        if attempts > max_attempts * num_classes:
            raise DatasetError(f"could not place {num_classes} distinct glyphs at size {image_size}")
        glyph = _draw_glyph(image_size, rng)
        if all(np.count_nonzero(glyph != p) >= min_distance for p in prototypes):
            prototypes.append(glyph)

    classes, protos = {}, {}
    next_id = 0
    for c, glyph in enumerate(prototypes):
        flips = rng.random((examples_per_class, image_size, image_size)) < jitter
        examples = np.logical_xor(glyph[None], flips)
        images = np.repeat((examples * 255).astype(np.uint8)[..., None], channels, axis=-1)
        ids = np.arange(next_id, next_id + examples_per_class)
        next_id += examples_per_class
        classes[c] = ClassData(images, ids, np.zeros(examples_per_class, dtype=bool))
        protos[c] = np.repeat((glyph * 255).astype(np.uint8)[..., None], channels, axis=-1)
    logger.debug(f"Generated {num_classes} synthetic glyph classes in {attempts} attempts")
    return Dataset(classes, {}, protos)


def prototype_distances(dataset: Dataset) -> np.ndarray:
    """Pairwise Hamming distances (fraction of pixels) between class prototypes."""
    if dataset.prototypes is None:
        raise DatasetError("dataset carries no prototypes")
    keys = sorted(dataset.prototypes)
    flat = np.stack([dataset.prototypes[c].reshape(-1) > 127 for c in keys])
    return (flat[:, None, :] != flat[None, :, :]).mean(axis=-1)


def nearest_prototype_accuracy(dataset: Dataset) -> float:
    """Accuracy of assigning every example to its closest prototype."""
    if dataset.prototypes is None:
        raise DatasetError("dataset carries no prototypes")
    keys = sorted(dataset.prototypes)
    protos = np.stack([dataset.prototypes[c].reshape(-1).astype(np.int16) for c in keys])
    correct = total = 0
    for c, data in dataset.classes.items():
        flat = data.images.reshape(len(data), -1).astype(np.int16)
        distances = np.abs(flat[:, None, :] - protos[None, :, :]).sum(axis=-1)
        predicted = np.asarray(keys)[distances.argmin(axis=1)]
        correct += int((predicted == c).sum())
        total += len(data)
    return correct / total


def encode_packed_dataset(dataset: Dataset) -> bytes:
    """FMD1 bytes. Classes are written in id order and only non-ordinary classes get a role tag."""
    parts = [DATASET_MAGIC, struct.pack('<I', len(dataset))]
    for c, data in dataset.classes.items():
        n, height, width, channels = data.images.shape
        parts.append(struct.pack('<IHHB', n, height, width, channels))
        parts.append(np.ascontiguousarray(data.images).tobytes())
    tags = [(index, dataset.role(c)) for index, c in enumerate(dataset.classes) if dataset.role(c) != Role.ORDINARY]
    parts.append(struct.pack('<I', len(tags)))
    for index, role in tags:
        parts.append(struct.pack('<IB', index, int(role)))
    return b''.join(parts)


def decode_packed_dataset(data: bytes, holdout: int = 0) -> Dataset:
    """Dataset from FMD1 bytes.

    The file stores no class ids: class i is the i-th block, so a dataset
    saved with other ids comes back numbered 0..count-1. Untagged classes
    are ordinary.
    """
    reader = ByteReader(data, 'dataset')
    if reader.take(4) != DATASET_MAGIC:
        raise CorruptHeaderError("dataset magic is not FMD1")
    count = reader.unpack('I')
    if count == 0:
        raise DatasetError("empty dataset")
    classes = {}
    next_id = 0
    for index in range(count):
        n, height, width, channels = reader.unpack('IHHB')
        if min(height, width, channels) == 0:
            raise CorruptHeaderError(f"class {index} declares an empty image shape")
        images = np.frombuffer(reader.take(n * height * width * channels), dtype=np.uint8)
        images = images.reshape(n, height, width, channels)
        classes[index] = ClassData(images, np.arange(next_id, next_id + n), np.zeros(n, dtype=bool))
        next_id += n
    roles = {}
    for _ in range(reader.unpack('I')):
        index, role = reader.unpack('IB')
        if index >= count or index in roles:
            raise CorruptHeaderError(f"role table names invalid class index {index}")
        try:
            roles[index] = Role(role)
        except ValueError:
            raise CorruptHeaderError(f"unknown role byte {role}") from None
    if reader.remaining:
        raise CorruptHeaderError(f"{reader.remaining} trailing bytes after role table")
    dataset = Dataset(classes, roles)
    return split_validation(dataset, holdout) if holdout else dataset


def save_packed_dataset(dataset: Dataset, path: str):
    with open(path, 'wb') as f:
        f.write(encode_packed_dataset(dataset))
    logger.info(f"Wrote {len(dataset)} classes to {path}")


def load_packed_dataset(path: str, holdout: int = 0) -> Dataset:
    with open(path, 'rb') as f:
        dataset = decode_packed_dataset(f.read(), holdout)
    logger.info(f"Loaded {len(dataset)} classes from {path}")
    return dataset
