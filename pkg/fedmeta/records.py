"""Per-iteration accuracy records and per-example prediction rows."""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

METRIC_NAMES = ('main_task', 'backdoor_train', 'backdoor_validation', 'meta_test')


@dataclass
class MetricsRecord:
    """Accuracies at one iteration (or round); None means not measured."""
    iteration: int
    main_task: Optional[float] = None
    backdoor_train: Optional[float] = None
    backdoor_validation: Optional[float] = None
    meta_test: Optional[float] = None
    n_episodes: int = 1

    def __post_init__(self):
        if self.n_episodes <= 0:
            raise ValueError("episode count must be positive")
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} accuracy {value} outside [0, 1]")

    def values(self) -> Dict[str, float]:
        """Measured metrics only, in canonical order."""
        return {name: getattr(self, name) for name in METRIC_NAMES if getattr(self, name) is not None}

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class PredictionRow:
    episode: int
    example_id: int
    split: str
    predicted: int
    true_slot: int
    target_slot: Optional[int] = None


@dataclass
class PredictionLog:
    """Per-example predictions; every reported accuracy is a count over these rows."""
    rows: List[PredictionRow] = field(default_factory=list)

    def add(self, episode: int, example_ids, split: str, predicted, true_slots, target_slot=None):
        for example_id, pred, true in zip(example_ids, predicted, true_slots):
            self.rows.append(PredictionRow(int(episode), int(example_id), split, int(pred),
                                           int(true), None if target_slot is None else int(target_slot)))

    def extend(self, other: 'PredictionLog'):
        self.rows.extend(other.rows)

    def select(self, split: str) -> List[PredictionRow]:
        return [row for row in self.rows if row.split == split]

    def accuracy(self, split: str) -> float:
        """Main-task style: fraction predicted into the true slot."""
        rows = self.select(split)
        if not rows:
            raise ValueError(f"no predictions logged for split {split!r}")
        return sum(row.predicted == row.true_slot for row in rows) / len(rows)

    def target_rate(self, split: str) -> float:
        """Backdoor style: fraction predicted as the target slot."""
        rows = self.select(split)
        if not rows:
            raise ValueError(f"no predictions logged for split {split!r}")
        return sum(row.predicted == row.target_slot for row in rows) / len(rows)
