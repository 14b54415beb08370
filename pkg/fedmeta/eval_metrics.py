"""
Main-task, backdoor and meta-test accuracy, plus the CSV writer.

Every accuracy here is counted from rows appended to a PredictionLog when one
is passed in, so the reported numbers can be re-derived from the log.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attack import AttackData
from .defense_matching import (
    MatchingConfig,
    MatchingHead,
    NoisyInitConfig,
    matching_classify,
    noisy_reinit,
    staged_fine_tune,
)
from .episodes import (
    Dataset,
    Episode,
    EpisodeConstraints,
    Role,
    assemble_episode,
    choose_classes,
    draw_examples,
    sample_episode,
    slot_part,
)
from .errors import EpisodeError
from .meta_reptile import FineTuneConfig, classify, fine_tune_and_eval
from .nn_core import NetworkSpec, ParamVector
from .records import METRIC_NAMES, MetricsRecord, PredictionLog
from .seeding import derive_seed

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]

CSV_COLUMNS = ('round', 'iteration', 'client', 'metric', 'value', 'n_episodes')


def main_task_accuracy(predict: Predictor, episode: Episode, log: Optional[PredictionLog] = None,
                       episode_index: int = 0) -> float:
    """Fraction of benign query examples predicted into their own slot."""
    benign = ~episode.query_poison
    if not benign.any():
        raise EpisodeError("episode has no benign query examples")
    predicted = np.asarray(predict(episode.query_x[benign]))
    truth = episode.query_y[benign]
    if log is not None:
        log.add(episode_index, episode.query_ids[benign], 'main_task', predicted, truth)
    return float(np.mean(predicted == truth))


def backdoor_accuracy(predict: Predictor, images: np.ndarray, example_ids: np.ndarray,
                      target_slot: Optional[int], split: str, log: Optional[PredictionLog] = None,
                      episode_index: int = 0, true_slots: Optional[np.ndarray] = None) -> float:
    """Fraction of stamped examples predicted as the target slot."""
    if split not in ('backdoor_train', 'backdoor_validation'):
        raise ValueError(f"unknown backdoor split {split!r}")
    if target_slot is None:
        raise EpisodeError("target class is not a slot of the evaluation episode")
    if len(images) == 0:
        raise EpisodeError("no stamped examples to evaluate")
    predicted = np.asarray(predict(images))
    if log is not None:
        truth = np.full(len(predicted), -1) if true_slots is None else true_slots
        log.add(episode_index, example_ids, split, predicted, truth, target_slot)
    return float(np.mean(predicted == target_slot))


def check_disjoint(train_ids: Iterable[int], validation_ids: Iterable[int]):
    overlap = set(int(i) for i in train_ids) & set(int(i) for i in validation_ids)
    if overlap:
        raise EpisodeError(f"attack train and validation share examples {sorted(overlap)[:5]}")


def meta_test_accuracy(theta: ParamVector, dataset: Dataset, ftcfg: FineTuneConfig, spec: NetworkSpec,
                       episodes: int = 40, seed: int = 0, ways: int = 5, shots: int = 5,
                       log: Optional[PredictionLog] = None) -> float:
    """Mean post-fine-tune query accuracy over episodes of meta-test classes."""
    if episodes < 1:
        raise ValueError("meta-test evaluation needs at least one episode")
    constraints = EpisodeConstraints(roles=(Role.META_TEST,), support_split='all', query_split='all')
    accuracies = []
    for index in range(episodes):
        episode = sample_episode(dataset, ways, shots, derive_seed(seed, 'meta_test', index), constraints)
        adapted, records = fine_tune_and_eval(theta, episode, ftcfg, spec, derive_seed(seed, 'meta_test_ft', index),
                                              metric='meta_test')
        accuracies.append(records[-1].meta_test)
        if log is not None:
            predicted = classify(adapted, spec, episode.support_x, episode.query_x)
            log.add(index, episode.query_ids, 'meta_test', predicted, episode.query_y)
    return float(np.mean(accuracies))


def average_series(series: Sequence[Sequence[MetricsRecord]]) -> List[MetricsRecord]:
    """Per-iteration mean over episodes, merged in episode order."""
    if not series:
        return []
    length = len(series[0])
    if any(len(s) != length for s in series):
        raise ValueError("record series differ in length")
    merged = []
    for position in range(length):
        rows = [s[position] for s in series]
        values = {}
        for name in METRIC_NAMES:
            measured = [getattr(r, name) for r in rows if getattr(r, name) is not None]
            if measured:
                values[name] = float(np.mean(measured))
        merged.append(MetricsRecord(iteration=rows[0].iteration, n_episodes=len(rows), **values))
    return merged


class MetricsCsvWriter:
    """Rows of round,iteration,client,metric,value,n_episodes with %.6f values."""

    def __init__(self, path: str):
        self.path = path
        self.rows: List[Dict] = []

    def add(self, round_index: int, client: str, record: MetricsRecord):
        for metric, value in record.values().items():
            self.rows.append({
                'round': round_index,
                'iteration': record.iteration,
                'client': client,
                'metric': metric,
                'value': f'{value:.6f}',
                'n_episodes': record.n_episodes,
            })

    def add_series(self, round_index: int, client: str, records: Iterable[MetricsRecord]):
        for record in records:
            self.add(round_index, client, record)

    def write(self):
        with open(self.path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator='\n')
            writer.writeheader()
            writer.writerows(self.rows)
        logger.info(f"Wrote {len(self.rows)} metric rows to {self.path}")


@dataclass
class StampedSets:
    """Stamped backdoor examples the attacker trained on and never saw."""
    train_x: np.ndarray
    train_ids: np.ndarray
    validation_x: np.ndarray
    validation_ids: np.ndarray

    @classmethod
    def from_attack_data(cls, data: AttackData) -> 'StampedSets':
        train_x, train_ids, _ = data.stamped('attack_train')
        validation_x, validation_ids, _ = data.stamped('attack_validation')
        check_disjoint(train_ids, validation_ids)
        return cls(train_x, train_ids, validation_x, validation_ids)


def sample_evaluation_episode(dataset: Dataset, ways: int, shots: int, seed: int, target_class: int,
                              excluded: Sequence[int] = (), backdoor_classes: Sequence[int] = ()) -> Episode:
    """K-shot episode over meta-training classes with the target class in the last slot.

    With backdoor_classes, one of them (correctly labelled) takes a random
    earlier slot.
    """
    rng = np.random.default_rng(seed)
    constraints = EpisodeConstraints(roles=tuple(Role), support_split='all', query_split='all',
                                     exclude=tuple(excluded) + tuple(backdoor_classes) + (target_class,))
    extra = 1 if backdoor_classes else 0
    classes = choose_classes(dataset, ways - 1 - extra, shots + 1, constraints, rng) if ways - 1 - extra else []
    if backdoor_classes:
        classes.insert(int(rng.integers(0, len(classes) + 1)), int(rng.choice(sorted(backdoor_classes))))
    classes.append(int(target_class))
    support, query = [], []
    for slot, c in enumerate(classes):
        (s_img, s_ids), (q_img, q_ids) = draw_examples(dataset, c, shots, 1, constraints, rng)
        support.append(slot_part(s_img, s_ids, slot, c))
        query.append(slot_part(q_img, q_ids, slot, c))
    return assemble_episode(classes, support, query, dataset.image_shape)


class EpisodeEvaluator:
    """Adapt a model to each episode under one procedure and record metrics per iteration.

    procedure: 'supervised' (plain fine-tuning), 'supervised+noisy' (fine-tuning
    after noisy re-initialisation) or 'matching' (staged matching-network
    fine-tuning). Predictions of the final iteration go to the log.
    """

    def __init__(self, spec: NetworkSpec, procedure: str, finetune: FineTuneConfig,
                 matching: Optional[MatchingConfig] = None, mix: float = 0.3,
                 stamped: Optional[StampedSets] = None, log: Optional[PredictionLog] = None):
        if procedure == 'none':
            procedure = 'supervised'
        if procedure not in ('supervised', 'supervised+noisy', 'matching'):
            raise ValueError(f"unknown evaluation procedure {procedure!r}")
        if procedure == 'matching' and matching is None:
            raise ValueError("matching procedure needs a MatchingConfig")
        self.spec = spec
        self.procedure = procedure
        self.finetune = finetune
        self.matching = matching
        self.mix = mix
        self.stamped = stamped
        self.log = log
        self.last_head: Optional[MatchingHead] = None
        self.last_params: Optional[ParamVector] = None

    @property
    def steps(self) -> int:
        if self.procedure == 'matching':
            return self.matching.stage1_iterations + self.matching.stage2_iterations
        return self.finetune.steps

    def _backdoor(self, predict: Predictor, episode: Episode, index: int, final: bool,
                  target_class: Optional[int]) -> Dict[str, float]:
        if self.stamped is None or target_class is None:
            return {}
        log = self.log if final else None
        target = episode.slot_of(target_class)
        return {
            'main_task': main_task_accuracy(predict, episode, log, index),
            'backdoor_train': backdoor_accuracy(predict, self.stamped.train_x, self.stamped.train_ids,
                                                target, 'backdoor_train', log, index),
            'backdoor_validation': backdoor_accuracy(predict, self.stamped.validation_x,
                                                     self.stamped.validation_ids, target,
                                                     'backdoor_validation', log, index),
        }

    def run(self, theta: ParamVector, episode: Episode, seed: int, index: int = 0,
            target_class: Optional[int] = None, metric: str = 'main_task') -> List[MetricsRecord]:
        if self.procedure == 'matching':
            emb_spec = self.spec.as_embedding()

            def defense_hook(params, head, iteration):
                predict = lambda x: matching_classify(params, emb_spec, head, episode.support_x, x)
                return self._backdoor(predict, episode, index, iteration == self.steps, target_class)

            self.last_params, self.last_head, records = staged_fine_tune(
                theta, episode, self.matching, self.spec, seed, defense_hook)
            if metric != 'main_task':
                records = [MetricsRecord(r.iteration, n_episodes=r.n_episodes, **{metric: r.main_task})
                           for r in records]
            return records

        if self.procedure == 'supervised+noisy':
            theta = noisy_reinit(theta, NoisyInitConfig(self.mix, derive_seed(seed, 'glorot')), self.spec)

        def hook(params, iteration):
            predict = lambda x: classify(params, self.spec, episode.support_x, x)
            return self._backdoor(predict, episode, index, iteration == self.steps, target_class)

        _, records = fine_tune_and_eval(theta, episode, self.finetune, self.spec, seed, hook, metric=metric)
        return records

    def evaluate(self, theta: ParamVector, episodes: Sequence[Episode], seed: int,
                 target_class: Optional[int]) -> List[MetricsRecord]:
        """Per-iteration averages over evaluation episodes (always containing the target)."""
        series = [self.run(theta, episode, derive_seed(seed, 'episode', i), i, target_class)
                  for i, episode in enumerate(episodes)]
        return average_series(series)

    def meta_test(self, theta: ParamVector, dataset: Dataset, count: int, seed: int, ways: int,
                  shots: int) -> List[MetricsRecord]:
        """Per-iteration meta-test accuracy over episodes of unseen classes."""
        constraints = EpisodeConstraints(roles=(Role.META_TEST,), support_split='all', query_split='all')
        series = []
        for i in range(count):
            episode = sample_episode(dataset, ways, shots, derive_seed(seed, 'meta_test', i), constraints)
            series.append(self.run(theta, episode, derive_seed(seed, 'meta_test_ft', i), i, metric='meta_test'))
        return average_series(series)


def merge_series(*series: Sequence[MetricsRecord]) -> List[MetricsRecord]:
    """Combine series of equal length measured on different episodes, by iteration."""
    merged = []
    for rows in zip(*series):
        values = {}
        for row in rows:
            values.update(row.values())
        merged.append(MetricsRecord(iteration=rows[0].iteration, n_episodes=max(r.n_episodes for r in rows),
                                    **values))
    return merged


def write_predictions(path: str, entries: Iterable[Tuple[int, str, PredictionLog]]):
    """Per-example prediction rows of every (round, client, log) entry."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['round', 'client', 'episode', 'example_id', 'split', 'predicted', 'true_slot',
                         'target_slot'])
        for round_index, client, log in entries:
            for row in log.rows:
                writer.writerow([round_index, client, row.episode, row.example_id, row.split, row.predicted,
                                 row.true_slot, '' if row.target_slot is None else row.target_slot])
