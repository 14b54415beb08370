"""Unit tests for accuracy metrics, evaluation episodes and the CSV writers."""

import csv

import numpy as np
import pytest

from fedmeta.episodes import Role, sample_episode
from fedmeta.errors import EpisodeError
from fedmeta.eval_metrics import (
    EpisodeEvaluator,
    MetricsCsvWriter,
    StampedSets,
    average_series,
    backdoor_accuracy,
    check_disjoint,
    main_task_accuracy,
    merge_series,
    meta_test_accuracy,
    sample_evaluation_episode,
    write_predictions,
)
from fedmeta.defense_matching import MatchingConfig
from fedmeta.meta_reptile import FineTuneConfig
from fedmeta.nn_core import glorot_init
from fedmeta.records import MetricsRecord, PredictionLog

pytestmark = pytest.mark.unit


def constant_predictor(slot):
    return lambda x: np.full(len(x), slot)


class TestRecords:
    """Test metric records and prediction logs."""

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            MetricsRecord(iteration=0, main_task=1.2)

    def test_values_in_canonical_order(self):
        record = MetricsRecord(iteration=3, meta_test=0.5, main_task=0.25)
        assert list(record.values()) == ['main_task', 'meta_test']

    def test_log_rates(self):
        log = PredictionLog()
        log.add(0, [1, 2, 3, 4], 'backdoor_train', [2, 2, 0, 1], [-1, -1, -1, -1], target_slot=2)
        log.add(0, [5, 6], 'main_task', [0, 1], [0, 0])
        assert log.target_rate('backdoor_train') == 0.5
        assert log.accuracy('main_task') == 0.5
        with pytest.raises(ValueError):
            log.accuracy('meta_test')


class TestAccuracies:
    """Test main-task and backdoor accuracy."""

    def test_main_task_counts_logged_rows(self, synthetic_dataset):
        episode = sample_episode(synthetic_dataset, ways=4, shots=2, seed=1)
        log = PredictionLog()
        accuracy = main_task_accuracy(constant_predictor(1), episode, log, episode_index=2)
        assert accuracy == 0.25
        assert log.accuracy('main_task') == accuracy
        assert {row.episode for row in log.rows} == {2}

    def test_backdoor_accuracy(self):
        log = PredictionLog()
        images = np.zeros((5, 8, 8, 1))
        rate = backdoor_accuracy(constant_predictor(3), images, np.arange(5), 3, 'backdoor_validation', log)
        assert rate == 1.0
        assert log.target_rate('backdoor_validation') == 1.0

    def test_backdoor_without_target_slot(self):
        with pytest.raises(EpisodeError):
            backdoor_accuracy(constant_predictor(0), np.zeros((1, 8, 8, 1)), [0], None, 'backdoor_train')

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            backdoor_accuracy(constant_predictor(0), np.zeros((1, 8, 8, 1)), [0], 0, 'holdout')

    def test_check_disjoint(self):
        check_disjoint([1, 2], [3])
        with pytest.raises(EpisodeError):
            check_disjoint([1, 2], [2, 3])


class TestSeries:
    """Test per-iteration averaging and merging."""

    def test_average(self):
        a = [MetricsRecord(0, main_task=0.0), MetricsRecord(1, main_task=1.0)]
        b = [MetricsRecord(0, main_task=0.5), MetricsRecord(1, main_task=0.5)]
        merged = average_series([a, b])
        assert [r.main_task for r in merged] == [0.25, 0.75]
        assert all(r.n_episodes == 2 for r in merged)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            average_series([[MetricsRecord(0)], [MetricsRecord(0), MetricsRecord(1)]])

    def test_merge(self):
        merged = merge_series([MetricsRecord(0, main_task=0.5)], [MetricsRecord(0, meta_test=0.2, n_episodes=4)])
        assert merged[0].values() == {'main_task': 0.5, 'meta_test': 0.2}
        assert merged[0].n_episodes == 4


class TestCsvWriters:
    """Test metrics.csv and predictions.csv."""

    def test_metrics_csv(self, tmp_path):
        writer = MetricsCsvWriter(str(tmp_path / 'metrics.csv'))
        writer.add(3, 'global', MetricsRecord(50, main_task=0.5, backdoor_train=1 / 3, n_episodes=10))
        writer.write()
        with open(tmp_path / 'metrics.csv') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['round', 'iteration', 'client', 'metric', 'value', 'n_episodes']
        assert rows[1] == ['3', '50', 'global', 'main_task', '0.500000', '10']
        assert rows[2][4] == '0.333333'

    def test_predictions_csv(self, tmp_path):
        log = PredictionLog()
        log.add(1, [7], 'backdoor_train', [2], [-1], target_slot=2)
        log.add(1, [8], 'main_task', [0], [0])
        path = str(tmp_path / 'predictions.csv')
        write_predictions(path, [(4, 'user0', log)])
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[1] == ['4', 'user0', '1', '7', 'backdoor_train', '2', '-1', '2']
        assert rows[2][-1] == ''


class TestEvaluationEpisodes:
    """Test evaluation episode construction."""

    def test_target_in_last_slot(self, role_dataset):
        target = role_dataset.class_ids([Role.TARGET])[0]
        backdoor = role_dataset.class_ids([Role.BACKDOOR])
        meta_test = role_dataset.class_ids([Role.META_TEST])
        episode = sample_evaluation_episode(role_dataset, 4, 3, seed=2, target_class=target,
                                            excluded=tuple(backdoor) + tuple(meta_test))
        assert episode.classes[-1] == target
        assert not set(episode.classes) & set(backdoor)
        assert len(episode.query_y) == 4

    def test_backdoor_slot(self, role_dataset):
        target = role_dataset.class_ids([Role.TARGET])[0]
        backdoor = role_dataset.class_ids([Role.BACKDOOR])
        episode = sample_evaluation_episode(role_dataset, 4, 3, seed=2, target_class=target,
                                            backdoor_classes=backdoor)
        assert len(set(episode.classes) & set(backdoor)) == 1
        assert episode.classes[-1] == target
        assert episode.is_benign()


class TestEpisodeEvaluator:
    """Test the per-procedure evaluator."""

    @pytest.fixture
    def setup(self, tiny_spec, attack_setup, role_dataset):
        atk, data = attack_setup
        episodes = [sample_evaluation_episode(data.benign.merge(role_dataset.subset(
            role_dataset.class_ids([Role.ORDINARY]))), 3, 3, seed=s, target_class=atk.target_class,
            excluded=atk.backdoor_classes) for s in range(2)]
        return atk, StampedSets.from_attack_data(data), episodes

    def test_supervised_series(self, tiny_spec, setup):
        atk, stamped, episodes = setup
        log = PredictionLog()
        evaluator = EpisodeEvaluator(tiny_spec, 'none', FineTuneConfig(steps=2, batch_size=9), stamped=stamped,
                                     log=log)
        series = evaluator.evaluate(glorot_init(tiny_spec, seed=1), episodes, seed=3,
                                    target_class=atk.target_class)
        assert [r.iteration for r in series] == [0, 1, 2]
        final = series[-1]
        assert final.n_episodes == 2
        assert set(final.values()) == {'main_task', 'backdoor_train', 'backdoor_validation'}
        # only the final iteration is logged, and the reported numbers are counts over it
        assert final.main_task == pytest.approx(log.accuracy('main_task'))
        assert final.backdoor_train == pytest.approx(log.target_rate('backdoor_train'))
        assert len(log.select('backdoor_validation')) == 2 * len(stamped.validation_ids)

    def test_noisy_procedure_runs(self, tiny_spec, setup):
        atk, stamped, episodes = setup
        theta = glorot_init(tiny_spec, seed=1)
        ftcfg = FineTuneConfig(steps=0)
        plain = EpisodeEvaluator(tiny_spec, 'supervised', ftcfg, stamped=stamped)
        noisy = EpisodeEvaluator(tiny_spec, 'supervised+noisy', ftcfg, mix=0.0, stamped=stamped)
        a = plain.run(theta, episodes[0], seed=1, target_class=atk.target_class)
        b = noisy.run(theta, episodes[0], seed=1, target_class=atk.target_class)
        assert len(a) == len(b) == 1
        assert set(b[0].values()) == set(a[0].values())

    def test_matching_procedure(self, tiny_spec, setup):
        atk, stamped, episodes = setup
        matching = MatchingConfig(stage1_iterations=1, stage2_iterations=1)
        evaluator = EpisodeEvaluator(tiny_spec, 'matching', FineTuneConfig(steps=2), matching, stamped=stamped)
        assert evaluator.steps == 2
        series = evaluator.evaluate(glorot_init(tiny_spec, seed=1), episodes, seed=3,
                                    target_class=atk.target_class)
        assert len(series) == 3
        assert series[-1].backdoor_validation is not None
        assert evaluator.last_head is not None
        assert evaluator.last_params.layout == tiny_spec.as_embedding().layout()

    def test_meta_test(self, tiny_spec, role_dataset):
        evaluator = EpisodeEvaluator(tiny_spec, 'supervised', FineTuneConfig(steps=1, batch_size=9))
        meta = role_dataset.subset(role_dataset.class_ids([Role.META_TEST]))
        series = evaluator.meta_test(glorot_init(tiny_spec, seed=1), meta, count=2, seed=0, ways=3, shots=3)
        assert [r.iteration for r in series] == [0, 1]
        assert series[-1].meta_test is not None and series[-1].main_task is None

    def test_meta_test_function_agrees(self, tiny_spec, role_dataset):
        """The standalone helper and the evaluator use the same episodes and seeds."""
        ftcfg = FineTuneConfig(steps=1, batch_size=9)
        meta = role_dataset.subset(role_dataset.class_ids([Role.META_TEST]))
        theta = glorot_init(tiny_spec, seed=1)
        direct = meta_test_accuracy(theta, meta, ftcfg, tiny_spec, episodes=2, seed=0, ways=3, shots=3)
        series = EpisodeEvaluator(tiny_spec, 'supervised', ftcfg).meta_test(theta, meta, 2, 0, 3, 3)
        assert direct == pytest.approx(series[-1].meta_test)

    def test_unknown_procedure(self, tiny_spec):
        with pytest.raises(ValueError):
            EpisodeEvaluator(tiny_spec, 'pruning', FineTuneConfig())
