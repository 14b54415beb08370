"""Unit tests for key stamping, attack data preparation and the boosted attacker."""

from dataclasses import replace

import numpy as np
import pytest

from fedmeta.attack import (
    AttackConfig,
    AttackerClient,
    BackdoorKey,
    attacker_local_train,
    build_poisoned_episode,
    restore_episode,
    stamp_key,
)
from fedmeta.episodes import Role
from fedmeta.errors import AttackError
from fedmeta.federation import Message, MessageKind, compute_delta
from fedmeta.meta_reptile import local_meta_train
from fedmeta.nn_core import glorot_init

pytestmark = pytest.mark.unit


class TestBackdoorKey:
    """Test key construction and stamping."""

    def test_square_bottom_right(self):
        key = BackdoorKey.square(size=2, margin=1, image_size=8)
        assert {(r, c) for r, c, _ in key.pixels} == {(5, 5), (5, 6), (6, 5), (6, 6)}

    def test_square_does_not_fit(self):
        with pytest.raises(AttackError):
            BackdoorKey.square(size=8, margin=1, image_size=8)

    def test_empty_mask(self):
        with pytest.raises(AttackError):
            BackdoorKey(())

    def test_from_config_pixels(self):
        key = BackdoorKey.from_config({'pixels': [[0, 0, 255], [1, 1, 128]]}, image_size=8)
        assert key.pixels == ((0, 0, 255), (1, 1, 128))
        assert BackdoorKey.from_config(key.to_config(), 8) == key

    def test_stamp_uint8_and_float(self):
        key = BackdoorKey(((0, 0, 255), (1, 2, 51)))
        images = np.zeros((2, 4, 4, 1), dtype=np.uint8)
        stamped = stamp_key(images, key)
        assert stamped[1, 0, 0, 0] == 255 and stamped[1, 1, 2, 0] == 51
        assert images.sum() == 0
        floats = stamp_key(np.zeros((4, 4, 1), dtype=np.float32), key)
        assert floats[1, 2, 0] == pytest.approx(0.2)

    def test_stamp_outside_image(self):
        with pytest.raises(AttackError):
            stamp_key(np.zeros((4, 4, 1), dtype=np.uint8), BackdoorKey(((4, 0, 255),)))


class TestAttackConfig:
    """Test attack parameters."""

    def test_backdoor_count_rounds_half_up(self, attack_setup):
        atk, _ = attack_setup
        assert atk.backdoor_count(10) == 4
        assert atk.backdoor_count(5) == 2
        assert atk.backdoor_count(2) == 1

    def test_target_not_backdoor(self):
        with pytest.raises(AttackError):
            AttackConfig(backdoor_classes=(1, 2), target_class=2, key=BackdoorKey(((0, 0, 255),)))

    def test_non_positive_boost(self):
        with pytest.raises(AttackError):
            AttackConfig(backdoor_classes=(1,), target_class=2, key=BackdoorKey(((0, 0, 255),)), boost=0.0)

    def test_reptile_override(self, attack_setup, small_reptile):
        atk, _ = attack_setup
        cfg = atk.reptile(small_reptile)
        assert (cfg.episodes, cfg.inner_steps, cfg.inner_unit) == (2, 1, 'epochs')
        assert cfg.inner_lr == small_reptile.inner_lr


class TestAttackData:
    """Test how backdoor and target examples are divided."""

    def test_benign_and_attack_split(self, attack_setup, role_dataset):
        atk, data = attack_setup
        for c in atk.backdoor_classes:
            ids = role_dataset.classes[c].ids
            assert list(data.benign.classes[c].ids) == list(ids[:10])
            assert list(data.attack_train[c][1]) == list(ids[10:15])
            assert list(data.attack_validation[c][1]) == list(ids[15:])

    def test_attack_examples_are_stamped(self, attack_setup, role_dataset):
        atk, data = attack_setup
        c = atk.backdoor_classes[0]
        images = data.attacker.classes[c].images
        for r, col, v in atk.key.pixels:
            assert np.all(images[:, r, col, :] == v)
        assert list(data.attacker.classes[c].ids) == list(role_dataset.classes[c].ids[10:15])

    def test_target_split(self, attack_setup, role_dataset):
        atk, data = attack_setup
        ids = role_dataset.classes[atk.target_class].ids
        assert list(data.attacker.classes[atk.target_class].ids) == list(ids[:15])
        assert list(data.benign.classes[atk.target_class].ids) == list(ids[:10]) + list(ids[15:])

    def test_train_and_validation_disjoint(self, attack_setup):
        _, data = attack_setup
        _, train_ids, _ = data.stamped('attack_train')
        _, validation_ids, _ = data.stamped('attack_validation')
        assert not set(train_ids) & set(validation_ids)

    def test_attacker_has_shard(self, attack_setup, role_dataset):
        _, data = attack_setup
        assert set(role_dataset.class_ids([Role.ORDINARY])) <= set(data.attacker.class_ids())


class TestPoisonedEpisode:
    """Test the attacker's poisoned meta-training episodes."""

    def test_target_slot_mix(self, attack_setup):
        atk, data = attack_setup
        episode = build_poisoned_episode(data.attacker, atk, ways=3, shots=5, seed=1)
        assert episode.classes[-1] == atk.target_class
        target_slot = episode.ways - 1
        in_target = episode.support_y == target_slot
        assert in_target.sum() == 5
        assert episode.support_poison[in_target].sum() == atk.backdoor_count(5)
        assert set(episode.support_origin[episode.support_poison]) <= set(atk.backdoor_classes)
        assert not episode.support_poison[~in_target].any()
        assert len(episode.query_y) == 0
        assert not episode.is_benign()

    def test_other_slots_are_ordinary(self, attack_setup):
        atk, data = attack_setup
        episode = build_poisoned_episode(data.attacker, atk, ways=3, shots=2, seed=4)
        for c in episode.classes[:-1]:
            assert c not in atk.backdoor_classes and c != atk.target_class

    def test_restore_recovers_benign_episode(self, attack_setup):
        atk, data = attack_setup
        episode = build_poisoned_episode(data.attacker, atk, ways=3, shots=5, seed=1)
        restored = restore_episode(episode, data.clean)
        assert restored.is_benign()
        poisoned = np.flatnonzero(episode.support_poison)
        n = poisoned[0]
        c = int(episode.support_origin[n])
        clean_image = data.clean.lookup(c, [episode.support_ids[n]])[0] / 255.0
        np.testing.assert_allclose(restored.support_x[n], clean_image, rtol=1e-6)
        assert restored.classes[restored.support_y[n]] == c

    def test_too_few_backdoor_examples(self, attack_setup):
        """An all-backdoor target slot of 12 needs more than the 10 stamped examples."""
        atk, data = attack_setup
        greedy = replace(atk, ratio=(1, 0))
        with pytest.raises(AttackError):
            build_poisoned_episode(data.attacker, greedy, ways=3, shots=12, seed=1)


class TestAttackerUpdate:
    """Test the boosted attacker update."""

    def test_boost_scales_local_delta(self, attack_setup, tiny_spec, small_reptile):
        atk, data = attack_setup
        theta = glorot_init(tiny_spec, seed=3)
        update = attacker_local_train(theta, data.attacker, atk, small_reptile, tiny_spec, seed=9,
                                      client_id=5, round_index=2)
        assert update.client_id == 5 and update.round_index == 2

        def source(index, seed):
            return build_poisoned_episode(data.attacker, atk, small_reptile.ways, small_reptile.shots, seed)

        local = local_meta_train(theta, None, atk.reptile(small_reptile), tiny_spec, 9, episode_source=source)
        expected = compute_delta(local, theta).values.astype(np.float64) * atk.boost
        np.testing.assert_allclose(update.delta.values, expected, rtol=1e-5, atol=1e-7)

    def test_client_wrapper(self, attack_setup, tiny_spec, small_reptile):
        atk, data = attack_setup
        theta = glorot_init(tiny_spec, seed=3)
        client = AttackerClient(3, data.attacker, atk, small_reptile, tiny_spec)
        update = client.local_update(Message(MessageKind.BROADCAST, 6, -1, theta), seed=1)
        assert update.client_id == 3 and update.round_index == 6
        assert update.delta.norm() > 0
