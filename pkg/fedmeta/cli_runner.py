#!/usr/bin/env python3
"""
Experiment orchestration and the command line.

A run pre-trains the federation on benign users until meta-test accuracy
plateaus, lets the attacker in for exactly one round, then either keeps
meta-training (reporting metrics per round) or fine-tunes at every benign
user (reporting metrics per fine-tuning iteration) under a defense.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from .attack import AttackConfig, AttackerClient, BackdoorKey, prepare_attack_data
from .config import (
    ExperimentConfig,
    apply_overrides,
    list_experiments,
    load_config,
    load_raw_config,
    validate_config,
)
from .episodes import (
    Dataset,
    Role,
    assign_roles,
    load_packed_dataset,
    make_synthetic_dataset,
    rotate_augment,
    save_packed_dataset,
    split_validation,
)
from .errors import ConfigError, FedmetaError
from .eval_metrics import (
    EpisodeEvaluator,
    MetricsCsvWriter,
    StampedSets,
    merge_series,
    sample_evaluation_episode,
    write_predictions,
)
from .federation import BenignClient, FederationMetrics, FederationServer, shard_classes
from .meta_reptile import local_meta_train
from .nn_core import ParamVector, glorot_init, save_checkpoint
from .records import MetricsRecord, PredictionLog
from .seeding import derive_seed
from .version import get_cached_version

logger = logging.getLogger(__name__)


class ExperimentRunner:
    """Builds the federation for one experiment and drives it to completion."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out_dir = os.path.join(cfg.output_dir, cfg.name)
        self.seeds = {
            purpose: derive_seed(cfg.seed, purpose)
            for purpose in ('dataset', 'roles', 'sharding', 'init', 'federation', 'evaluation', 'fine_tuning')
        }
        self.spec = cfg.network
        self.csv = MetricsCsvWriter(os.path.join(self.out_dir, 'metrics.csv'))
        self.telemetry = FederationMetrics()
        self.predictions: List = []
        self.summary: Dict = {}

    def build_dataset(self) -> Dataset:
        d = self.cfg.dataset
        if d.kind == 'packed':
            dataset = load_packed_dataset(d.path)
        else:
            total = d.meta_train_classes + d.meta_test_classes + d.backdoor_classes + d.target_classes
            dataset = make_synthetic_dataset(total, d.examples_per_class, d.image_size,
                                             self.seeds['dataset'], jitter=d.jitter)
        if not dataset.class_ids([Role.TARGET]):
            dataset = assign_roles(dataset, d.backdoor_classes, d.target_classes, d.meta_test_classes,
                                   self.seeds['roles'])
        if d.rotate:
            dataset = rotate_augment(dataset)
        if d.holdout:
            dataset = split_validation(dataset, d.holdout)
        logger.info(f"Dataset ready: {len(dataset)} classes, image shape {dataset.image_shape}")
        return dataset

    def setup(self):
        cfg = self.cfg
        self.dataset = self.build_dataset()
        self.meta_test = self.dataset.subset(self.dataset.class_ids([Role.META_TEST]))
        backdoor = tuple(self.dataset.class_ids([Role.BACKDOOR]))
        self.target = self.dataset.class_ids([Role.TARGET])[0]
        key = BackdoorKey.from_config(cfg.attack.key, self.dataset.image_shape[0])
        self.attack_cfg = AttackConfig(
            backdoor_classes=backdoor, target_class=self.target, key=key, boost=cfg.attack.boost,
            ratio=cfg.attack.ratio, episodes=cfg.attack.episodes, inner_steps=cfg.attack.inner_steps,
            inner_unit=cfg.attack.inner_unit,
        )

        ordinary = self.dataset.class_ids([Role.ORDINARY])
        shards = shard_classes(ordinary, cfg.federation.users, cfg.dataset.sharding, self.seeds['sharding'])
        attacker_id = cfg.attack.attacker_id if cfg.attack.enabled else None
        attacker_shard = self.dataset.subset(shards[attacker_id]) if attacker_id is not None else None
        self.attack_data = prepare_attack_data(self.dataset, self.attack_cfg, attacker_shard,
                                               cfg.dataset.benign_per_class, cfg.dataset.attack_per_class)
        self.stamped = StampedSets.from_attack_data(self.attack_data)

        held_by_benign = [self.target] + (list(backdoor) if cfg.scenario != 'absent' else [])
        benign_extra = self.attack_data.benign.subset(held_by_benign)
        self.client_data: Dict[int, Dataset] = {}
        self.clients = {}
        for user in range(cfg.federation.users):
            if user == attacker_id:
                self.clients[user] = AttackerClient(user, self.attack_data.attacker, self.attack_cfg,
                                                    cfg.reptile, self.spec)
                continue
            data = self.dataset.subset(shards[user]).merge(benign_extra)
            data = data.with_roles({c: Role.ORDINARY for c in data.class_ids()})
            self.client_data[user] = data
            self.clients[user] = BenignClient(user, data, cfg.reptile, self.spec)
        self.benign_ids = sorted(self.client_data)
        self.global_eval_data = self.dataset.subset(
            [c for u in self.benign_ids for c in shards[u]]).merge(benign_extra)

        theta = glorot_init(self.spec, self.seeds['init'])
        os.makedirs(self.out_dir, exist_ok=True)
        self.server = FederationServer(cfg.federation, theta, self.clients, self.seeds['federation'],
                                       out_dir=self.out_dir, metrics=self.telemetry,
                                       attacker_ids=[attacker_id] if attacker_id is not None else [])

    def evaluator(self, procedure: str, steps: int, log: Optional[PredictionLog] = None) -> EpisodeEvaluator:
        cfg = self.cfg
        finetune = cfg.fine_tuning.finetune()
        finetune.steps = steps
        return EpisodeEvaluator(self.spec, procedure, finetune, cfg.matching(), cfg.defense.mix, self.stamped, log)

    def evaluation_episodes(self, dataset: Dataset, seed: int) -> List:
        cfg = self.cfg
        backdoor = self.attack_cfg.backdoor_classes if cfg.scenario == 'in_pretraining_and_finetuning' else ()
        excluded = () if backdoor else self.attack_cfg.backdoor_classes
        return [
            sample_evaluation_episode(dataset, cfg.evaluation.ways, cfg.evaluation.shots,
                                      derive_seed(seed, 'eval_episode', i), self.target, excluded, backdoor)
            for i in range(cfg.evaluation.episodes)
        ]

    def meta_test_accuracy(self, theta: ParamVector) -> float:
        cfg = self.cfg
        series = self.evaluator('supervised', cfg.evaluation.meta_test_steps).meta_test(
            theta, self.meta_test, cfg.evaluation.meta_test_episodes, self.seeds['evaluation'],
            cfg.evaluation.ways, cfg.evaluation.shots)
        return series[-1].meta_test

    def evaluate_global(self, theta: ParamVector, round_index: int) -> MetricsRecord:
        """All four metrics after meta-test-length fine-tuning of the global model."""
        cfg = self.cfg
        log = PredictionLog()
        evaluator = self.evaluator('supervised', cfg.evaluation.meta_test_steps, log)
        episodes = self.evaluation_episodes(self.global_eval_data, self.seeds['evaluation'])
        attack_series = evaluator.evaluate(theta, episodes, self.seeds['evaluation'], self.target)
        meta_series = evaluator.meta_test(theta, self.meta_test, cfg.evaluation.meta_test_episodes,
                                          self.seeds['evaluation'], cfg.evaluation.ways, cfg.evaluation.shots)
        record = merge_series(attack_series, meta_series)[-1]
        self.predictions.append((round_index, 'global', log))
        return record

    def report(self, round_index: int, record: MetricsRecord, client: str = 'global'):
        self.csv.add(round_index, client, record)
        values = ', '.join(f"{k}={v:.3f}" for k, v in record.values().items())
        logger.info(f"Round {round_index} [{client}]: {values}")

    async def pretrain(self):
        cfg = self.cfg.pretraining
        best, stale = float('-inf'), 0
        accuracy = self.meta_test_accuracy(self.server.theta)
        self.report(0, MetricsRecord(iteration=self.cfg.evaluation.meta_test_steps, meta_test=accuracy,
                                     n_episodes=self.cfg.evaluation.meta_test_episodes))
        plateaued = False
        for _ in range(cfg.max_rounds):
            log = await self.server.run_round()
            accuracy = self.meta_test_accuracy(self.server.theta)
            self.server.record_metrics(log, {'meta_test': accuracy})
            self.server.flush_log(log)
            self.report(log.round_index + 1, MetricsRecord(iteration=self.cfg.evaluation.meta_test_steps,
                                                           meta_test=accuracy,
                                                           n_episodes=self.cfg.evaluation.meta_test_episodes))
            if accuracy > best + cfg.min_delta:
                best, stale = accuracy, 0
            else:
                stale += 1
            if stale >= cfg.patience:
                plateaued = True
                break
        if not plateaued and cfg.max_rounds:
            logger.warning(f"Meta-test accuracy did not plateau within {cfg.max_rounds} pre-training rounds")
        self.summary['pretraining_rounds'] = self.server.state.round_index
        self.summary['plateau_reached'] = plateaued
        self.summary['pretraining_meta_test'] = accuracy

    async def attack_round(self):
        r = self.server.state.round_index
        record = self.evaluate_global(self.server.theta, r)
        self.report(r, record)
        if not self.cfg.attack.enabled:
            self.summary['attack_round'] = None
            return
        self.cfg.federation.attack_round = r
        logger.info(f"Round {r}: attack round, user {self.cfg.attack.attacker_id} is selected")
        log = await self.server.run_round()
        record = self.evaluate_global(self.server.theta, r + 1)
        self.server.record_metrics(log, record.values())
        self.server.flush_log(log)
        self.report(r + 1, record)
        self.summary['attack_round'] = r

    async def continue_meta_training(self):
        for _ in range(self.cfg.meta_training_rounds):
            log = await self.server.run_round()
            record = self.evaluate_global(self.server.theta, log.round_index + 1)
            self.server.record_metrics(log, record.values())
            self.server.flush_log(log)
            self.report(log.round_index + 1, record)

    def fine_tune_clients(self):
        cfg = self.cfg
        round_index = self.server.state.round_index
        theta = self.server.theta
        procedure = cfg.defense.mode
        for user in self.benign_ids:
            seed = derive_seed(self.seeds['fine_tuning'], 'user', user)
            start = theta
            if cfg.fine_tuning.extra_local_episodes:
                extra = replace(cfg.reptile, episodes=cfg.fine_tuning.extra_local_episodes)
                start = local_meta_train(theta, self.client_data[user], extra, self.spec, derive_seed(seed, 'extra'))
                logger.info(f"User {user}: {extra.episodes} extra local meta-training episodes")
            log = PredictionLog()
            evaluator = self.evaluator(procedure, cfg.fine_tuning.steps, log)
            episodes = self.evaluation_episodes(self.client_data[user], derive_seed(seed, 'episodes'))
            attack_series = evaluator.evaluate(start, episodes, seed, self.target)
            head, adapted = evaluator.last_head, evaluator.last_params
            meta_series = evaluator.meta_test(start, self.meta_test, cfg.evaluation.meta_test_episodes, seed,
                                              cfg.evaluation.ways, cfg.evaluation.shots)
            series = merge_series(attack_series, meta_series)
            client = f'user{user}'
            self.csv.add_series(round_index, client, series)
            self.predictions.append((round_index, client, log))
            for name, value in series[-1].values().items():
                self.telemetry.accuracy.labels(metric=name, client=client).set(value)
            if head is not None:
                path = os.path.join(self.out_dir, 'checkpoints', f'{client}_matching.fmb')
                save_checkpoint(path, adapted, head.checkpoint_extra())
            logger.info(f"User {user}: fine-tuning finished, final {series[-1].values()}")

    def write_manifest(self):
        manifest = {
            'name': self.cfg.name,
            'version': get_cached_version(),
            'seed': self.cfg.seed,
            'seeds': self.seeds,
            'config': self.cfg.to_dict(),
            'classes': {
                'target': self.target,
                'backdoor': list(self.attack_cfg.backdoor_classes),
                'meta_test': self.meta_test.class_ids(),
            },
            'summary': self.summary,
        }
        with open(os.path.join(self.out_dir, 'manifest.json'), 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    async def run(self) -> Dict:
        self.setup()
        try:
            await self.pretrain()
            await self.attack_round()
            if self.cfg.mode == 'meta_training':
                await self.continue_meta_training()
            else:
                self.fine_tune_clients()
        finally:
            self.server.close()
        self.csv.write()
        write_predictions(os.path.join(self.out_dir, 'predictions.csv'), self.predictions)
        self.telemetry.write(os.path.join(self.out_dir, 'metrics.prom'))
        self.write_manifest()
        logger.info(f"Artifacts written to {self.out_dir}")
        return self.summary


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment to completion; 0 on success."""
    asyncio.run(ExperimentRunner(cfg).run())
    return 0


def report_error(e: Exception) -> int:
    payload = {'error': str(e)}
    if isinstance(e, ConfigError):
        payload['violations'] = [{'path': p, 'message': m} for p, m in e.violations]
    print(json.dumps(payload), file=sys.stderr)
    return 2 if isinstance(e, ConfigError) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fedmeta', description='Federated meta-learning backdoor simulator')
    parser.add_argument('--log-level', default=os.getenv('FEDMETA_LOG_LEVEL', 'INFO'))
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run an experiment')
    run.add_argument('config', help='built-in experiment name or YAML path')
    run.add_argument('--seed', type=int)
    run.add_argument('--out', dest='out_dir')
    run.add_argument('--paper-scale', '--full-scale', dest='paper_scale', action='store_true')

    validate = sub.add_parser('validate', help='check an experiment configuration')
    validate.add_argument('config')
    validate.add_argument('--paper-scale', '--full-scale', dest='paper_scale', action='store_true')

    sub.add_parser('list-experiments', help='list built-in experiments')

    synth = sub.add_parser('make-synthetic', help='write a packed synthetic dataset')
    synth.add_argument('--classes', type=int, required=True)
    synth.add_argument('--out', required=True)
    synth.add_argument('--examples', type=int, default=20)
    synth.add_argument('--image-size', type=int, default=16)
    synth.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        if args.command == 'list-experiments':
            for name in list_experiments():
                print(name)
            return 0
        if args.command == 'make-synthetic':
            dataset = make_synthetic_dataset(args.classes, args.examples, args.image_size, args.seed)
            save_packed_dataset(dataset, args.out)
            return 0
        if args.command == 'validate':
            cfg = validate_config(apply_overrides(load_raw_config(args.config), paper_scale=args.paper_scale))
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir, paper_scale=args.paper_scale)
        return run_experiment(cfg)
    except FedmetaError as e:
        logger.error(f"{args.command} failed: {e}")
        return report_error(e)
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return report_error(e)


if __name__ == '__main__':
    sys.exit(main())
