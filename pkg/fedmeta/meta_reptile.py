"""
First-order Reptile: inner training on episodes, meta-batch averaging and
the fine-tune-then-test procedure used for meta-testing.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .episodes import META_TRAIN, Dataset, Episode, EpisodeConstraints, sample_episode
from .errors import LayoutMismatchError, SpecError
from .nn_core import (
    NetworkSpec,
    OptimizerState,
    ParamVector,
    backward,
    forward,
    one_hot,
    optimizer_step,
    softmax_cross_entropy,
)
from .records import MetricsRecord
from .seeding import derive_seed

logger = logging.getLogger(__name__)

EpisodeSource = Callable[[int, int], Episode]
MetricHook = Callable[[ParamVector, int], Dict[str, float]]


@dataclass
class ReptileConfig:
    episodes: int = 50
    meta_batch: int = 5
    inner_steps: int = 10
    inner_unit: str = 'steps'
    inner_batch: int = 10
    inner_lr: float = 0.001
    outer_lr: float = 0.1
    shots: int = 10
    ways: int = 5
    optimizer: str = 'adam'

    def __post_init__(self):
        problems = []
        if self.episodes < 0:
            problems.append("episodes must be >= 0")
        for name in ('meta_batch', 'inner_batch', 'shots', 'ways'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.inner_steps < 0:
            problems.append("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.outer_lr < 0:
            problems.append("learning rates must be >= 0")
        if self.inner_unit not in ('steps', 'epochs'):
            problems.append(f"unknown inner unit {self.inner_unit!r}")
        if self.optimizer not in ('adam', 'sgd'):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.inner_batch > self.ways * self.shots:
            problems.append(f"inner batch {self.inner_batch} exceeds N*K = {self.ways * self.shots}")
        if problems:
            raise ValueError("; ".join(problems))

    def step_count(self) -> int:
        if self.inner_unit == 'steps':
            return self.inner_steps
        return self.inner_steps * math.ceil(self.ways * self.shots / self.inner_batch)

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, learning_rate=self.inner_lr)


@dataclass
class FineTuneConfig:
    steps: int = 50
    batch_size: int = 10
    learning_rate: float = 0.001
    optimizer: str = 'adam'

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("fine-tune steps, batch size and learning rate must be non-negative")
        if self.optimizer not in ('adam', 'sgd'):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, learning_rate=self.learning_rate)


def batch_schedule(count: int, batch: int, steps: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Index batches for `steps` steps, reshuffling at every pass over the data."""
    batches = []
    order = rng.permutation(count)
    position = 0
    for _ in range(steps):
        if position + batch > count:
            order = rng.permutation(count)
            position = 0
        batches.append(order[position:position + batch])
        position += batch
    return batches


def train_steps(params: ParamVector, spec: NetworkSpec, x: np.ndarray, labels: np.ndarray,
                steps: int, batch: int, optimizer: OptimizerState, seed: int,
                after_step: Optional[Callable[[ParamVector, int, float], None]] = None) -> ParamVector:
    """Supervised steps on (x, slot labels); the caller's parameters are untouched."""
    rng = np.random.default_rng(seed)
    targets = one_hot(labels, spec.ways)
    state = optimizer
    current = params
    for step, index in enumerate(batch_schedule(len(labels), min(batch, len(labels)), steps, rng), 1):
        logits, cache = forward(current, spec, x[index], mode='train')
        loss, grad = softmax_cross_entropy(logits, targets[index])
        current, state = optimizer_step(state, current, backward(cache, grad))
        if after_step is not None:
            after_step(current, step, loss)
    return current.copy() if current is params else current


def inner_train(start: ParamVector, episode: Episode, cfg: ReptileConfig, spec: NetworkSpec,
                seed: int) -> ParamVector:
    """Parameters after cfg.step_count() optimizer steps on the episode's support set."""
    if len(episode.support_y) == 0:
        raise SpecError("episode has an empty support set")
    if spec.head != 'classifier' or spec.ways != episode.ways:
        raise SpecError(f"classifier head with {spec.ways} outputs cannot train a {episode.ways}-way episode")
    return train_steps(start, spec, episode.support_x, episode.support_y, cfg.step_count(),
                       cfg.inner_batch, cfg.new_optimizer(), seed)


def reptile_outer_update(theta: ParamVector, episode_models: Sequence[ParamVector],
                         outer_lr: float) -> ParamVector:
    """(1 - eps) * theta + eps / B * sum of episode models.

    The sum is taken over sorted values in float64, so any ordering of
    episode_models gives the same bits.
    """
    if not episode_models:
        raise ValueError("outer update needs at least one episode model")
    for model in episode_models:
        theta.check_compatible(model)
    stacked = np.sort(np.stack([m.values.astype(np.float64) for m in episode_models]), axis=0)
    total = stacked.sum(axis=0)
    updated = (1.0 - outer_lr) * theta.values.astype(np.float64) + outer_lr / len(episode_models) * total
    return ParamVector(updated.astype(theta.dtype), theta.layout).ensure_finite('outer update')


def default_episode_source(dataset: Dataset, cfg: ReptileConfig,
                           constraints: Optional[EpisodeConstraints] = None) -> EpisodeSource:
    constraints = constraints or META_TRAIN

    def source(index: int, seed: int) -> Episode:
        return sample_episode(dataset, cfg.ways, cfg.shots, seed, constraints)

    return source


def local_meta_train(theta_start: ParamVector, dataset: Optional[Dataset], cfg: ReptileConfig,
                     spec: NetworkSpec, seed: int,
                     episode_source: Optional[EpisodeSource] = None) -> ParamVector:
    """cfg.episodes Reptile episodes in meta-batches of cfg.meta_batch.

    Episode j is sampled with derive_seed(seed, 'episode', j) and trained with
    derive_seed(seed, 'inner', j). A trailing partial meta-batch is averaged
    over its own size.
    """
    if episode_source is None:
        if dataset is None:
            raise ValueError("local meta-training needs a dataset or an episode source")
        episode_source = default_episode_source(dataset, cfg)
    theta = theta_start.copy()
    done = 0
    while done < cfg.episodes:
        size = min(cfg.meta_batch, cfg.episodes - done)
        models = []
        for j in range(done, done + size):
            episode = episode_source(j, derive_seed(seed, 'episode', j))
            models.append(inner_train(theta, episode, cfg, spec, derive_seed(seed, 'inner', j)))
        theta = reptile_outer_update(theta, models, cfg.outer_lr)
        done += size
    logger.debug(f"Local meta-training finished {done} episodes, moved {(theta - theta_start).norm():.4f}")
    return theta


def support_norm_stats(params: ParamVector, spec: NetworkSpec, support_x: np.ndarray):
    _, cache = forward(params, spec, support_x, mode='train')
    return cache.norm_stats


def predict_logits(params: ParamVector, spec: NetworkSpec, support_x: np.ndarray,
                   x: np.ndarray) -> np.ndarray:
    """Eval-mode outputs normalised with support-set statistics."""
    if len(x) == 0:
        return np.zeros((0, spec.ways))
    stats = support_norm_stats(params, spec, support_x)
    logits, _ = forward(params, spec, x, mode='eval', norm_stats=stats)
    return logits


def classify(params: ParamVector, spec: NetworkSpec, support_x: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Predicted slot for every row of x; ties go to the lowest slot."""
    return np.argmax(predict_logits(params, spec, support_x, x), axis=1)


def support_loss(params: ParamVector, spec: NetworkSpec, episode: Episode) -> float:
    """Train-mode cross-entropy over the whole support set."""
    logits, _ = forward(params, spec, episode.support_x, mode='train')
    loss, _ = softmax_cross_entropy(logits, one_hot(episode.support_y, spec.ways))
    return loss


def query_accuracy(params: ParamVector, spec: NetworkSpec, episode: Episode) -> float:
    predicted = classify(params, spec, episode.support_x, episode.query_x)
    return float(np.mean(predicted == episode.query_y))


def fine_tune_and_eval(theta: ParamVector, episode: Episode, ftcfg: FineTuneConfig, spec: NetworkSpec,
                       seed: int, hook: Optional[MetricHook] = None,
                       metric: str = 'main_task') -> Tuple[ParamVector, List[MetricsRecord]]:
    """Fine-tune a copy of theta on the support set, recording query accuracy
    at iteration 0 and after every step (steps + 1 records).

    `hook(params, iteration)` may add further metrics to each record.
    """
    if len(episode.query_y) == 0:
        raise SpecError("fine-tune evaluation needs a query set")
    if theta.layout != spec.layout():
        raise LayoutMismatchError("parameters do not match the network specification")
    records: List[MetricsRecord] = []

    def record(params: ParamVector, iteration: int):
        values = {metric: query_accuracy(params, spec, episode)}
        if hook is not None:
            values.update(hook(params, iteration))
        records.append(MetricsRecord(iteration=iteration, **values))

    record(theta, 0)
    adapted = train_steps(theta, spec, episode.support_x, episode.support_y, ftcfg.steps,
                          ftcfg.batch_size, ftcfg.new_optimizer(), seed,
                          after_step=lambda params, step, loss: record(params, step))
    return adapted, records
