"""
Matching-network defense.

A user drops the received classifier layer, mixes the remaining embedding
weights with a fresh Glorot sample and classifies queries as an attention
mixture of support labels. Attention is a softmax over gated cosine
similarities scaled per class:

    s_i = cos(gates * f(query), f(x_i)) * scales[class(x_i)]

Gates are clamped to [0, 1] after every update.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .episodes import Episode
from .errors import DefenseError
from .meta_reptile import support_norm_stats
from .nn_core import (
    CLASSIFIER_PREFIX,
    NetworkSpec,
    OptimizerState,
    ParamVector,
    backward,
    forward,
    glorot_init,
    one_hot,
    optimizer_step,
    softmax,
)
from .records import MetricsRecord
from .seeding import derive_seed

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12

DefenseHook = Callable[[ParamVector, 'MatchingHead', int], Dict[str, float]]


@dataclass
class NoisyInitConfig:
    mix: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise DefenseError(f"mixing coefficient {self.mix} outside [0, 1]")


@dataclass
class MatchingConfig:
    mix: float = 0.3
    stage1_iterations: int = 20
    stage2_iterations: int = 50
    learning_rate: float = 0.001
    head_learning_rate: Optional[float] = None
    optimizer: str = 'adam'

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise DefenseError(f"mixing coefficient {self.mix} outside [0, 1]")
        if self.stage1_iterations < 0 or self.stage2_iterations < 0:
            raise DefenseError("stage iteration counts must be >= 0")
        if self.optimizer not in ('adam', 'sgd'):
            raise DefenseError(f"unknown optimizer {self.optimizer!r}")

    @property
    def head_lr(self) -> float:
        return self.learning_rate if self.head_learning_rate is None else self.head_learning_rate


@dataclass
class MatchingHead:
    gates: np.ndarray
    scales: np.ndarray
    support_embeddings: np.ndarray
    support_labels: np.ndarray

    def __post_init__(self):
        self.gates = np.clip(np.asarray(self.gates, dtype=np.float64), 0.0, 1.0)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.support_embeddings = np.asarray(self.support_embeddings, dtype=np.float64)
        self.support_labels = np.asarray(self.support_labels, dtype=np.int64)
        if len(self.support_labels) == 0:
            raise DefenseError("matching head has an empty support set")
        if self.support_embeddings.shape != (len(self.support_labels), len(self.gates)):
            raise DefenseError("support embeddings do not match the gate dimension")
        if self.support_labels.max() >= len(self.scales):
            raise DefenseError("a support label has no scale factor")

    @classmethod
    def initial(cls, support_embeddings: np.ndarray, support_labels: np.ndarray, ways: int) -> 'MatchingHead':
        dim = np.shape(support_embeddings)[1]
        return cls(np.ones(dim), np.ones(ways), support_embeddings, support_labels)

    @property
    def ways(self) -> int:
        return len(self.scales)

    def head_vector(self) -> ParamVector:
        return ParamVector.from_segments([('head.gates', self.gates), ('head.scales', self.scales)],
                                         dtype=np.float64)

    def checkpoint_extra(self) -> Dict[str, np.ndarray]:
        return {'head.gates': self.gates, 'head.scales': self.scales}


def noisy_reinit(theta: ParamVector, cfg: NoisyInitConfig, spec: NetworkSpec) -> ParamVector:
    """mix * theta + (1 - mix) * fresh Glorot parameters."""
    fresh = glorot_init(spec, cfg.seed, dtype=theta.dtype)
    theta.check_compatible(fresh)
    mixed = cfg.mix * theta.values.astype(np.float64) + (1.0 - cfg.mix) * fresh.values.astype(np.float64)
    return ParamVector(mixed.astype(theta.dtype), theta.layout)


def embedding_params(theta: ParamVector) -> ParamVector:
    """Drop the classifier segments."""
    return theta.select([name for name in theta.names if not name.startswith(CLASSIFIER_PREFIX)])


def _normalize(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    safe = np.where(norms > NORM_FLOOR, norms, 1.0)
    unit = np.where(norms > NORM_FLOOR, rows / safe, 0.0)
    return unit, safe


def similarity_scores(query: np.ndarray, gates: np.ndarray, scales: np.ndarray,
                      support: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(Q, S) gated cosine scores times the per-class scale."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    gated, _ = _normalize(query * gates)
    unit_support, _ = _normalize(np.asarray(support, dtype=np.float64))
    return (gated @ unit_support.T) * scales[labels][None, :]


def attention(query: np.ndarray, head: MatchingHead) -> np.ndarray:
    """Softmax weights over the support set, one row per query embedding."""
    scores = similarity_scores(query, head.gates, head.scales, head.support_embeddings, head.support_labels)
    return softmax(scores, axis=1)


def predict(query: np.ndarray, head: MatchingHead) -> Tuple[np.ndarray, np.ndarray]:
    """Mixture of support one-hots and the argmax slot (lowest slot on ties)."""
    weights = attention(query, head)
    scores = weights @ one_hot(head.support_labels, head.ways)
    return scores, np.argmax(scores, axis=1)


def matching_loss(gates: np.ndarray, scales: np.ndarray, query: np.ndarray, query_labels: np.ndarray,
                  support: np.ndarray, support_labels: np.ndarray, ways: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Cross-entropy of the mixture output and its gradients.

    Returns gradients w.r.t. gates, scales and the raw query and support
    embeddings.
    """
    query = np.asarray(query, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    gates = np.asarray(gates, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    n_query = len(query_labels)

    gated = query * gates
    unit_q, norm_q = _normalize(gated)
    unit_s, norm_s = _normalize(support)
    cosine = unit_q @ unit_s.T
    scores = cosine * scales[support_labels][None, :]
    weights = softmax(scores, axis=1)
    match = (support_labels[None, :] == np.asarray(query_labels)[:, None]).astype(np.float64)
    p_true = np.maximum((weights * match).sum(axis=1, keepdims=True), NORM_FLOOR)
    loss = float(-np.log(p_true).sum() / n_query)

    d_scores = (weights - weights * match / p_true) / n_query
    d_cosine = d_scores * scales[support_labels][None, :]
    d_scales = np.bincount(support_labels, weights=(d_scores * cosine).sum(axis=0), minlength=ways)

    d_unit_q = d_cosine @ unit_s
    d_unit_s = d_cosine.T @ unit_q
    d_gated = (d_unit_q - unit_q * (d_unit_q * unit_q).sum(axis=1, keepdims=True)) / norm_q
    d_support = (d_unit_s - unit_s * (d_unit_s * unit_s).sum(axis=1, keepdims=True)) / norm_s
    return loss, {
        'gates': (d_gated * query).sum(axis=0),
        'scales': d_scales,
        'query': d_gated * gates,
        'support': d_support,
    }


def matching_objective(params: ParamVector, spec: NetworkSpec, gates: np.ndarray, scales: np.ndarray,
                       support_x: np.ndarray, support_y: np.ndarray, query_x: np.ndarray,
                       query_y: np.ndarray, ways: int) -> Tuple[float, ParamVector, Dict[str, np.ndarray]]:
    """Loss with gradients for the embedding parameters, gates and scales.

    Support and query go through one train-mode forward pass.
    """
    batch = np.concatenate([support_x, query_x])
    features, cache = forward(params, spec, batch, mode='train')
    n_support = len(support_y)
    loss, grads = matching_loss(gates, scales, features[n_support:], query_y,
                                features[:n_support], support_y, ways)
    upstream = np.concatenate([grads['support'], grads['query']])
    return loss, backward(cache, upstream), grads


def embed_support_and_queries(params: ParamVector, spec: NetworkSpec, support_x: np.ndarray,
                              x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings of support and x under support-set statistics."""
    stats = support_norm_stats(params, spec, support_x)
    support, _ = forward(params, spec, support_x, mode='eval', norm_stats=stats)
    if len(x) == 0:
        return support, np.zeros((0, support.shape[1]))
    queries, _ = forward(params, spec, x, mode='eval', norm_stats=stats)
    return support, queries


def refresh_head(head: MatchingHead, params: ParamVector, spec: NetworkSpec, support_x: np.ndarray) -> MatchingHead:
    support, _ = embed_support_and_queries(params, spec, support_x, support_x[:0])
    return MatchingHead(head.gates, head.scales, support, head.support_labels)


def matching_classify(params: ParamVector, spec: NetworkSpec, head: MatchingHead,
                      support_x: np.ndarray, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    _, queries = embed_support_and_queries(params, spec, support_x, x)
    return predict(queries, head)[1]


def holdout_split(labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Indices: one query per class, the rest support."""
    query = []
    for c in np.unique(labels):
        query.append(int(rng.choice(np.flatnonzero(labels == c))))
    query = np.array(sorted(query))
    support = np.setdiff1d(np.arange(len(labels)), query)
    return support, query


def staged_fine_tune(theta: ParamVector, episode: Episode, cfg: MatchingConfig, spec: NetworkSpec, seed: int,
                     hook: Optional[DefenseHook] = None) -> Tuple[ParamVector, MatchingHead, List[MetricsRecord]]:
    """Noisy re-initialisation, then gates/scales alone, then everything jointly.

    Returns the embedding parameters, the trained head and one record per
    iteration (iteration 0 is before any update).
    """
    if len(episode.support_y) == 0:
        raise DefenseError("defense needs a nonempty support set")
    counts = np.bincount(episode.support_y, minlength=episode.ways)
    if counts.min() < 2:
        raise DefenseError("support set needs at least 2 examples per class to hold one out")

    emb_spec = spec.as_embedding()
    noise = NoisyInitConfig(cfg.mix, derive_seed(seed, 'glorot'))
    params = noisy_reinit(embedding_params(theta), noise, emb_spec)
    support_x, support_y = episode.support_x, episode.support_y
    support, _ = embed_support_and_queries(params, emb_spec, support_x, support_x[:0])
    head = MatchingHead.initial(support, support_y, episode.ways)

    rng = np.random.default_rng(derive_seed(seed, 'splits'))
    head_state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.head_lr)
    net_state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    records: List[MetricsRecord] = []

    def record(iteration: int):
        values = {}
        if len(episode.query_y):
            predicted = matching_classify(params, emb_spec, head, support_x, episode.query_x)
            values['main_task'] = float(np.mean(predicted == episode.query_y))
        if hook is not None:
            values.update(hook(params, head, iteration))
        records.append(MetricsRecord(iteration=iteration, **values))

    record(0)
    total = cfg.stage1_iterations + cfg.stage2_iterations
    for iteration in range(1, total + 1):
        joint = iteration > cfg.stage1_iterations
        s_idx, q_idx = holdout_split(support_y, rng)
        loss, net_grads, grads = matching_objective(
            params, emb_spec, head.gates, head.scales, support_x[s_idx], support_y[s_idx],
            support_x[q_idx], support_y[q_idx], episode.ways)
        head_grads = ParamVector.from_segments([('head.gates', grads['gates']), ('head.scales', grads['scales'])],
                                               dtype=np.float64)
        updated, head_state = optimizer_step(head_state, head.head_vector(), head_grads)
        if joint:
            params, net_state = optimizer_step(net_state, params, net_grads)
        head = MatchingHead(updated.segment('head.gates'), updated.segment('head.scales').copy(),
                            head.support_embeddings, head.support_labels)
        if joint:
            head = refresh_head(head, params, emb_spec, support_x)
        logger.debug(f"Defense iteration {iteration} ({'joint' if joint else 'head'}): loss {loss:.4f}")
        record(iteration)
    return params, head, records
