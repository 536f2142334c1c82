"""MAML inner adaptation and meta-update with exact second-order gradients."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var
from .model import ParameterSet, axpy, forward
from .tasks import Episode, TaskDistribution


@dataclass(frozen=True)
class InnerConfig:
    inner_lr: float = 0.5
    inner_steps: int = 1
    first_order: bool = False

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.inner_lr < 0:
            raise ValueError(f"inner_lr must be non-negative, got {self.inner_lr}")


@dataclass
class MetaBatchResult:
    meta_loss: float
    meta_grads: ParameterSet
    query_accuracies: list[float]


def task_loss(params, x, y, graph: Graph, regression: bool = False) -> Var:
    out = forward(params, x, graph)
    if regression:
        return ad.mse_loss(out, y)
    return ad.cross_entropy_loss(out, y)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def inner_adapt(theta, episode: Episode, cfg: InnerConfig, graph: Graph,
                loss_fn=None) -> dict[str, Var]:
    """Gradient-descent steps on the support set.

    ``theta`` is a :class:`ParameterSet` or a name -> :class:`Var` mapping in
    ``graph``. Unless ``cfg.first_order`` is set, the update is recorded so a
    later backward pass reaches the original parameters through it. The input
    parameters are never modified.

    ``loss_fn(params, x, y, graph)`` replaces the network loss; by default the
    feed-forward net is scored with cross-entropy (or MSE for regression).
    """
    if isinstance(theta, ParameterSet):
        theta = theta.as_vars(graph)
    params: Mapping[str, Var] = dict(theta)
    if cfg.inner_lr == 0.0:
        return dict(params)
    for _ in range(cfg.inner_steps):
        if loss_fn is None:
            loss = task_loss(params, episode.support_x, episode.support_y, graph, episode.regression)
        else:
            loss = loss_fn(params, episode.support_x, episode.support_y, graph)
        grads = ad.backward(loss, list(params.values()), create_graph=not cfg.first_order)
        params = axpy(params, grads, cfg.inner_lr)
    return params


class SGD:
    """Plain gradient descent, ``theta <- theta - lr * grad``."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        return params.axpy(grads, self.lr)


class Adam:
    """Adaptive-moment optimizer for the outer loop (off by default)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        params._check(grads)
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads.arrays]
            self.v = [np.zeros_like(g) for g in grads.arrays]
        self.t += 1
        out = []
        for i, (name, p) in enumerate(params.items()):
            g = grads.arrays[i]
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append((name, p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)))
        return ParameterSet(out)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CMAML_THREADS", "1")))
    except ValueError:
        return 1


def _episode_meta_grad(theta: ParameterSet, episode: Episode, cfg: InnerConfig, loss_fn=None):
    graph = Graph()
    params = theta.as_vars(graph)
    adapted = inner_adapt(params, episode, cfg, graph, loss_fn)
    if loss_fn is not None:
        loss = loss_fn(adapted, episode.query_x, episode.query_y, graph)
        acc = None
    elif episode.regression:
        out = forward(adapted, episode.query_x, graph)
        loss = ad.mse_loss(out, episode.query_y)
        acc = None
    else:
        out = forward(adapted, episode.query_x, graph)
        loss = ad.cross_entropy_loss(out, episode.query_y)
        acc = accuracy(out.value, episode.query_y)
    grads = ad.backward(loss, list(params.values()))
    return float(loss.value), grads, acc


def meta_gradient(theta: ParameterSet, episodes: Sequence[Episode], cfg: InnerConfig,
                  loss_fn=None) -> MetaBatchResult:
    """Mean query loss of the adapted models and its gradient w.r.t. ``theta``."""
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    threads = min(_threads(), len(episodes))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda ep: _episode_meta_grad(theta, ep, cfg, loss_fn), episodes))
    else:
        results = [_episode_meta_grad(theta, ep, cfg, loss_fn) for ep in episodes]
    # fixed-order reduction keeps results independent of thread count
    n = len(results)
    total = [np.zeros_like(a) for a in theta.arrays]
    for _, grads, _ in results:
        for acc_arr, g in zip(total, grads):
            acc_arr += g
    meta_grads = ParameterSet((name, t / n) for name, t in zip(theta.names, total))
    meta_loss = float(np.mean([r[0] for r in results]))
    accs = [r[2] for r in results if r[2] is not None]
    return MetaBatchResult(meta_loss, meta_grads, accs)


def meta_step(theta: ParameterSet, episodes: Sequence[Episode], inner_cfg: InnerConfig,
              outer_lr: float, optimizer=None, loss_fn=None) -> tuple[ParameterSet, MetaBatchResult]:
    """One outer update. ``optimizer`` defaults to plain gradient descent with ``outer_lr``."""
    result = meta_gradient(theta, episodes, inner_cfg, loss_fn)
    if optimizer is None:
        new_theta = theta.axpy(result.meta_grads, outer_lr) if outer_lr != 0.0 else theta
    else:
        new_theta = optimizer.step(theta, result.meta_grads)
    return new_theta, result


def adapt_and_predict(theta: ParameterSet, episode: Episode, cfg: InnerConfig) -> np.ndarray:
    """Query-set outputs after adapting on the support set (no meta-graph kept)."""
    graph = Graph()
    adapted = inner_adapt(theta, episode, replace(cfg, first_order=True), graph)
    return forward(adapted, episode.query_x, graph).value


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation confidence half-width."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("confidence interval needs at least 2 values")
    return float(values.mean()), float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def evaluate(theta: ParameterSet, dist: TaskDistribution, way: int, k: int, l: int,
             episodes: int, inner_cfg: InnerConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Meta-test accuracy: adapt on ``k`` shots, score on ``l`` queries per class."""
    if episodes < 2:
        raise ValueError(f"evaluate needs episodes >= 2 for a confidence interval, got {episodes}")
    accs = []
    for _ in range(episodes):
        ep = dist.sample_episode(way, k, l, rng)
        accs.append(accuracy(adapt_and_predict(theta, ep, inner_cfg), ep.query_y))
    return mean_ci(accs)


def evaluate_regression(theta: ParameterSet, dist: TaskDistribution, k: int, l: int,
                        tasks: int, inner_cfg: InnerConfig,
                        rng: np.random.Generator) -> tuple[float, float]:
    """Mean query MSE before and after adaptation, over ``tasks`` sampled tasks."""
    pre, post = [], []
    for _ in range(tasks):
        ep = dist.sample_episode(1, k, l, rng)
        graph = Graph()
        before = forward(theta, ep.query_x, graph).value
        after = adapt_and_predict(theta, ep, inner_cfg)
        pre.append(np.mean((before - ep.query_y) ** 2))
        post.append(np.mean((after - ep.query_y) ** 2))
    return float(np.mean(pre)), float(np.mean(post))
