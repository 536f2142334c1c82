"""Built-in oracle checks run by ``cmaml selftest``.

Gradients are compared against central finite differences of a plain numpy
re-implementation of the network; the schedule against the incremental
update loop.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .curriculum import CurriculumConfig, build_schedule, recurrence_equivalence_check
from .maml import InnerConfig, meta_gradient
from .model import FfnSpec, forward, init_params
from .tasks import Episode


def _np_loss(params, x, y):
    n = len(params) // 2
    h = x
    for i in range(n):
        h = h @ params[f"W{i}"].T + params[f"b{i}"]
        if i < n - 1:
            h = np.maximum(h, 0.0)
    z = h - h.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def _central_diff(fn, flat, h):
    out = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        out[i] = (fn(flat + e) - fn(flat - e)) / (2 * h)
    return out


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def first_order_check(nets: int = 20) -> float:
    worst = 0.0
    for seed in range(nets):
        r = np.random.default_rng(seed)
        spec = FfnSpec(int(r.integers(2, 6)), tuple(int(v) for v in r.integers(2, 7, size=int(r.integers(1, 4)))),
                       int(r.integers(2, 5)))
        params = init_params(spec, seed).map(lambda a: a + 0.1 * r.normal(size=a.shape))
        x = r.normal(size=(3, spec.input_dim))
        y = r.integers(0, spec.output_dim, size=3)
        g = Graph()
        pv = params.as_vars(g)
        loss = ad.cross_entropy_loss(forward(pv, x, g), y)
        analytic = np.concatenate([a.ravel() for a in ad.backward(loss, list(pv.values()))])
        numeric = _central_diff(lambda f: _np_loss(dict(params.unflatten(f).items()), x, y),
                                params.flat(), 1e-5)
        worst = max(worst, _rel(analytic, numeric))
    return worst


def meta_gradient_check(seed: int = 0) -> float:
    r = np.random.default_rng(seed)
    spec = FfnSpec(4, (8, 6), 3)
    params = init_params(spec, seed).map(lambda a: a + 0.1 * r.normal(size=a.shape))
    sx, qx = r.normal(size=(6, 4)), r.normal(size=(6, 4))
    sy = qy = np.repeat(np.arange(3), 2)
    ep = Episode(3, 2, 2, sx, sy, qx, qy)
    cfg = InnerConfig(0.4)
    analytic = meta_gradient(params, [ep], cfg).meta_grads.flat()

    def inner_grad(flat):
        g = Graph()
        pv = params.unflatten(flat).as_vars(g)
        loss = ad.cross_entropy_loss(forward(pv, sx, g), sy)
        return np.concatenate([a.ravel() for a in ad.backward(loss, list(pv.values()))])

    def outer(flat):
        adapted = flat - cfg.inner_lr * inner_grad(flat)
        return _np_loss(dict(params.unflatten(adapted).items()), qx, qy)

    return _rel(analytic, _central_diff(outer, params.flat(), 1e-5))


def quadratic_maml_check() -> float:
    """Scalar quadratic losses: the MAML gradient is ``(1 - alpha h_s) * dL_q(theta')``."""
    theta, alpha = 0.7, 0.3
    h_s, c_s = 2.5, 1.2  # support loss 0.5 h_s (t - c_s)^2
    h_q, c_q = 1.5, -0.4  # query loss 0.5 h_q (t - c_q)^2
    g = Graph()
    t = g.variable(theta)
    support = ad.scale(ad.mul(ad.square(ad.sub(t, g.constant(c_s))), g.constant(h_s)), 0.5)
    (gs,) = ad.backward(support, [t], create_graph=True)
    adapted = ad.sub(t, ad.scale(gs, alpha))
    query = ad.scale(ad.mul(ad.square(ad.sub(adapted, g.constant(c_q))), g.constant(h_q)), 0.5)
    (meta,) = ad.backward(query, [t])
    t_adapted = theta - alpha * h_s * (theta - c_s)
    expected = (1 - alpha * h_s) * h_q * (t_adapted - c_q)
    return abs(float(meta) - expected)


def schedule_check() -> bool:
    sched = build_schedule(CurriculumConfig(5, 5, 60000, 0.5))
    ok = sched.boundaries == [7500, 15000, 22500, 30000]
    ok &= [s.support_size for s in sched] == [25, 20, 15, 10, 5]
    ok &= all(abs(s.inner_lr - 0.5 * math.sqrt(5 - s.index)) < 1e-12 for s in sched)
    ok &= all(recurrence_equivalence_check(CurriculumConfig(m, shot, n, 0.5))
              for m in range(1, 21) for shot in (1, 5, 10) for n in (1000, 60000))
    return bool(ok)


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    err = first_order_check()
    results.append(("first-order gradients vs finite differences", err < 1e-4, f"max rel err {err:.2e}"))
    err = meta_gradient_check()
    results.append(("second-order meta-gradient vs finite differences", err < 1e-3, f"rel err {err:.2e}"))
    err = quadratic_maml_check()
    results.append(("quadratic-task analytic MAML gradient", err < 1e-10, f"abs err {err:.2e}"))
    ok = schedule_check()
    results.append(("schedule closed form vs update recurrence", ok, "M=1..20, shot 1/5/10"))
    return results
