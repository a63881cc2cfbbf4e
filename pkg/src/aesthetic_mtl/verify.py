"""Self-check suites run by ``aesthetic-mtl verify``.

Each suite returns a list of :class:`Check` results. The analytic paths are
compared against independent references: central finite differences, simplex
grid search, loop-based statistics.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics, nn_core, score_dist
from .data import SampleBatch
from .moo import frank_wolfe_min_norm
from .nn_core import REPRESENTATION, SHARED, Architecture, backward_task, encode_with_cache, encoder_vjp, init_params
from .preprocess import fit_size, multi_patch, pad_and_rescale
from .score_dist import EmdConfig, emd_grad_logits, emd_loss, softmax

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name}" + (f" ({self.detail})" if self.detail else "")


class _Hooks:
    corrupt_gradient = False


hooks = _Hooks()


def _maybe_corrupt(g: np.ndarray) -> np.ndarray:
    if hooks.corrupt_gradient:
        g = g.copy()
        g.flat[0] += 1e-3 + abs(g.flat[0])
    return g


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------

def suite_emd_grad(seed=0, cases=100):
    rng = np.random.default_rng(seed)
    worst, worst_case = 0.0, None
    t0 = time.perf_counter()
    for i in range(cases):
        y = rng.dirichlet(np.ones(5))
        z = rng.normal(scale=1.5, size=5)
        cfg = EmdConfig(float(1 + i % 2))
        g = _maybe_corrupt(emd_grad_logits(y, z, cfg))
        fd = central_diff(lambda zz: emd_loss(y, softmax(zz), cfg), z)
        e = rel_err(g, fd)
        if e > worst:
            worst, worst_case = e, i
    dt = time.perf_counter() - t0
    return [Check("emd-grad", f"{cases} cases vs central differences", worst <= GRAD_RTOL,
                  f"worst relative error {worst:.2e} at case {worst_case}, {dt:.2f}s")]


def suite_emd_props(seed=0, triples=1000):
    rng = np.random.default_rng(seed)
    out = []
    ok_id = ok_sym = ok_nonneg = ok_cdf = True
    for _ in range(200):
        a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        for r in (1.0, 2.0, 3.5):
            cfg = EmdConfig(r)
            ok_id &= emd_loss(a, a, cfg) <= 1e-9
            ok_sym &= abs(emd_loss(a, b, cfg) - emd_loss(b, a, cfg)) <= 1e-12
            ok_nonneg &= emd_loss(a, b, cfg) >= 0
        c = score_dist.cdf(a)
        ok_cdf &= bool(np.all(np.diff(c) >= 0) and abs(c[-1] - 1) <= 1e-9)
    out += [Check("emd-props", "identity", bool(ok_id)), Check("emd-props", "symmetry", bool(ok_sym)),
            Check("emd-props", "non-negativity", bool(ok_nonneg)), Check("emd-props", "cdf monotone, ends at 1", bool(ok_cdf))]
    cfg1 = EmdConfig(1.0)
    viol = 0
    for _ in range(triples):
        a, b, c = (rng.dirichlet(np.ones(5)) for _ in range(3))
        if emd_loss(a, c, cfg1) > emd_loss(a, b, cfg1) + emd_loss(b, c, cfg1) + 1e-12:
            viol += 1
    out.append(Check("emd-props", f"triangle inequality (r=1, {triples} triples)", viol == 0, f"{viol} violations"))
    return out


def random_small_net(rng, T=4, max_params=500) -> Architecture:
    while True:
        d_in = int(rng.integers(3, 9))
        sizes = tuple(int(s) for s in rng.integers(3, 8, size=int(rng.integers(1, 3))))
        act = ("tanh", "relu")[int(rng.integers(0, 2))]
        arch = Architecture(d_in, sizes, activation=act, n_tasks=T)
        if arch.n_shared + T * arch.n_head <= max_params:
            return arch


def random_batch(rng, arch: Architecture, B=4) -> SampleBatch:
    X = rng.uniform(size=(B, arch.input_dim))
    Y = rng.dirichlet(np.ones(5), size=(arch.n_tasks, B))
    return SampleBatch(X, Y)


def suite_net_grad(seed=0, nets=20):
    rng = np.random.default_rng(seed)
    cfg = EmdConfig(2.0)
    worst_sh = worst_rep = worst_chain = 0.0
    t0 = time.perf_counter()
    for _ in range(nets):
        arch = random_small_net(rng)
        params = init_params(arch, rng)
        params = params.with_flat(params.flat() + rng.normal(scale=0.1, size=params.size))
        batch = random_batch(rng, arch)
        reps, cache = encode_with_cache(params, batch)
        for t in range(arch.n_tasks):
            g_sh = _maybe_corrupt(backward_task(params, batch, t, cfg, SHARED))

            def loss_sh(v):
                p = params.copy()
                p.shared = v
                return _task_loss(p, batch, t, cfg)

            worst_sh = max(worst_sh, rel_err(g_sh, central_diff(loss_sh, params.shared)))

            g_rep = backward_task(params, batch, t, cfg, REPRESENTATION)

            def loss_rep(flat_reps):
                logits = nn_core.head_forward(params, t, flat_reps.reshape(reps.shape))
                return float(np.mean(score_dist.emd_loss_batch(batch.targets[t], softmax(logits), cfg.r)))

            worst_rep = max(worst_rep, rel_err(g_rep, central_diff(loss_rep, reps.ravel())))
            chained = encoder_vjp(params, cache, g_rep.reshape(reps.shape))
            worst_chain = max(worst_chain, float(np.max(np.abs(chained - g_sh))))
    dt = time.perf_counter() - t0
    return [
        Check("net-grad", f"shared-parameter gradient, {nets} nets x 4 tasks", worst_sh <= GRAD_RTOL, f"worst {worst_sh:.2e}"),
        Check("net-grad", "representation gradient", worst_rep <= GRAD_RTOL, f"worst {worst_rep:.2e}"),
        Check("net-grad", "chain rule: representation -> shared", worst_chain <= 1e-8, f"max abs diff {worst_chain:.2e}, {dt:.2f}s"),
    ]


def _task_loss(params, batch, t, cfg):
    reps = nn_core.encode(params, batch)
    logits = nn_core.head_forward(params, t, reps)
    return float(np.mean(score_dist.emd_loss_batch(batch.targets[t], softmax(logits), cfg.r)))


def simplex_grid(T: int, step: float = 0.01) -> np.ndarray:
    n = int(round(1 / step))
    pts = [c for c in itertools.product(range(n + 1), repeat=T - 1) if sum(c) <= n]
    pts = np.array(pts, dtype=float)
    return np.column_stack([pts, n - pts.sum(axis=1)]) / n


def suite_fw_oracle(seed=0, cases=100):
    rng = np.random.default_rng(seed)
    grids = {T: simplex_grid(T) for T in (2, 3)}
    worst_over, worst_res = -np.inf, -np.inf
    for _ in range(cases):
        T = int(rng.integers(2, 4))
        dim = int(rng.integers(1, 6))
        G = rng.normal(size=(T, dim)) + rng.normal(size=dim) * rng.uniform(0, 2)
        rep = frank_wolfe_min_norm(G)
        grid = np.linalg.norm(grids[T] @ G, axis=1).min()
        worst_over = max(worst_over, rep.combined_norm - grid)
        # grid points lie within step * (T - 1) in L1 of any simplex point
        worst_res = max(worst_res, grid - rep.combined_norm - 0.01 * (T - 1) * np.abs(G).sum(axis=1).max())
    hull = frank_wolfe_min_norm(np.array([[1.0, 0.0], [-1.0, 1.0], [-1.0, -1.0]]))
    return [
        Check("fw-oracle", f"solver <= grid + 1e-4 on {cases} instances", worst_over <= 1e-4, f"worst excess {worst_over:.2e}"),
        Check("fw-oracle", "grid within its resolution of solver", worst_res <= 0, f"worst {worst_res:.2e}"),
        Check("fw-oracle", "origin-in-hull instance", hull.combined_norm < 1e-3, f"norm {hull.combined_norm:.2e}"),
    ]


def suite_support(seed=0, cases=50):
    rng = np.random.default_rng(seed)
    worst, n_conv = -np.inf, 0
    for _ in range(cases):
        dim = int(rng.integers(2, 30))
        G = rng.normal(size=(4, dim)) + rng.normal(size=dim) * rng.uniform(0, 2)
        rep = frank_wolfe_min_norm(G)
        if not rep.converged:
            continue
        n_conv += 1
        d = rep.delta.delta @ G
        worst = max(worst, float(d @ d - (G @ d).min()))
    return [Check("support", f"g_t . d >= |d|^2 - 1e-6 ({n_conv}/{cases} converged)",
                  n_conv == cases and worst <= 1e-6, f"worst violation {worst:.2e}")]


def _loop_pcc(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va * vb) ** 0.5


def _loop_ranks(a):
    ranks = [0.0] * len(a)
    for i, x in enumerate(a):
        less = sum(1 for y in a if y < x)
        equal = sum(1 for y in a if y == x)
        ranks[i] = less + (equal + 1) / 2
    return ranks


def suite_metrics(seed=0, cases=50):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(3, 40))
        a = rng.normal(size=n)
        b = np.round(rng.normal(size=n) + a, 1)  # rounding creates ties
        ref = (_loop_pcc(a, b), _loop_pcc(_loop_ranks(a), _loop_ranks(b)),
               (sum((x - y) ** 2 for x, y in zip(a, b)) / n) ** 0.5)
        got = (metrics.pcc(a, b), metrics.scc(a, b), metrics.rmse(a, b))
        worst = max(worst, max(abs(x - y) for x, y in zip(got, ref)))
    return [Check("metrics", f"PCC/SCC/RMSE vs loop recomputation ({cases} cases)", worst <= 1e-10, f"worst {worst:.2e}")]


def suite_preprocess(seed=0, shapes=50):
    rng = np.random.default_rng(seed)
    ok_shape = ok_aspect = True
    for _ in range(shapes):
        h, w = int(rng.integers(1, 1500)), int(rng.integers(1, 2500))
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        out = pad_and_rescale(img)
        ok_shape &= out.shape == (454, 984, 3)
        nh, nw = fit_size(h, w)
        s = min(454 / h, 984 / w)
        ok_aspect &= abs(nh - h * s) <= 1 and abs(nw - w * s) <= 1
    img = rng.integers(0, 256, size=(300, 700, 3), dtype=np.uint8)
    p1 = multi_patch(img, 4, (100, 200), with_global=True, n_global=2, seed=11)
    p2 = multi_patch(img, 4, (100, 200), with_global=True, n_global=2, seed=11)
    same = all(a.pixels.tobytes() == b.pixels.tobytes() and a.box == b.box for a, b in zip(p1, p2))
    return [Check("preprocess", f"454x984 output ({shapes} shapes)", bool(ok_shape)),
            Check("preprocess", "aspect preserved within 1 px", bool(ok_aspect)),
            Check("preprocess", "multi-patch byte-deterministic", bool(same))]


SUITES = {
    "emd-grad": suite_emd_grad,
    "emd-props": suite_emd_props,
    "net-grad": suite_net_grad,
    "fw-oracle": suite_fw_oracle,
    "support": suite_support,
    "metrics": suite_metrics,
    "preprocess": suite_preprocess,
}


def run(only=None, seed=0) -> list:
    names = only or list(SUITES)
    results = []
    for name in names:
        results.extend(SUITES[name](seed=seed))
    return results
