import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from aesthetic_mtl.data import SampleBatch
from aesthetic_mtl.errors import InvalidInputError
from aesthetic_mtl.moo import (TaskWeights, combine_and_descend, combined_direction, frank_wolfe_min_norm,
                               mgda_ub_weights, min_norm_2, representation_gradients)
from aesthetic_mtl.score_dist import EmdConfig
from aesthetic_mtl.nn_core import REPRESENTATION, SHARED, Architecture, backward_task, init_params, task_gradients


def test_task_weights_validation():
    with pytest.raises(InvalidInputError):
        TaskWeights([0.5, 0.6])
    with pytest.raises(InvalidInputError):
        TaskWeights([1.2, -0.2])
    assert list(TaskWeights.uniform(4)) == [0.25] * 4
    assert list(TaskWeights.one_hot(3, 1)) == [0.0, 1.0, 0.0]


def test_min_norm_2_orthogonal():
    d = min_norm_2([1, 0], [0, 1])
    gam, nrm = oracles.gamma_grid_2([1, 0], [0, 1])
    assert d.delta == pytest.approx([0.5, 0.5], abs=1e-12)
    assert gam == pytest.approx(0.5)
    assert np.linalg.norm(0.5 * np.array([1, 1])) == pytest.approx(np.sqrt(0.5))
    assert nrm == pytest.approx(np.sqrt(0.5), abs=1e-12)


def test_min_norm_2_collinear():
    # hull is the segment [1,2] x {0}; nearest to the origin is g2
    d = min_norm_2([2, 0], [1, 0])
    assert list(d) == [0.0, 1.0]
    assert frank_wolfe_min_norm([[2, 0], [1, 0]]).combined_norm == pytest.approx(1.0, abs=1e-12)


def test_min_norm_2_identical_tie_break():
    v = [0.3, -1.0, 2.0]
    assert list(min_norm_2(v, v)) == [1.0, 0.0]
    rep = frank_wolfe_min_norm([v, v])
    assert list(rep.delta) == [1.0, 0.0]
    assert rep.combined_norm == pytest.approx(np.linalg.norm(v))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_min_norm_2_vs_gamma_grid(v):
    g1, g2 = np.array(v[:3]), np.array(v[3:])
    d = min_norm_2(g1, g2)
    _, grid = oracles.gamma_grid_2(g1, g2)
    got = np.linalg.norm(d.delta @ np.stack([g1, g2]))
    assert got <= grid + 1e-9


def test_fw_origin_in_hull():
    G = np.array([[1.0, 0.0], [-1.0, 1.0], [-1.0, -1.0]])
    # certifying combination
    assert np.allclose(np.array([0.5, 0.25, 0.25]) @ G, 0)
    assert oracles.grid_min_norm(G)[1] == pytest.approx(0.0, abs=1e-12)
    rep = frank_wolfe_min_norm(G)
    assert rep.combined_norm < 1e-3
    assert rep.converged


def test_fw_single_task():
    rep = frank_wolfe_min_norm([[3.0, 4.0]])
    assert list(rep.delta) == [1.0]
    assert rep.combined_norm == pytest.approx(5.0)


def test_fw_identical_gradients():
    g = [1.0, 2.0, -2.0]
    rep = frank_wolfe_min_norm([g, g, g])
    assert rep.combined_norm == pytest.approx(3.0, abs=1e-12)


def test_fw_matches_exact_face_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(200):
        T = int(rng.integers(2, 6))
        dim = int(rng.integers(1, 8))
        G = rng.normal(size=(T, dim)) + rng.normal(size=dim) * rng.uniform(0, 2)
        rep = frank_wolfe_min_norm(G)
        _, exact = oracles.min_norm_exact(G)
        assert rep.converged
        assert rep.combined_norm == pytest.approx(exact, abs=1e-6)


def test_fw_never_worse_than_grid():
    rng = np.random.default_rng(12)
    for _ in range(40):
        T = int(rng.integers(2, 4))
        G = rng.normal(size=(T, int(rng.integers(1, 6))))
        assert frank_wolfe_min_norm(G).combined_norm <= oracles.grid_min_norm(G)[1] + 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 100))
def test_fw_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 5))
    G = rng.normal(size=(T, T + int(rng.integers(0, 4))))
    a = frank_wolfe_min_norm(G).delta.delta
    b = frank_wolfe_min_norm(scale * G).delta.delta
    assert np.allclose(a, b, atol=1e-6)


def test_fw_support_property():
    rng = np.random.default_rng(13)
    for _ in range(50):
        G = rng.normal(size=(4, int(rng.integers(2, 30))))
        rep = frank_wolfe_min_norm(G)
        d = rep.delta.delta @ G
        assert rep.converged
        assert np.all(G @ d >= d @ d - 1e-6)


def test_fw_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        frank_wolfe_min_norm(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        frank_wolfe_min_norm([[np.inf, 0.0]])


def _net(seed=0, T=4, B=6):
    rng = np.random.default_rng(seed)
    arch = Architecture(6, (5, 4), activation="tanh", n_tasks=T)
    p = init_params(arch, rng)
    batch = SampleBatch(rng.uniform(size=(B, 6)), rng.dirichlet(np.ones(5), size=(T, B)))
    return p, batch


def test_mgda_ub_single_task():
    p, batch = _net(T=1)
    assert list(mgda_ub_weights(p, batch).delta) == [1.0]


def test_mgda_ub_identical_tasks_tie_break():
    p, batch = _net(T=2)
    p.heads[1] = p.heads[0].copy()
    batch = SampleBatch(batch.features, np.stack([batch.targets[0], batch.targets[0]]))
    assert list(mgda_ub_weights(p, batch).delta) == [1.0, 0.0]


def test_mgda_ub_matches_independent_per_task_gradients():
    p, batch = _net(seed=4)
    rep = mgda_ub_weights(p, batch)
    G = np.stack([backward_task(p, batch, t, wrt=REPRESENTATION) for t in range(4)])
    ref = frank_wolfe_min_norm(G)
    assert np.allclose(rep.delta.delta, ref.delta.delta, atol=1e-8)


def test_mgda_ub_batch_permutation_invariant():
    p, batch = _net(seed=6, B=10)
    perm = np.random.default_rng(0).permutation(10)
    a = mgda_ub_weights(p, batch).delta.delta
    b = mgda_ub_weights(p, batch.take(perm)).delta.delta
    assert np.allclose(a, b, atol=1e-9)


def test_combined_direction_one_hot_is_single_task_gradient():
    p, batch = _net()
    tg = task_gradients(p, batch)
    for t in range(4):
        d = combined_direction(p, tg, TaskWeights.one_hot(4, t))
        assert np.allclose(d[:p.arch.n_shared], backward_task(p, batch, t, wrt=SHARED), atol=1e-14)


def test_combined_direction_uniform_two_tasks_is_average():
    p, batch = _net(T=2)
    tg = task_gradients(p, batch)
    d = combined_direction(p, tg, TaskWeights.uniform(2))
    avg = 0.5 * (backward_task(p, batch, 0) + backward_task(p, batch, 1))
    assert np.allclose(d[:p.arch.n_shared], avg, atol=1e-14)


def test_linear_head_weights_give_weighted_sum_gradient():
    p, batch = _net(seed=2)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    tg = task_gradients(p, batch)
    d = combined_direction(p, tg, TaskWeights(w), head_weights=w)

    def weighted(flat):
        q = p.with_flat(flat)
        return float(w @ task_gradients(q, batch).losses)

    fd = oracles.central_diff(weighted, p.flat())
    assert oracles.rel_err(d, fd) < 1e-6


def test_combine_and_descend_moves_parameters():
    p, batch = _net()
    q, v = combine_and_descend(p, batch, TaskWeights.uniform(4), EmdConfig(), 0.1, np.zeros(p.size), 0.9)
    assert q.size == p.size and not np.array_equal(q.flat(), p.flat())
    assert np.array_equal(v, combined_direction(p, task_gradients(p, batch), TaskWeights.uniform(4)))


def test_representation_gradients_space():
    p, batch = _net()
    gs = representation_gradients(task_gradients(p, batch))
    assert gs.space == REPRESENTATION and len(gs) == 4
