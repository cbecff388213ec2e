import math

import numpy as np
import pytest

from edgeopc.errors import ConfigError, ContractError
from edgeopc.fixtures import oracle_fd_gradient
from edgeopc.geometry import Polygon, segment_edges
from edgeopc.litho import DEFAULT_THRESHOLD, KernelSet, ProcessCorner, forward, resist_sigmoid, simulate
from edgeopc.loss import (
    EpeSamplePlan, LossWeights, epe_distance_sums, grad_epe, grad_l2, grad_pvb, loss_epe, loss_l2, loss_pvb,
    make_epe_plan, total_loss_and_grad,
)
from edgeopc.raster import rasterize

ALPHA = 50.0


def delta_kernels(K=3):
    k = np.zeros((1, K, K), dtype=np.complex64)
    k[0, K // 2, K // 2] = 1
    return KernelSet(k, np.array([1.0]))


def instance(seed, n=48):
    rng = np.random.default_rng(seed)
    T = np.zeros((n, n))
    T[12:36, 14:34] = 1
    M = np.clip(T + 0.25 * rng.standard_normal(T.shape), 0, 1)
    return rng, T, M


def test_l2_values():
    rng = np.random.default_rng(0)
    T = (rng.random((16, 16)) > 0.5).astype(float)
    assert loss_l2(T, T) == 0
    Z = T.copy()
    Z[3, 4] = 1 - Z[3, 4]
    assert loss_l2(Z, T) == 1.0
    Z = rng.random((16, 16))
    assert loss_l2(Z, T) == pytest.approx(sum((Z[i, j] - T[i, j]) ** 2 for i in range(16) for j in range(16)))


def test_pvb_values(small_kernels):
    rng = np.random.default_rng(1)
    A, B = rng.random((16, 16)), rng.random((16, 16))
    assert loss_pvb(A, A) == 0
    assert loss_pvb(A, B) == pytest.approx(sum((a - b) ** 2 for a, b in zip(A.ravel(), B.ravel())))
    same = (ProcessCorner("nominal"), ProcessCorner("a"), ProcessCorner("b"))
    fwd = forward(instance(0)[2], small_kernels, same)
    assert loss_pvb(fwd.max.z, fwd.min.z) == 0


def plan_at(points, th=3, gamma=50.0):
    xs, ys, hor = zip(*points)
    normals = [(0, 1) if h else (1, 0) for h in hor]
    return EpeSamplePlan(np.array(xs), np.array(ys), np.array(hor), np.array(normals), th, gamma)


def window_sum_oracle(D, x, y, horizontal, th):
    H, W = D.shape
    total = 0.0
    for k in range(-th, th + 1):
        if horizontal:
            total += D[min(max(y + k, 0), H - 1), x]
        else:
            total += D[y, min(max(x + k, 0), W - 1)]
    return total


def test_distance_sums():
    rng = np.random.default_rng(2)
    T = (rng.random((20, 20)) > 0.5).astype(float)
    plan = plan_at([(5, 5, True), (10, 1, False), (0, 19, True), (19, 0, False)])
    assert not epe_distance_sums(T, T, plan).any()
    Z = T.copy()
    Z[6, 5] += 0.5
    assert epe_distance_sums(Z, T, plan)[0] == 0.25
    Z = rng.random((20, 20))
    D = (Z - T) ** 2
    want = [window_sum_oracle(D, x, y, h, 3) for x, y, h in zip(plan.xs, plan.ys, plan.horizontal)]
    assert np.allclose(epe_distance_sums(Z, T, plan), want)


def test_epe_loss_values():
    assert loss_epe(np.zeros(7), 50) == 3.5
    assert loss_epe(np.array([1e6]), 50) == pytest.approx(1.0)
    assert loss_epe(np.array([0.1]), 50) == pytest.approx(1 / (1 + math.exp(-5)), abs=1e-12)
    assert loss_epe(np.array([0.1]), 50) == pytest.approx(0.9933, abs=1e-4)
    with pytest.raises(ConfigError):
        loss_epe(np.zeros(1), 0)


def test_plan_skips_samples_near_corners():
    segs = segment_edges([Polygon.rect(10, 10, 110, 30)], 20)
    plan = make_epe_plan(segs, 15)
    # short vertical edges (20 long) have no midpoint 15 px from both ends
    assert not np.any(~plan.horizontal)
    assert np.all((plan.xs >= 25) & (plan.xs <= 95))


def test_l2_gradient_zero_at_target(small_kernels):
    _, _, M = instance(3)
    Z = resist_sigmoid(simulate(M, small_kernels), ALPHA)
    assert not grad_l2(Z, Z, M, small_kernels, ALPHA).any()


def test_l2_gradient_delta_kernel_closed_form():
    rng = np.random.default_rng(4)
    M = rng.random((16, 16))
    T = (rng.random((16, 16)) > 0.5).astype(float)
    Z = resist_sigmoid(M ** 2, ALPHA)
    want = 2 * (Z - T) * ALPHA * Z * (1 - Z) * 2 * M
    assert np.allclose(grad_l2(Z, T, M, delta_kernels(), ALPHA), want, rtol=1e-9, atol=1e-12)


def test_gradient_rejects_inconsistent_inputs(small_kernels):
    _, T, M = instance(5)
    Z = resist_sigmoid(simulate(M, small_kernels), ALPHA)
    with pytest.raises(ContractError):
        grad_l2(Z, T, M, small_kernels, ALPHA * 2)


def fd_check(loss_fn, grad, M, rng, n=20):
    cand = np.argwhere(np.abs(grad) > 1e-4 * np.abs(grad).max())
    pick = cand[rng.choice(len(cand), n, replace=False)]
    fd = oracle_fd_gradient(loss_fn, M, [tuple(p) for p in pick], 1e-4)
    an = grad[pick[:, 0], pick[:, 1]]
    return np.max(np.abs(an - fd) / np.maximum(np.abs(an), np.abs(fd)))


@pytest.mark.parametrize("seed", [6, 7])
def test_l2_and_pvb_gradients_match_finite_differences(small_kernels, seed):
    rng, T, M = instance(seed)
    fwd = forward(M, small_kernels)
    g = grad_l2(fwd.nominal.z, T, M, small_kernels, ALPHA)
    assert fd_check(lambda m: loss_l2(forward(m, small_kernels).nominal.z, T), g, M, rng) <= 1e-3
    g = grad_pvb(fwd)
    assert fd_check(lambda m: loss_pvb(*forward(m, small_kernels).images[1:]), g, M, rng) <= 1e-3


def test_pvb_gradient_zero_for_degenerate_corners(small_kernels):
    same = (ProcessCorner("nominal"), ProcessCorner("a"), ProcessCorner("b"))
    assert not grad_pvb(forward(instance(8)[2], small_kernels, same)).any()


def test_pvb_gradient_sign_probe(small_kernels):
    _, T, M = instance(9)
    fwd = forward(M, small_kernels)
    g = grad_pvb(fwd)
    y, x = np.unravel_index(np.argmax(np.abs(g)), g.shape)
    step = 1e-3 * np.sign(g[y, x])
    Mp = M.copy()
    Mp[y, x] += step
    assert loss_pvb(*forward(Mp, small_kernels).images[1:]) > loss_pvb(*fwd.images[1:])


def test_epe_gradient_zero_for_perfect_print(small_kernels):
    _, _, M = instance(10)
    Z = resist_sigmoid(simulate(M, small_kernels), ALPHA)
    plan = plan_at([(20, 20, True), (30, 30, False)])
    assert not grad_epe(Z, Z, M, plan, small_kernels, ALPHA).any()


def test_epe_gradient_single_sample_closed_form():
    rng = np.random.default_rng(11)
    M = rng.random((16, 16))
    T = (rng.random((16, 16)) > 0.5).astype(float)
    Z = resist_sigmoid(M ** 2, ALPHA)
    plan = plan_at([(7, 8, True)], th=2, gamma=50.0)
    D = sum((Z[8 + k, 7] - T[8 + k, 7]) ** 2 for k in range(-2, 3))
    s = 1 / (1 + math.exp(-50 * D))
    want = np.zeros_like(M)
    for k in range(-2, 3):
        y = 8 + k
        want[y, 7] = 50 * s * (1 - s) * 2 * (Z[y, 7] - T[y, 7]) * ALPHA * Z[y, 7] * (1 - Z[y, 7]) * 2 * M[y, 7]
    assert np.allclose(grad_epe(Z, T, M, plan, delta_kernels(), ALPHA), want, rtol=1e-9, atol=1e-12)


def test_epe_gradient_matches_finite_differences(small_kernels):
    rng, T, M = instance(12)
    segs = segment_edges([Polygon.rect(14, 11, 34, 35)], 80)
    T = rasterize(segs, 48, 48).astype(float)
    plan = make_epe_plan(segs, 5, 50.0, T.shape)
    fwd = forward(M, small_kernels)
    g = grad_epe(fwd.nominal.z, T, M, plan, small_kernels, ALPHA)
    fn = lambda m: loss_epe(epe_distance_sums(forward(m, small_kernels).nominal.z, T, plan), 50.0)  # noqa: E731
    assert fd_check(fn, g, M, rng) <= 1e-3


def test_total_is_the_weighted_sum(small_kernels):
    rng, T, M = instance(13)
    plan = plan_at([(20, 12, True), (14, 24, False)], th=5)
    fwd = forward(M, small_kernels)
    only_l2 = total_loss_and_grad(fwd, T, M, plan, LossWeights(1, 0, 0))
    assert np.array_equal(only_l2.dL_dM, grad_l2(fwd.nominal.z, T, M, small_kernels, ALPHA))
    b = total_loss_and_grad(fwd, T, M, plan)
    c = b.components
    assert np.array_equal(b.dL_dM, 1.0 * c["l2"] + 0.9 * c["pvb"] + 100.0 * c["epe"])
    assert b.total == pytest.approx(b.l2 + 0.9 * b.pvb + 100 * b.epe)
    assert b.l2 == loss_l2(fwd.nominal.z, T)


def test_zero_weights_rejected():
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0)
    with pytest.raises(ConfigError):
        LossWeights(-1, 1, 1)
