import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asdkit.objective import (
    BalancedBatchSampler,
    BatchLabels,
    EmptyTargetError,
    loss_machine,
    loss_product,
    loss_total,
    mixup,
    mixup_batch,
)
from oracles import machine_loss_scalar, product_loss_scalar


def T(a):
    return torch.tensor(a, dtype=torch.float64)


def test_product_loss_worked_example():
    got = loss_product(T([[0.8, 0.3], [0.5, 0.5]]), [1.0, 0.0], [[1, 0], [0, 0]]).item()
    assert got == pytest.approx(-0.5 * (math.log(0.8) + math.log(0.7)), abs=1e-12)
    assert got == pytest.approx(0.2899, abs=1e-4)


def test_product_loss_perfect_predictions():
    y = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    assert loss_product(T(y), [1, 1], y).item() <= 2e-7


def test_product_loss_needs_target():
    with pytest.raises(EmptyTargetError):
        loss_product(T([[0.5, 0.5]]), [0.0], [[0, 0]])


def test_machine_loss_examples():
    assert loss_machine(T([0.9, 0.2]), [1.0, 0.0]).item() == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), abs=1e-12)
    assert loss_machine(T([0.9, 0.2]), [1.0, 0.0]).item() == pytest.approx(0.1643, abs=1e-4)
    assert loss_machine(T([1.0, 0.0]), [1.0, 0.0]).item() <= 2e-7
    assert loss_machine(T([0.5] * 4), [1, 0, 1, 0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_total_loss():
    assert loss_total(0.2899, 0.1643, 10.0) == pytest.approx(3.0633)
    assert loss_total(5.0, 0.3, 0.0) == 0.3
    with pytest.raises(ValueError):
        loss_total(1.0, 1.0, -1.0)


def test_losses_match_scalar_oracle_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(20):
        N, K = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        probs = rng.uniform(0, 1, (N, K))
        t = rng.uniform(0, 1, N)
        t[0] = max(t[0], 0.1)
        y = rng.uniform(0, 1, (N, K)) * t[:, None]
        q = rng.uniform(0, 1, N)
        lp = loss_product(T(probs), t, y).item()
        lm = loss_machine(T(q), t).item()
        ref_p = product_loss_scalar(probs.tolist(), t.tolist(), y.tolist())
        ref_m = machine_loss_scalar(q.tolist(), t.tolist())
        assert abs(lp - ref_p) <= 1e-10 * abs(ref_p)
        assert abs(lm - ref_m) <= 1e-10 * abs(ref_m)


def test_loss_gradient_flows_only_through_used_inputs():
    p = T([[0.3, 0.6], [0.4, 0.2]]).requires_grad_()
    loss_product(p, [1.0, 0.0], [[1, 0], [0, 0]]).backward()
    assert torch.all(p.grad[1] == 0)
    assert torch.all(p.grad[0] != 0)


def _labels(t, y):
    return BatchLabels(np.asarray(t, float), np.asarray(y, float))


def test_mixup_midpoint():
    a, b = np.ones((2, 3, 3)), np.zeros((2, 3, 3))
    la, lb = _labels([1, 1], [[1, 0], [0, 1]]), _labels([0, 0], [[0, 0], [0, 0]])
    x, lab = mixup(a, la, b, lb, 0.5)
    assert np.all(x == 0.5)
    np.testing.assert_array_equal(lab.t, [0.5, 0.5])


def test_mixup_endpoint_keeps_first_batch(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    la = _labels([1, 0, 1], [[1, 0], [0, 0], [0, 1]])
    x, lab = mixup(a, la, b, _labels([0, 0, 0], np.zeros((3, 2))), 1.0)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(lab.t, la.t)
    np.testing.assert_array_equal(lab.y, la.y)


def test_mixup_target_with_non_target():
    la = _labels([1], [[1, 0, 0]])
    lb = _labels([0], [[0, 0, 0]])
    _, lab = mixup(np.zeros((1, 2)), la, np.zeros((1, 2)), lb, 0.3)
    assert lab.t[0] == pytest.approx(0.3)
    np.testing.assert_allclose(lab.y[0], [0.3, 0, 0])
    assert lab.is_fractional()


def test_mixup_shape_mismatch():
    with pytest.raises(ValueError):
        mixup(np.zeros((2, 3)), _labels([1, 1], np.eye(2)), np.zeros((2, 4)), _labels([1, 1], np.eye(2)), 0.5)


def test_mixup_batch_one_lambda_per_pair(rng):
    x = rng.standard_normal((8, 5))
    lab = BatchLabels.from_ids([1, 1, 1, 1, 0, 0, 0, 0], [0, 1, 2, 0, 0, 0, 0, 0], 3)
    mixed, out = mixup_batch(x, lab, np.random.default_rng(4))
    r = np.random.default_rng(4)
    perm = r.permutation(8)
    lam = r.beta(0.2, 0.2, size=8)
    np.testing.assert_allclose(out.lambda_mix, lam)
    np.testing.assert_allclose(mixed, lam[:, None] * x + (1 - lam[:, None]) * x[perm])
    np.testing.assert_allclose(out.t, lam * lab.t + (1 - lam) * lab.t[perm])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_mixed_labels_stay_consistent(N, K, seed):
    r = np.random.default_rng(seed)
    is_t = r.random(N) < 0.5
    lab = BatchLabels.from_ids(is_t, r.integers(0, K, N), K)
    _, out = mixup_batch(r.standard_normal((N, 2)), lab, r)
    assert np.all((out.t >= 0) & (out.t <= 1))
    # product mass never exceeds target mass
    np.testing.assert_allclose(out.y.sum(axis=1), out.t, atol=1e-12)


def test_sampler_half_and_half():
    mts = ["fan"] * 30 + ["pump"] * 40
    pids = [i % 3 for i in range(30)] + [0] * 40
    s = BalancedBatchSampler(mts, pids, "fan", 32, np.random.default_rng(0))
    b = s.sample_batch()
    assert len(b) == 32
    assert sum(mts[i] == "fan" for i in b) == 16


def test_sampler_target_share_over_many_batches():
    mts = ["fan"] * 50 + ["pump"] * 70 + ["valve"] * 33
    pids = [i % 4 for i in range(50)] + [0] * 103
    s = BalancedBatchSampler(mts, pids, "fan", 16, np.random.default_rng(1))
    for _ in range(1000):
        b = s.sample_batch()
        assert sum(mts[i] == "fan" for i in b) == 8


def test_sampler_balances_product_ids():
    mts = ["fan"] * 60 + ["pump"] * 10
    pids = [0] * 40 + [1] * 15 + [2] * 5 + [0] * 10
    s = BalancedBatchSampler(mts, pids, "fan", 8, np.random.default_rng(2))
    counts = Counter()
    for _ in range(30):
        counts.update(pids[i] for i in s.sample_batch() if mts[i] == "fan")
    assert max(counts.values()) - min(counts.values()) <= 1


def test_sampler_errors():
    with pytest.raises(ValueError):
        BalancedBatchSampler(["fan"] * 4, [0] * 4, "fan", 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        BalancedBatchSampler(["pump"] * 4, [0] * 4, "fan", 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        BalancedBatchSampler(["fan", "pump"], [0, 0], "fan", 3, np.random.default_rng(0))


def test_sampler_is_seed_deterministic():
    mts = ["fan"] * 20 + ["pump"] * 20
    pids = [i % 2 for i in range(40)]
    a = BalancedBatchSampler(mts, pids, "fan", 8, np.random.default_rng(9))
    b = BalancedBatchSampler(mts, pids, "fan", 8, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.epoch(), b.epoch()))
    assert a.batches_per_epoch() == 5
