import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stereo_consistency.ssw import (
    CovarianceStats,
    SswConfig,
    covariance,
    instance_normalize,
    kmeans_1d,
    select_mask,
    ssw_loss,
    variance_matrix,
    whitening_penalty,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_instance_normalize_row():
    out = instance_normalize(t([[1.0, 2.0, 3.0, 4.0]]))
    np.testing.assert_allclose(out[0].numpy(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3)


def test_instance_normalize_constant_and_idempotent():
    assert torch.all(instance_normalize(t([[3.0, 3.0, 3.0]])) == 0)
    x = torch.randn(4, 30, dtype=torch.float64)
    once = instance_normalize(x)
    assert torch.allclose(instance_normalize(once), once, atol=1e-4)
    with pytest.raises(ValueError):
        instance_normalize(t([[1.0]]))


def test_instance_normalize_loop_oracle():
    x = np.random.default_rng(0).standard_normal((3, 7))
    got = instance_normalize(t(x), 1e-5).numpy()
    for i in range(3):
        mu = sum(x[i]) / 7
        var = sum((a - mu) ** 2 for a in x[i]) / 7
        np.testing.assert_allclose(got[i], [(a - mu) / (var + 1e-5) ** 0.5 for a in x[i]], rtol=0, atol=1e-9)


def test_instance_normalize_variance_law():
    x = torch.randn(5, 40, dtype=torch.float64) * torch.tensor([[0.01], [0.1], [0.3], [1.0], [7.0]], dtype=torch.float64)
    var_in = x.var(1, unbiased=False)
    var_out = instance_normalize(x, 1e-5).var(1, unbiased=False)
    assert torch.allclose(var_out, var_in / (var_in + 1e-5), rtol=1e-12)


def test_covariance_cases():
    assert torch.all(covariance(torch.zeros(3, 5)) == 0)
    np.testing.assert_array_equal(covariance(t([[1.0, -1.0], [1.0, -1.0]])).numpy(), [[1, 1], [1, 1]])
    x = instance_normalize(torch.randn(4, 50, dtype=torch.float64))
    cov = covariance(x)
    assert torch.equal(cov, cov.T)
    np.testing.assert_allclose(torch.diagonal(cov).numpy(), 1.0, atol=1e-4)


def test_covariance_loop_oracle():
    x = np.random.default_rng(1).standard_normal((4, 6))
    got = covariance(t(x)).numpy()
    for i in range(4):
        for j in range(4):
            assert got[i, j] == pytest.approx(sum(x[i, k] * x[j, k] for k in range(6)) / 6, abs=1e-9)


def test_variance_matrix_cases():
    assert variance_matrix([t([[2.0]])], [t([[0.0]])]).item() == 1.0
    a = [torch.randn(3, 3, dtype=torch.float64) for _ in range(4)]
    assert torch.all(variance_matrix(a, a) == 0)
    b = [torch.randn(3, 3, dtype=torch.float64) for _ in range(4)]
    assert torch.all(variance_matrix(a, b) >= 0)
    with pytest.raises(ValueError):
        variance_matrix(a, b[:2])


def test_variance_matrix_loop_oracle():
    rng = np.random.default_rng(2)
    L = rng.standard_normal((5, 4, 4))
    R = rng.standard_normal((5, 4, 4))
    got = variance_matrix([t(x) for x in L], [t(x) for x in R]).numpy()
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for n in range(5):
                mu = (L[n, i, j] + R[n, i, j]) / 2
                acc += (L[n, i, j] - mu) ** 2 + (R[n, i, j] - mu) ** 2
            assert got[i, j] == pytest.approx(acc / 10, abs=1e-9)


def test_variance_matrix_symmetric_under_swap():
    a = [torch.randn(3, 3, dtype=torch.float64) for _ in range(3)]
    b = [torch.randn(3, 3, dtype=torch.float64) for _ in range(3)]
    assert torch.allclose(variance_matrix(a, b), variance_matrix(b, a), atol=1e-12)


def test_running_accumulation_matches_batch_formula():
    rng = np.random.default_rng(3)
    L = t(rng.standard_normal((6, 3, 3)))
    R = t(rng.standard_normal((6, 3, 3)))
    stats = CovarianceStats(1, warmup_steps=100)
    for k in range(0, 6, 2):
        stats.accumulate([L[k : k + 2]], [R[k : k + 2]])
    np.testing.assert_allclose(stats.V[0], variance_matrix(list(L), list(R)).numpy(), atol=1e-12)


# selective mask


def exhaustive_top_cluster(vals, k):
    """Brute-force least-squares partition over every label assignment; returns the top-centroid members."""
    vals = np.asarray(vals, dtype=np.float64)
    n = len(vals)
    labels = np.array(list(itertools.product(range(k), repeat=n)))
    onehot = labels[:, :, None] == np.arange(k)
    counts = onehot.sum(1)
    full = (counts > 0).all(1)
    sums = (onehot * vals[None, :, None]).sum(1)
    sq = (onehot * (vals**2)[None, :, None]).sum(1)
    sse = (sq - sums**2 / np.maximum(counts, 1)).sum(1)
    sse[~full] = np.inf
    best = labels[np.argmin(sse)]
    cents = [vals[best == c].mean() for c in range(k)]
    return best == int(np.argmax(cents)), float(np.min(sse))


@pytest.mark.parametrize("seed", range(8))
def test_kmeans_matches_exhaustive_partition(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    vals = rng.exponential(1.0, n) * rng.choice([1.0, 10.0], n)
    top, best_sse = exhaustive_top_cluster(vals, 3)
    labels, cents = kmeans_1d(vals, 3)
    assert np.array_equal(labels == labels.max(), top)
    sse = sum(((vals[labels == c] - cents[c]) ** 2).sum() for c in range(3))
    assert sse == pytest.approx(best_sse, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_select_mask_matches_exhaustive(seed):
    rng = np.random.default_rng(100 + seed)
    C = 5
    V = rng.exponential(1.0, (C, C))
    V = V + V.T
    iu = np.triu_indices(C, 1)
    top, _ = exhaustive_top_cluster(V[iu], 3)
    expect = np.zeros((C, C), dtype=bool)
    expect[iu] = top
    assert np.array_equal(select_mask(V, 3), expect | expect.T)


def test_select_mask_examples():
    V = np.zeros((3, 3))
    V[1, 2] = V[2, 1] = 10.0
    m = select_mask(V, 3)
    assert m.sum() == 2 and m[1, 2] and m[2, 1]
    assert not select_mask(np.full((4, 4), 2.0), 3).any()
    m = select_mask(np.random.default_rng(0).random((6, 6)), 3)
    assert np.array_equal(m, m.T) and not np.diag(m).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 10.0]))
def test_select_mask_scale_invariant(seed, scale):
    V = np.random.default_rng(seed).random((6, 6))
    assert np.array_equal(select_mask(V, 3), select_mask(V * scale, 3))


# penalty and loss


def test_penalty_known_three_channel_case():
    x = t([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, 1.0, -1.0, -2.0]])
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 2] = mask[2, 1] = True
    sigma = covariance(x)
    assert whitening_penalty(x, mask).item() == pytest.approx(abs(sigma[1, 2].item()), abs=1e-12)
    assert ssw_loss([x], [mask]).value.item() == pytest.approx(abs(sigma[1, 2].item()), abs=1e-12)


def test_penalty_zero_cases():
    # orthogonal rows give a diagonal covariance
    x = t([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]])
    assert whitening_penalty(x, np.ones((3, 3), dtype=bool)).item() == pytest.approx(0.0, abs=1e-12)
    y = torch.randn(3, 10, dtype=torch.float64)
    assert whitening_penalty(y, np.zeros((3, 3), dtype=bool)).item() == 0.0


def test_loss_skipped_before_warmup_then_ready():
    stats = CovarianceStats(1, warmup_steps=2, mask_refresh=2)
    x = instance_normalize(torch.randn(2, 3, 20, dtype=torch.float64))
    term = ssw_loss([x], stats)
    assert term.skipped and term.value.item() == 0.0
    for _ in range(2):
        cl = covariance(instance_normalize(torch.randn(2, 3, 20, dtype=torch.float64)))
        stats.accumulate([cl], [cl * 0.5])
    assert stats.ready
    term = ssw_loss([x], stats)
    assert not term.skipped and term.value.item() >= 0
    with pytest.raises(ValueError):
        ssw_loss([x, x], stats)


def test_config_validation():
    with pytest.raises(ValueError):
        SswConfig(epsilon=0)
    with pytest.raises(ValueError):
        SswConfig(layers=())


@pytest.mark.parametrize("seed", range(20))
def test_gradient_wrt_pre_in_inputs(seed):
    rng = np.random.default_rng(seed)
    x0 = t(rng.standard_normal((3, 8)))
    mask = np.ones((3, 3), dtype=bool)

    def f(x):
        return ssw_loss([instance_normalize(x, 1e-5)], [mask]).value

    x = x0.clone().requires_grad_(True)
    f(x).backward()
    num = torch.zeros_like(x0)
    h = 1e-3
    for i in range(3):
        for j in range(8):
            xp, xm = x0.clone(), x0.clone()
            xp[i, j] += h
            xm[i, j] -= h
            num[i, j] = (f(xp) - f(xm)) / (2 * h)
    err = torch.linalg.norm(x.grad - num) / torch.linalg.norm(num)
    assert err.item() <= 1e-4


def test_descent_drives_masked_covariance_to_zero():
    torch.manual_seed(0)
    base = torch.randn(1, 64, dtype=torch.float64)
    x = (base.repeat(4, 1) + 0.5 * torch.randn(4, 64, dtype=torch.float64)).requires_grad_(True)
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 1] = mask[1, 0] = mask[2, 3] = mask[3, 2] = True
    opt = torch.optim.SGD([x], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ssw_loss([instance_normalize(x)], [mask]).value.backward()
        opt.step()
    cov = covariance(instance_normalize(x.detach()))
    assert abs(cov[0, 1].item()) <= 1e-3 and abs(cov[2, 3].item()) <= 1e-3
