import itertools
import math

import numpy as np
import pytest
import torch

from cmcsep import losses
from cmcsep.losses import LossConfig

import oracles


def rand(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape))


def test_cosine_identical_opposite_orthogonal():
    a = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert losses.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-12)
    assert losses.cosine_similarity(a, -a).item() == pytest.approx(-1.0, abs=1e-12)
    assert losses.cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 5.0])).item() == 0.0


def test_cosine_zero_vector_is_finite():
    z = torch.zeros(4, dtype=torch.float64)
    assert losses.cosine_similarity(z, torch.ones(4, dtype=torch.float64)).item() == 0.0


def test_cosine_matches_oracle(rng):
    for _ in range(100):
        d = int(rng.integers(1, 12))
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        assert losses.cosine_similarity(torch.as_tensor(a), torch.as_tensor(b)).item() == pytest.approx(
            oracles.cosine(a, b), abs=1e-10
        )


def test_cmc_two_speaker_hand_example():
    # j=0: both AVC vectors aligned with their own visual vector; j=1: swapped
    c_v = torch.tensor([[[1.0, 1.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
    c_avc = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
    # j=0: n=0 -> |0| - 1, n=1 -> |0| - 1 ; j=1: n=0 -> |1| - 0, n=1 -> |1| - 0
    assert losses.cmc_loss(c_v, c_avc).item() == pytest.approx(0.0)
    aligned = c_v.clone()
    assert losses.cmc_loss(c_v, aligned).item() == pytest.approx(-4.0)


def test_cmc_matches_oracle_on_random_instances(rng):
    for trial in range(100):
        n = int(rng.integers(2, 5))
        d = int(rng.integers(1, 9))
        j = int(rng.integers(1, 7))
        c_v, c_avc = rand(rng, n, d, j), rand(rng, n, d, j)
        normalize = bool(trial % 2)
        got = losses.cmc_loss(c_v, c_avc, LossConfig(cmc_normalize=normalize)).item()
        want = oracles.cmc(c_v.numpy(), c_avc.numpy(), normalize)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_cmc_bounds_and_extremes(rng):
    n, d, j = 3, 5, 4
    c_v = rand(rng, n, d, j)
    lo = losses.cmc_loss(c_v, c_v).item()
    # lower bound -N*J is reached when positives are aligned and negatives orthogonal
    basis = torch.eye(n, dtype=torch.float64)[:, :, None].expand(n, n, j).clone()
    assert losses.cmc_loss(basis, basis).item() == pytest.approx(-n * j)
    for _ in range(50):
        val = losses.cmc_loss(rand(rng, n, d, j), rand(rng, n, d, j)).item()
        assert -n * j - 1e-9 <= val <= n * (n - 1) * j + n * j + 1e-9
    assert lo >= -n * j - 1e-9


def test_cmc_batched_is_mean_of_items(rng):
    c_v, c_avc = rand(rng, 3, 2, 4, 5), rand(rng, 3, 2, 4, 5)
    each = [losses.cmc_loss(c_v[b], c_avc[b]).item() for b in range(3)]
    assert losses.cmc_loss(c_v, c_avc).item() == pytest.approx(np.mean(each))


def test_cmc_rejects_mismatched_shapes(rng):
    with pytest.raises(ValueError):
        losses.cmc_loss(rand(rng, 2, 3, 4), rand(rng, 2, 3, 5))
    with pytest.raises(ValueError):
        losses.cmc_loss(rand(rng, 3, 4), rand(rng, 3, 4))


def test_cmc_gradcheck(rng):
    c_v = rand(rng, 2, 3, 4).requires_grad_()
    c_avc = rand(rng, 2, 3, 4).requires_grad_()
    assert torch.autograd.gradcheck(lambda a, b: losses.cmc_loss(a, b), (c_v, c_avc))


def test_cmc_gradient_finite_for_zero_vectors():
    c_v = torch.zeros(2, 3, 2, dtype=torch.float64, requires_grad=True)
    c_avc = torch.zeros(2, 3, 2, dtype=torch.float64, requires_grad=True)
    losses.cmc_loss(c_v, c_avc).backward()
    assert torch.isfinite(c_v.grad).all() and torch.isfinite(c_avc.grad).all()


def test_mse_matches_oracle(rng):
    for _ in range(100):
        n, i, j = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        est = rng.standard_normal((n, i, j)) + 1j * rng.standard_normal((n, i, j))
        src = rng.standard_normal((n, i, j)) + 1j * rng.standard_normal((n, i, j))
        got = losses.mse_loss(torch.as_tensor(est), torch.as_tensor(src)).item()
        assert got == pytest.approx(oracles.mse(est, src), rel=1e-10)


def test_mse_zero_when_equal_and_shape_check(rng):
    x = rand(rng, 2, 3, 4).abs()
    assert losses.mse_loss(x, x).item() == 0.0
    with pytest.raises(ValueError):
        losses.mse_loss(x, x[:, :2])


def test_combined_loss_lambda_zero_is_exactly_mse(rng):
    est, src = rand(rng, 2, 5, 3).abs(), rand(rng, 2, 5, 3).abs()
    c = rand(rng, 2, 4, 3)
    total, parts = losses.combined_loss(est, src, c, c, LossConfig(lam=0.0))
    assert total.item() == losses.mse_loss(est, src).item()
    assert parts["cmc"].item() == 0.0
    total, parts = losses.combined_loss(est, src, c, None, LossConfig(lam=0.0))
    assert total.item() == parts["mse"].item()


def test_combined_loss_weights_cmc(rng):
    est, src = rand(rng, 2, 5, 3).abs(), rand(rng, 2, 5, 3).abs()
    c_v, c_avc = rand(rng, 2, 4, 3), rand(rng, 2, 4, 3)
    total, parts = losses.combined_loss(est, src, c_v, c_avc, LossConfig(lam=0.5))
    assert total.item() == pytest.approx(parts["mse"].item() + 0.5 * parts["cmc"].item())
    with pytest.raises(ValueError):
        losses.combined_loss(est, src, c_v, None, LossConfig(lam=0.5))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)


def _complex(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def test_upit_matches_exhaustive_oracle(rng):
    for trial in range(100):
        n = int(rng.integers(2, 5))
        i, j = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        est = torch.as_tensor(np.abs(rng.standard_normal((n, i, j))))
        src = _complex(rng, n, i, j)
        phase = torch.as_tensor(rng.uniform(-math.pi, math.pi, (i, j)))
        clamp = trial % 3 != 0
        loss, perm = losses.upit_loss(est, src, phase, clamp=clamp)
        cost, _ = oracles.upit(est.numpy(), src.numpy(), phase.numpy(), clamp)
        assert loss.item() == pytest.approx(cost, rel=1e-9)
        # the reported assignment attains the optimum (ties may pick another one)
        s = src.numpy()[perm.numpy()]
        t = np.abs(s) * np.cos(phase.numpy() - np.angle(s))
        t = np.maximum(t, 0.0) if clamp else t
        assert np.mean((est.numpy() - t) ** 2) == pytest.approx(cost, rel=1e-9)


def test_upit_recovers_swapped_sources(rng):
    n, i, j = 3, 6, 5
    src = _complex(rng, n, i, j)
    phase = src.sum(0).angle()
    target = losses.phase_sensitive_target(src, phase)
    order = [2, 0, 1]
    est = target[order]
    loss, perm = losses.upit_loss(est, src, phase)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert perm.tolist() == order


def test_upit_perm_achieves_reported_cost(rng):
    src = _complex(rng, 2, 3, 4, 5)
    est = torch.as_tensor(np.abs(rng.standard_normal((2, 3, 4, 5))))
    phase = torch.as_tensor(rng.uniform(-3, 3, (2, 4, 5)))
    loss, perm = losses.upit_loss(est, src, phase)
    target = losses.phase_sensitive_target(src, phase)
    per_item = []
    for b in range(2):
        matched = target[b][perm[b]]
        per_item.append(((est[b] - matched) ** 2).mean().item())
        others = [((est[b] - target[b][list(p)]) ** 2).mean().item() for p in itertools.permutations(range(3))]
        assert per_item[-1] == pytest.approx(min(others))
    assert loss.item() == pytest.approx(np.mean(per_item))


def test_upit_speaker_bound(rng):
    est = torch.ones(5, 2, 2, dtype=torch.float64)
    with pytest.raises(ValueError, match="N=5"):
        losses.upit_loss(est, _complex(rng, 5, 2, 2), torch.zeros(2, 2, dtype=torch.float64))


def test_phase_sensitive_target_clamp(rng):
    src = _complex(rng, 2, 4, 4)
    phase = torch.as_tensor(rng.uniform(-3, 3, (4, 4)))
    raw = losses.phase_sensitive_target(src, phase, clamp=False)
    assert (raw < 0).any()
    assert (losses.phase_sensitive_target(src, phase) >= 0).all()
    with pytest.raises(ValueError):
        losses.phase_sensitive_target(src.abs(), phase)


def test_cmc_invariant_to_positive_column_scaling(rng):
    c_v, c_avc = rand(rng, 3, 4, 6), rand(rng, 3, 4, 6)
    scale_v = torch.as_tensor(rng.uniform(0.1, 10, (3, 1, 6)))
    scale_a = torch.as_tensor(rng.uniform(0.1, 10, (3, 1, 6)))
    base = losses.cmc_loss(c_v, c_avc).item()
    assert losses.cmc_loss(c_v * scale_v, c_avc * scale_a).item() == pytest.approx(base, rel=1e-10)
