"""Training objectives: cross-modal correspondence, magnitude MSE and uPIT.

Every loss accepts tensors with an optional leading batch axis and returns
the mean over the batch. Speaker axes come before the matrix axes, e.g.
``(B, N, D, J)`` for feature sequences and ``(B, N, I, J)`` for spectrograms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    lam: float = 1.0
    epsilon: float = 1e-8
    cmc_normalize: bool = False
    psa_clamp: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def _magnitude(x: torch.Tensor) -> torch.Tensor:
    return x.abs() if x.is_complex() else x


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Frame-wise cosine similarity for every speaker pair.

    ``a``, ``b``: (..., N, D, J). Returns (..., N, N, J) where entry
    ``[n, n', j]`` is d(a[n, :, j], b[n', :, j]).
    """
    na = a.norm(dim=-2).clamp_min(epsilon)  # (..., N, J)
    nb = b.norm(dim=-2).clamp_min(epsilon)
    dots = torch.einsum("...ndj,...mdj->...nmj", a, b)
    sim = dots / (na[..., :, None, :] * nb[..., None, :, :])
    return sim.clamp(-1.0, 1.0)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Cosine similarity along the last axis, with norm guard and round-off clamp."""
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    denom = a.norm(dim=-1).clamp_min(epsilon) * b.norm(dim=-1).clamp_min(epsilon)
    return ((a * b).sum(-1) / denom).clamp(-1.0, 1.0)


def cmc_loss(c_v: torch.Tensor, c_avc: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Sum over speakers and frames of |negative similarities| minus the positive one."""
    cfg = cfg or LossConfig()
    if c_v.shape != c_avc.shape:
        raise ValueError(f"visual {tuple(c_v.shape)} and AVC {tuple(c_avc.shape)} shapes differ")
    if c_v.dim() not in (3, 4):
        raise ValueError(f"expected (N, D, J) or (B, N, D, J), got {tuple(c_v.shape)}")
    batched = c_v if c_v.dim() == 4 else c_v[None]
    sim = pairwise_cosine(batched, c_avc if c_avc.dim() == 4 else c_avc[None], cfg.epsilon)
    n, j = batched.shape[1], batched.shape[3]
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)[:, :, None].expand(n, n, j)
    pos = sim[:, eye].sum(-1)
    neg = sim[:, ~eye].abs().sum(-1)  # subgradient 0 at 0
    per_item = neg - pos
    if cfg.cmc_normalize:
        per_item = per_item / (n * j)
    return per_item.mean()


def mse_loss(estimates: torch.Tensor, sources: torch.Tensor) -> torch.Tensor:
    """Mean squared magnitude error with fixed speaker assignment.

    Complex inputs are reduced to magnitudes; real inputs are taken as magnitudes.
    """
    est, src = _magnitude(estimates), _magnitude(sources)
    if est.shape != src.shape:
        raise ValueError(f"estimate {tuple(est.shape)} and source {tuple(src.shape)} shapes differ")
    return ((est - src) ** 2).mean()


def combined_loss(estimates, sources, c_v, c_avc, cfg: LossConfig | None = None):
    """MSE plus lambda times CMC; with lambda = 0 the CMC term is not evaluated."""
    cfg = cfg or LossConfig()
    mse = mse_loss(estimates, sources)
    if cfg.lam == 0 or c_avc is None:
        if cfg.lam != 0:
            raise ValueError("lambda > 0 requires AVC features")
        cmc = torch.zeros((), dtype=mse.dtype)
        return mse, {"mse": mse, "cmc": cmc}
    cmc = cmc_loss(c_v, c_avc, cfg)
    return mse + cfg.lam * cmc, {"mse": mse, "cmc": cmc}


def phase_sensitive_target(sources: torch.Tensor, mixture_phase: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """|S| cos(psi_X - psi_S), optionally clamped at zero. ``sources`` complex (..., N, I, J)."""
    if not sources.is_complex():
        raise ValueError("phase-sensitive targets need complex source spectrograms")
    t = sources.abs() * torch.cos(mixture_phase[..., None, :, :] - sources.angle())
    return t.clamp_min(0.0) if clamp else t


MAX_PIT_SPEAKERS = 4


def upit_loss(
    estimates: torch.Tensor,
    sources: torch.Tensor,
    mixture_phase: torch.Tensor,
    clamp: bool = True,
    max_speakers: int = MAX_PIT_SPEAKERS,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Utterance-level PIT on phase-sensitive magnitude targets.

    Returns the batch-mean minimum cost and the best permutation per item,
    ``perm[b, n]`` being the source index assigned to estimate ``n``.
    """
    est = _magnitude(estimates)
    batched = est.dim() == 4
    if not batched:
        est, sources, mixture_phase = est[None], sources[None], mixture_phase[None]
    if est.shape != sources.shape:
        raise ValueError(f"estimate {tuple(est.shape)} and source {tuple(sources.shape)} shapes differ")
    if mixture_phase.shape != est.shape[:1] + est.shape[2:]:
        raise ValueError(f"mixture phase shape {tuple(mixture_phase.shape)} does not match")
    n = est.shape[1]
    if n > max_speakers:
        raise ValueError(f"uPIT enumerates N! permutations; N={n} exceeds the bound {max_speakers}")
    target = phase_sensitive_target(sources, mixture_phase, clamp)
    # pair[b, n, m] = sum_ij (|Y_n| - T_m)^2
    pair = ((est[:, :, None] - target[:, None]) ** 2).sum(dim=(-2, -1))
    perms = torch.tensor(list(itertools.permutations(range(n))), device=est.device)
    rows = torch.arange(n, device=est.device)
    costs = pair[:, rows[None, :], perms].sum(-1)  # (B, N!)
    scale = est.shape[1] * est.shape[2] * est.shape[3]
    best, idx = costs.min(dim=1)
    loss = (best / scale).mean()
    perm = perms[idx]
    return loss, perm if batched else perm[0]
