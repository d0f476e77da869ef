"""Feature-transfer losses between teacher taps and aligned student taps.

Feature tensors are channel-first: ``(..., C, H, W)``; any leading batch
dimensions are summed over. Loss accumulation runs in float64.
"""

from __future__ import annotations

from itertools import combinations

import torch
import torch.nn.functional as F

EPS = 1e-8


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_lists(T, S):
    if len(T) != len(S):
        raise ValueError(f"tap lists differ in length: {len(T)} vs {len(S)}")


def cosine_similarity_map(t, s, eps: float = EPS, normalization: str = "cosine"):
    """Per-location similarity of channel vectors, shape ``(..., H, W)``.

    ``normalization="cosine"`` divides by ``|t| |s| + eps``; ``"teacher"``
    divides by ``|t|^2 + eps`` instead (the literal variant, kept for
    fidelity experiments).
    """
    _check_same_shape(t, s, "cosine_similarity_map")
    t = t.to(torch.float64)
    s = s.to(torch.float64)
    dot = (t * s).sum(dim=-3)
    tn = t.pow(2).sum(dim=-3).sqrt()
    if normalization == "cosine":
        denom = tn * s.pow(2).sum(dim=-3).sqrt()
    elif normalization == "teacher":
        denom = tn * tn
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return dot / (denom + eps)


def intra_pt_loss(T, S_hat, eps: float = EPS, normalization: str = "cosine"):
    """Sum over taps and locations of ``1 - similarity``."""
    _check_lists(T, S_hat)
    total = torch.zeros((), dtype=torch.float64)
    for t, s in zip(T, S_hat):
        total = total + (1.0 - cosine_similarity_map(t, s, eps, normalization)).sum()
    return total


def fsp_matrix(f1, f2):
    """``F[p, q] = mean over (x, y) of f1[p, x, y] * f2[q, x, y]``; shape ``(..., m, n)``."""
    if f1.shape[-2:] != f2.shape[-2:]:
        raise ValueError(f"fsp_matrix: spatial mismatch {tuple(f1.shape[-2:])} vs {tuple(f2.shape[-2:])}")
    h, w = f1.shape[-2:]
    return torch.einsum("...phw,...qhw->...pq", f1, f2) / (h * w)


def resize_feature(f, size):
    """Bilinear, corner-aligned resampling of the spatial dims to ``size``."""
    size = tuple(int(v) for v in size)
    if min(size) < 1:
        raise ValueError(f"target size must be >= (1, 1), got {size}")
    if tuple(f.shape[-2:]) == size:
        return f
    lead = f.shape[:-2]
    x = f.reshape(-1, 1, *f.shape[-2:])
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=True)
    return x.reshape(*lead, *size)


def inter_rt_loss(T, S_hat, ref_index=None):
    """Dense FSP loss over unordered tap pairs, after resizing to ``T[ref_index]``.

    ``ref_index`` defaults to the fifth tap (the deepest tap of the standard
    five-tap layout), or the last tap for shorter lists.
    """
    _check_lists(T, S_hat)
    for t, s in zip(T, S_hat):
        _check_same_shape(t, s, "inter_rt_loss")
    if len(T) < 2:
        return torch.zeros((), dtype=torch.float64)
    if ref_index is None:
        ref_index = min(4, len(T) - 1)
    if not -len(T) <= ref_index < len(T):
        raise ValueError(f"ref_index {ref_index} out of range for {len(T)} taps")
    size = T[ref_index].shape[-2:]
    rt = [resize_feature(t.to(torch.float64), size) for t in T]
    rs = [resize_feature(s.to(torch.float64), size) for s in S_hat]
    total = torch.zeros((), dtype=torch.float64)
    for a, b in combinations(range(len(T)), 2):
        diff = fsp_matrix(rt[a], rt[b]) - fsp_matrix(rs[a], rs[b])
        total = total + diff.pow(2).sum()
    return total
