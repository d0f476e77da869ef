"""Counting metrics: MAE, MSE (root mean square), GAME and the boosting ratio."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


def _pair(preds, gts):
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.size == 0 or p.size != g.size:
        raise ValueError(f"need equal, non-empty count lists (got {p.size} and {g.size})")
    return p, g


def mae(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g)))


def mse(preds, gts) -> float:
    """Root of the mean squared count error, as customary in crowd counting."""
    p, g = _pair(preds, gts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def grid_edges(size: int, cuts: int):
    # floor(i * size / cuts): partitions at level L + 1 refine those at level L
    return [(i * size) // cuts for i in range(cuts + 1)]


def game(pred_map, gt_map, level: int) -> float:
    """Per-image GAME: absolute count errors summed over a 2^L x 2^L grid of cells.

    The result is the exact value rounded once, so refining the grid can
    never lower it through rounding.
    """
    pred = np.asarray(pred_map, dtype=np.float64)
    gt = np.asarray(gt_map, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"maps must be 2-D and equal in shape: {pred.shape} vs {gt.shape}")
    if level < 0:
        raise ValueError("level must be >= 0")
    cuts = 2 ** level
    h, w = pred.shape
    if h < cuts or w < cuts:
        raise ValueError(f"map {h}x{w} too small for GAME level {level}")
    rows, cols = grid_edges(h, cuts), grid_edges(w, cuts)
    terms = []
    for r0, r1 in zip(rows[:-1], rows[1:]):
        for c0, c1 in zip(cols[:-1], cols[1:]):
            cell = np.concatenate([pred[r0:r1, c0:c1].ravel(), -gt[r0:r1, c0:c1].ravel()])
            # fsum is correctly rounded, so its sign is the sign of the exact cell error
            if math.fsum(cell) < 0:
                cell = -cell
            terms.append(cell)
    return math.fsum(np.concatenate(terms))


def mean_game(pred_maps, gt_maps, level: int) -> float:
    if len(pred_maps) == 0 or len(pred_maps) != len(gt_maps):
        raise ValueError("need equal, non-empty lists of maps")
    return float(np.mean([game(p, g, level) for p, g in zip(pred_maps, gt_maps)]))


def boosting_ratio(teacher_perf: float, student_perf: float) -> float:
    """Teacher error over student error; above 1 means the student is better."""
    if not student_perf > 0:
        raise ValueError("student performance must be positive")
    return float(teacher_perf) / float(student_perf)


@dataclass
class EvalResult:
    mae: float
    mse: float
    n: int
    game: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["game"] = {str(k): v for k, v in self.game.items()}
        return d


def evaluate_maps(pred_maps, gt_maps, game_max_level: int = 3) -> EvalResult:
    """Score lists of per-scene predicted and ground-truth 2-D density maps.

    Count errors are taken from ``game(..., 0)``, so the reported MAE and
    GAME^0 agree bit for bit.
    """
    pred_maps = [np.asarray(p, dtype=np.float64) for p in pred_maps]
    gt_maps = [np.asarray(g, dtype=np.float64) for g in gt_maps]
    if len(pred_maps) == 0 or len(pred_maps) != len(gt_maps):
        raise ValueError("need equal, non-empty lists of maps")
    errors = [game(p, g, 0) for p, g in zip(pred_maps, gt_maps)]
    zeros = [0.0] * len(errors)
    games = {}
    for level in range(game_max_level + 1):
        if all(min(np.shape(g)) >= 2 ** level for g in gt_maps):
            games[level] = mean_game(pred_maps, gt_maps, level)
    return EvalResult(mae(errors, zeros), mse(errors, zeros), len(errors), games)
