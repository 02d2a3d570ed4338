"""Absolute translation error after rigid (no scale) alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import TrajectoryRecord
from .errors import InsufficientOverlapError


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray  # per associated pose, meters
    axis_rmse: np.ndarray  # after alignment, per x/y/z
    mean: float
    median: float
    max: float
    pairs: int
    rotation: np.ndarray
    translation: np.ndarray


def associate(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
              max_dt: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i_est, i_gt)`` matching each estimate to its nearest ground-truth time."""
    te = np.array([r.t for r in estimate], dtype=float)
    tg = np.array([r.t for r in ground_truth], dtype=float)
    if len(te) == 0 or len(tg) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(tg, te), 1, max(len(tg) - 1, 1))
    j0 = np.clip(j - 1, 0, len(tg) - 1)
    j1 = np.clip(j, 0, len(tg) - 1)
    pick = np.where(np.abs(tg[j0] - te) <= np.abs(tg[j1] - te), j0, j1)
    ok = np.abs(tg[pick] - te) <= max_dt
    return np.flatnonzero(ok), pick[ok]


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` with ``dst ~ R @ src + t`` (Kabsch, reflection-safe)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def evaluate_ate(estimate: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
                 max_dt: float = 0.02) -> AteResult:
    ie, ig = associate(estimate, ground_truth, max_dt)
    if len(ie) < 3:
        raise InsufficientOverlapError(
            f"only {len(ie)} estimate/ground-truth pairs within {max_dt} s; need at least 3")
    est = np.array([estimate[i].p for i in ie], dtype=float)
    gt = np.array([ground_truth[i].p for i in ig], dtype=float)
    R, t = align_rigid(est, gt)
    diff = est @ R.T + t - gt
    err = np.linalg.norm(diff, axis=1)
    return AteResult(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        errors=err,
        axis_rmse=np.sqrt(np.mean(diff ** 2, axis=0)),
        mean=float(err.mean()),
        median=float(np.median(err)),
        max=float(err.max()),
        pairs=len(ie),
        rotation=R,
        translation=t,
    )
