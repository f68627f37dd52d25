"""Photometric, depth-distillation and trait-guided rendering losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import DTYPE, require_same_shape, softmax
from .errors import InsufficientDataError, ShapeError, SingularSystemError

LAMBDA_TRA = 1.0
LAMBDA_DEP = 0.1
BACKGROUND_LUMINANCE = 10.0 / 255.0


@dataclass
class DepthAlignment:
    theta_s: float
    theta_t: float
    learnable: bool = True
    init_from: str = "closed_form"  # or "carried"


@dataclass
class TraitWindowWeights:
    w: torch.Tensor  # (s, s), sums to 1


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def photometric_loss(C, C_gt) -> torch.Tensor:
    C, C_gt = _t(C), _t(C_gt)
    require_same_shape(C, C_gt, "photometric patches")
    return ((C - C_gt) ** 2).mean()


def foreground_mask(image: np.ndarray, threshold: float = BACKGROUND_LUMINANCE) -> np.ndarray:
    """Pixels brighter than the black-background threshold (Rec. 601 luma)."""
    image = np.asarray(image, dtype=np.float64)
    luma = image @ np.array([0.299, 0.587, 0.114]) if image.ndim == 3 else image
    return luma > threshold


def solve_scale_shift(D, D_pse, valid_mask) -> DepthAlignment:
    """Least-squares ``(scale, shift)`` mapping ``D`` onto ``D_pse`` over valid pixels.

    Solves the 2x2 normal equations of ``sum ([D, 1] theta - D_pse)^2``.
    """
    D = np.asarray(D.detach().numpy() if isinstance(D, torch.Tensor) else D, dtype=np.float64)
    D_pse = np.asarray(D_pse.detach().numpy() if isinstance(D_pse, torch.Tensor) else D_pse, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if not (D.shape == D_pse.shape == mask.shape):
        raise ShapeError(f"depth {D.shape}, pseudo depth {D_pse.shape} and mask {mask.shape} must agree")
    d, y = D[mask], D_pse[mask]
    if len(d) < 2:
        raise InsufficientDataError(f"scale/shift fit needs >= 2 valid pixels, got {len(d)}")
    spread = np.sum((d - d.mean()) ** 2)
    if not spread > 1e-24 * max(1.0, float(np.sum(d * d))):
        raise SingularSystemError("rendered depth is constant over the valid pixels")
    A = np.array([[np.sum(d * d), np.sum(d)], [np.sum(d), float(len(d))]])
    b = np.array([np.sum(d * y), np.sum(y)])
    theta = np.linalg.solve(A, b)
    return DepthAlignment(float(theta[0]), float(theta[1]), True, "closed_form")


def depth_distillation_loss(D, D_pse, theta_s, theta_t, valid_mask) -> torch.Tensor:
    """Mean over valid pixels of ``(theta_s * D + theta_t - D_pse)^2``."""
    D, D_pse = _t(D), _t(D_pse)
    require_same_shape(D, D_pse, "depth patches")
    mask = torch.from_numpy(np.asarray(valid_mask, dtype=bool))
    n = int(mask.sum())
    if n == 0:
        raise InsufficientDataError("depth distillation has no valid pixels")
    r = _t(theta_s) * D + _t(theta_t) - D_pse
    return (r[mask] ** 2).sum() / n


def trait_weights(C_tra) -> TraitWindowWeights:
    C_tra = _t(C_tra)
    return TraitWindowWeights(softmax(C_tra.reshape(-1), dim=0).reshape(C_tra.shape))


def _weighted_sq_norm(w: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    if r.dim() == w.dim() + 1:
        w = w[..., None]
    return ((w * r) ** 2).sum()


def first_order_loss(C, C_gt, w) -> torch.Tensor:
    C, C_gt = _t(C), _t(C_gt)
    w = w.w if isinstance(w, TraitWindowWeights) else _t(w)
    require_same_shape(C, C_gt, "rendered and target patches")
    if tuple(w.shape) != tuple(C.shape[:2]):
        raise ShapeError(f"weights {tuple(w.shape)} do not match patch {tuple(C.shape)}")
    return _weighted_sq_norm(w, C - C_gt)


def image_gradients(C: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along columns (x) and rows (y); zero on the last column/row."""
    gx = torch.zeros_like(C)
    gy = torch.zeros_like(C)
    gx[:, :-1] = C[:, 1:] - C[:, :-1]
    gy[:-1] = C[1:] - C[:-1]
    return gx, gy


def second_order_loss(C, C_gt, w) -> torch.Tensor:
    C, C_gt = _t(C), _t(C_gt)
    w = w.w if isinstance(w, TraitWindowWeights) else _t(w)
    require_same_shape(C, C_gt, "rendered and target patches")
    if C.shape[0] < 2 or C.shape[1] < 2:
        raise ShapeError(f"second-order loss needs a window of at least 2x2, got {tuple(C.shape[:2])}")
    gx, gy = image_gradients(C)
    gx_gt, gy_gt = image_gradients(C_gt)
    return _weighted_sq_norm(w, gx - gx_gt) + _weighted_sq_norm(w, gy - gy_gt)


def total_loss(l_1st, l_2nd, l_dep, lambda_tra: float = LAMBDA_TRA, lambda_dep: float = LAMBDA_DEP):
    return lambda_tra * (l_1st + l_2nd) + lambda_dep * l_dep
