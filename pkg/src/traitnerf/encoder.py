"""Image/trait features, plane-sweep volumes, epipolar attention, cost volume."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import geometry
from .diffcore import DTYPE, bilinear_plan, gather_matrix, softmax
from .errors import ConfigError, DegenerateAttentionError, InsufficientViewsError, ShapeError


@dataclass
class FeatureMap:
    data: torch.Tensor  # (H, W, C)
    view_index: int
    kind: str  # "image" | "trait"


@dataclass
class FeatureVolume:
    data: torch.Tensor  # (H, W, D, C)
    valid: np.ndarray  # (H, W, D) bool, False where the sample left the source frustum
    view_index: int
    kind: str


@dataclass
class CostVolume:
    data: torch.Tensor  # (H, W, D, 2 * C)


class FeatureNet(nn.Module):
    """Stride-1 3x3 conv stack, full resolution, linear last layer."""

    def __init__(self, in_channels: int, out_channels: int = 8, hidden: int = 8, n_layers: int = 3):
        super().__init__()
        widths = [in_channels] + [hidden] * (n_layers - 1) + [out_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=3, padding=1, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = image.permute(2, 0, 1).unsqueeze(0)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = nn.functional.silu(x)
        return x[0].permute(1, 2, 0)


def _as_image_tensor(image, channels: int, expected_size: tuple[int, int] | None) -> torch.Tensor:
    img = torch.as_tensor(np.asarray(image, dtype=np.float64) if not isinstance(image, torch.Tensor) else image,
                          dtype=DTYPE)
    if img.dim() == 2:
        img = img[..., None]
    if img.shape[-1] != channels:
        raise ConfigError(f"expected {channels} channels, got image of shape {tuple(img.shape)}")
    if expected_size is not None and tuple(img.shape[:2]) != tuple(expected_size):
        raise ConfigError(f"image size {tuple(img.shape[:2])} does not match configured {tuple(expected_size)}")
    return img


def extract_features(image, net: FeatureNet, view_index: int = 0, expected_size=None) -> FeatureMap:
    img = _as_image_tensor(image, net.in_channels, expected_size)
    return FeatureMap(net(img), view_index, "image")


def extract_trait_features(trait_image, net: FeatureNet, view_index: int = 0, expected_size=None) -> FeatureMap:
    img = _as_image_tensor(trait_image, net.in_channels, expected_size)
    values = torch.unique(img)
    if not bool(((values == 0) | (values == 1)).all()):
        raise ConfigError("trait image must be binary with values in {0, 1}")
    return FeatureMap(net(img), view_index, "trait")


@dataclass
class WarpPlan:
    """Precomputed bilinear lookups of one source view onto the reference frustum."""

    index: np.ndarray  # (H*W*D, 4)
    weight: np.ndarray
    valid: np.ndarray  # (H, W, D)
    shape: tuple[int, int, int]
    n_source: int = 0
    _matrices: dict = field(default_factory=dict, repr=False)

    def matrix(self, dtype: torch.dtype) -> torch.Tensor:
        """Sparse ``(H*W*D, source pixels)`` interpolation matrix, cached per dtype."""
        if dtype not in self._matrices:
            self._matrices[dtype] = gather_matrix(self.index, self.weight, self.n_source, dtype)
        return self._matrices[dtype]


def warp_plan(src: geometry.Camera, ref: geometry.Camera, hyp: geometry.DepthHypotheses, n1=(0.0, 0.0, 1.0)) -> WarpPlan:
    n_rows, n_cols = ref.image_size
    grid = geometry.pixel_grid(n_rows, n_cols)
    homo = np.concatenate([grid, np.ones((len(grid), 1))], axis=1)  # (HW, 3)
    Hs = geometry.homographies(src, ref, hyp.values, n1)  # (D, 3, 3)
    mapped = np.einsum("dij,pj->pdi", Hs, homo)  # (HW, D, 3)
    w = mapped[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.where(w[..., None] > 0, mapped[..., :2] / w[..., None], np.nan)
    index, weight, valid = bilinear_plan(uv.reshape(-1, 2), src.height, src.width)
    shape = (n_rows, n_cols, len(hyp))
    return WarpPlan(index, weight, valid.reshape(shape), shape, src.height * src.width)


def warp_feature_volume(fmap: FeatureMap, src: geometry.Camera, ref: geometry.Camera,
                        hyp: geometry.DepthHypotheses, plan: WarpPlan | None = None) -> FeatureVolume:
    """Sample ``fmap`` at the homography image of each reference pixel on every depth plane."""
    if plan is None:
        plan = warp_plan(src, ref, hyp)
    channels = fmap.data.shape[-1]
    table = fmap.data.reshape(-1, channels)
    flat = torch.sparse.mm(plan.matrix(table.dtype), table)
    return FeatureVolume(flat.reshape(*plan.shape, channels), plan.valid, fmap.view_index, fmap.kind)


def attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """``softmax(Q K^T) V`` over the last two axes, batched over leading axes.

    No ``1/sqrt(c)`` temperature is applied.
    """
    if K.shape[-2] == 0:
        raise DegenerateAttentionError("attention needs at least one key")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention shapes incompatible: Q {tuple(Q.shape)}, K {tuple(K.shape)}, V {tuple(V.shape)}")
    weights = softmax(Q @ K.transpose(-1, -2), dim=-1)
    return weights @ V


def epipolar_self_attention(vol: FeatureVolume) -> FeatureVolume:
    """Per reference pixel, attend over the depth samples of its epipolar slice."""
    g = vol.data
    return FeatureVolume(attention(g, g, g), vol.valid, vol.view_index, vol.kind)


def epipolar_cross_attention(src_self: FeatureVolume, ref_self: FeatureVolume, src_trait_self: FeatureVolume,
                             ref_trait_self: FeatureVolume) -> tuple[FeatureVolume, FeatureVolume]:
    """Image cross-attention against the reference and its trait-guided twin.

    The trait variant uses trait features as queries/keys and retrieves
    reference image features.
    """
    shapes = {tuple(v.data.shape) for v in (src_self, ref_self, src_trait_self, ref_trait_self)}
    if len(shapes) != 1:
        raise ShapeError(f"cross-attention inputs disagree in shape: {sorted(shapes)}")
    e = attention(src_self.data, ref_self.data, ref_self.data)
    e_hat = attention(src_trait_self.data, ref_trait_self.data, ref_self.data)
    return (FeatureVolume(e, src_self.valid, src_self.view_index, "image"),
            FeatureVolume(e_hat, src_self.valid, src_self.view_index, "trait"))


def masked_variance(stack: torch.Tensor, mask: np.ndarray | None = None) -> torch.Tensor:
    """Population variance over axis 0 of ``(V, ..., C)``, ignoring masked-out views.

    ``mask`` has shape ``(V, ...)``.  Where fewer than two views remain the
    variance is defined as 0.
    """
    # shifting by one view leaves the variance unchanged and makes identical views exactly 0
    stack = stack - stack[:1].detach()
    if mask is None:
        mean = stack.mean(dim=0)
        return ((stack - mean) ** 2).mean(dim=0)
    m = torch.from_numpy(np.asarray(mask, dtype=np.float64))[..., None].to(stack.dtype)
    count = m.sum(dim=0)
    safe = count.clamp(min=1)
    mean = (m * stack).sum(dim=0) / safe
    var = (m * (stack - mean) ** 2).sum(dim=0) / safe
    return torch.where(count >= 2, var, torch.zeros_like(var))


def build_cost_volume(per_view_E: Sequence[FeatureVolume], per_view_E_hat: Sequence[FeatureVolume],
                      use_mask: bool = True) -> CostVolume:
    """Cross-view variance of the concatenated image and trait attended features."""
    if len(per_view_E) != len(per_view_E_hat):
        raise ShapeError(f"{len(per_view_E)} image volumes vs {len(per_view_E_hat)} trait volumes")
    if len(per_view_E) < 2:
        raise InsufficientViewsError(f"cost volume needs >= 2 views, got {len(per_view_E)}")
    stack = torch.stack([torch.cat([e.data, eh.data], dim=-1) for e, eh in zip(per_view_E, per_view_E_hat)])
    mask = np.stack([e.valid for e in per_view_E]) if use_mask else None
    return CostVolume(masked_variance(stack, mask).to(DTYPE))


@dataclass
class SceneInputs:
    """Source views conditioning the field; view 0 is the reference."""

    images: list[np.ndarray]  # (H, W, 3) in [0, 1]
    traits: list[np.ndarray]  # (H, W) in {0, 1}
    cameras: list[geometry.Camera]
    hypotheses: geometry.DepthHypotheses
    near: float
    far: float
    _plans: list[WarpPlan] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (len(self.images) == len(self.traits) == len(self.cameras)):
            raise ShapeError("images, traits and cameras must have equal length")
        if len(self.images) < 2:
            raise InsufficientViewsError(f"need >= 2 source views, got {len(self.images)}")
        self._image_t = [torch.as_tensor(np.asarray(im, dtype=np.float64)) for im in self.images]
        self._trait_t = [torch.as_tensor(np.asarray(t, dtype=np.float64)) for t in self.traits]

    @property
    def reference(self) -> geometry.Camera:
        return self.cameras[0]

    @property
    def plans(self) -> list[WarpPlan]:
        if self._plans is None:
            self._plans = [warp_plan(cam, self.reference, self.hypotheses) for cam in self.cameras]
        return self._plans

    def image_tensors(self) -> list[torch.Tensor]:
        return self._image_t

    def trait_tensors(self) -> list[torch.Tensor]:
        return self._trait_t


class TraitGuidedEncoder(nn.Module):
    """Features -> warped volumes -> (optional) epipolar attention -> variance cost volume."""

    def __init__(self, n_c1: int = 8, hidden: int = 8, use_tgt: bool = True, compute_dtype: torch.dtype = DTYPE):
        super().__init__()
        self.compute_dtype = compute_dtype
        self.image_net = FeatureNet(3, n_c1, hidden)
        self.trait_net = FeatureNet(1, n_c1, hidden)
        self.use_tgt = use_tgt
        self.n_c1 = n_c1

    def volumes(self, inputs: SceneInputs) -> tuple[list[FeatureVolume], list[FeatureVolume]]:
        """Warped image and trait feature volumes, in the compute dtype."""
        size = inputs.reference.image_size
        G, G_hat = [], []
        for i, (img, tra, cam, plan) in enumerate(zip(inputs.image_tensors(), inputs.trait_tensors(), inputs.cameras,
                                                      inputs.plans)):
            f = extract_features(img, self.image_net, i, size)
            f_hat = extract_trait_features(tra, self.trait_net, i, size)
            # one warp for both maps
            both = FeatureMap(torch.cat([f.data, f_hat.data], dim=-1).to(self.compute_dtype), i, "both")
            vol = warp_feature_volume(both, cam, inputs.reference, inputs.hypotheses, plan)
            G.append(FeatureVolume(vol.data[..., :self.n_c1], vol.valid, i, "image"))
            G_hat.append(FeatureVolume(vol.data[..., self.n_c1:], vol.valid, i, "trait"))
        return G, G_hat

    def forward(self, inputs: SceneInputs) -> CostVolume:
        G, G_hat = self.volumes(inputs)
        if not self.use_tgt:
            return build_cost_volume(G, G_hat)
        H = [epipolar_self_attention(g) for g in G]
        H_hat = [epipolar_self_attention(g) for g in G_hat]
        E, E_hat = [], []
        for h, h_hat in zip(H, H_hat):
            e, e_hat = epipolar_cross_attention(h, H[0], h_hat, H_hat[0])
            E.append(e)
            E_hat.append(e_hat)
        return build_cost_volume(E, E_hat)
