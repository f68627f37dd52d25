"""Neural encoding volume and the conditional radiance decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geometry
from .diffcore import DTYPE, bilinear_plan, gather, trilinear_plan
from .encoder import CostVolume, SceneInputs
from .errors import NonFiniteError


@dataclass
class EncodingVolume:
    data: torch.Tensor  # (H, W, D, C2)
    camera: geometry.Camera
    hypotheses: geometry.DepthHypotheses


@dataclass
class RadianceSample:
    sigma: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)


class Aggregator(nn.Module):
    """Two-level 3D encoder-decoder with a skip connection (16 -> 32 -> 16 -> 8 by default)."""

    def __init__(self, in_channels: int = 16, mid_channels: int = 32, out_channels: int = 8,
                 compute_dtype: torch.dtype = DTYPE):
        super().__init__()
        self.compute_dtype = compute_dtype
        self.down = nn.Conv3d(in_channels, mid_channels, 3, stride=2, padding=1, dtype=DTYPE)
        self.up = nn.ConvTranspose3d(mid_channels, in_channels, 3, stride=2, padding=1, dtype=DTYPE)
        self.out = nn.Conv3d(in_channels, out_channels, 3, padding=1, dtype=DTYPE)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (H, W, D, C) <-> (1, C, D, H, W)
        v = x.permute(3, 2, 0, 1).unsqueeze(0).to(self.compute_dtype)
        F = nn.functional
        cast = self._cast
        h = F.silu(F.conv3d(v, cast(self.down.weight), cast(self.down.bias), stride=2, padding=1))
        pad = self._output_padding(h.shape[2:], v.shape[2:])
        h = F.silu(F.conv_transpose3d(h, cast(self.up.weight), cast(self.up.bias), stride=2, padding=1,
                                      output_padding=pad))
        y = F.conv3d(h + v, cast(self.out.weight), cast(self.out.bias), padding=1)
        return y[0].permute(2, 3, 1, 0).to(DTYPE)

    def _cast(self, t: torch.Tensor) -> torch.Tensor:
        return t.to(self.compute_dtype)

    @staticmethod
    def _output_padding(coarse, fine) -> tuple[int, ...]:
        # a stride-2, pad-1, kernel-3 transpose conv yields 2n - 1; pad to the fine size
        return tuple(f - (2 * c - 1) for c, f in zip(coarse, fine))


def aggregate(P: CostVolume, net: Aggregator, camera: geometry.Camera, hyp: geometry.DepthHypotheses) -> EncodingVolume:
    return EncodingVolume(net(P.data), camera, hyp)


def encoding_coords(S: EncodingVolume, x: np.ndarray) -> np.ndarray:
    """Fractional ``(u, v, plane)`` voxel coordinates of world points."""
    uv, z = geometry.project_points(S.camera, x)
    vals = S.hypotheses.values
    k = (z - vals[0]) / (vals[-1] - vals[0]) * (len(vals) - 1)
    coords = np.concatenate([uv, k[..., None]], axis=-1)
    coords[~(z > 0)] = np.nan
    return coords


def sample_encoding(S: EncodingVolume, x: np.ndarray) -> tuple[torch.Tensor, np.ndarray]:
    """Trilinear feature lookup; points outside the frustum are clamped and flagged invalid."""
    x = np.asarray(x, dtype=np.float64)
    index, weight, valid = trilinear_plan(encoding_coords(S, x), tuple(S.data.shape[:3]))
    feats = gather(S.data.reshape(-1, S.data.shape[-1]), index, weight)
    return feats, valid


def sample_view_inputs(inputs: SceneInputs, x: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-view colors and trait intensities at the projections of ``x``.

    Returns ``c_img`` of shape ``(N, 3V)`` and ``c_tra`` of shape ``(N, V)``;
    projections outside a view read as 0.
    """
    c_img, c_tra = [], []
    for img, tra, cam in zip(inputs.image_tensors(), inputs.trait_tensors(), inputs.cameras):
        uv, depth = geometry.project_points(cam, x)
        uv = np.where((depth > 0)[..., None], uv, np.nan)
        index, weight, _ = bilinear_plan(uv, cam.height, cam.width)
        c_img.append(gather(img.reshape(-1, 3), index, weight))
        c_tra.append(gather(tra.reshape(-1, 1), index, weight))
    return torch.cat(c_img, dim=-1), torch.cat(c_tra, dim=-1)


def positional_encoding(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``[x, sin(2^k x), cos(2^k x)]`` for ``k < n_freqs``."""
    parts = [x]
    for k in range(n_freqs):
        parts += [torch.sin(x * 2.0**k), torch.cos(x * 2.0**k)]
    return torch.cat(parts, dim=-1)


class RadianceDecoder(nn.Module):
    """MLP from (x, d, S(x), c_img, c_tra) to density and color."""

    def __init__(self, n_views: int, feat_channels: int = 8, width: int = 64, n_layers: int = 4, n_freqs: int = 4):
        super().__init__()
        self.n_freqs = n_freqs
        pe = 3 * (1 + 2 * n_freqs)
        in_dim = 2 * pe + feat_channels + 4 * n_views
        dims = [in_dim] + [width] * (n_layers - 1) + [4]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        self.n_views = n_views

    @property
    def head(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, x, d, s, c_img, c_tra) -> RadianceSample:
        x = torch.as_tensor(x, dtype=DTYPE)
        d = torch.as_tensor(d, dtype=DTYPE)
        h = torch.cat([positional_encoding(x, self.n_freqs), positional_encoding(d, self.n_freqs), s, c_img, c_tra], -1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = nn.functional.silu(h)
        return RadianceSample(nn.functional.softplus(h[..., 0]), torch.sigmoid(h[..., 1:4]))


def decode(x, d, s, c_img, c_tra, net: RadianceDecoder) -> RadianceSample:
    for p in net.parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteError("decoder parameters contain non-finite values")
    return net(x, d, s, c_img, c_tra)
