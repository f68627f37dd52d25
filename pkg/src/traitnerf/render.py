"""Window-based ray sampling and discrete volume rendering of color and depth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .errors import ConfigError


@dataclass(frozen=True)
class PixelWindow:
    anchor: tuple[int, int]  # (u0, v0), top-left pixel
    size: int

    @property
    def pixels(self) -> np.ndarray:
        """Row-major ``(s*s, 2)`` array of ``(u, v)`` pixel coordinates."""
        u0, v0 = self.anchor
        v, u = np.meshgrid(np.arange(self.size) + v0, np.arange(self.size) + u0, indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)

    def crop(self, image: np.ndarray) -> np.ndarray:
        u0, v0 = self.anchor
        return image[v0:v0 + self.size, u0:u0 + self.size]


def sample_window(image_size: tuple[int, int], s: int, rng: np.random.Generator) -> PixelWindow:
    n_rows, n_cols = image_size
    if s < 1 or s > min(n_rows, n_cols):
        raise ConfigError(f"window size {s} does not fit image of size {image_size}")
    u0 = int(rng.integers(0, n_cols - s + 1))
    v0 = int(rng.integers(0, n_rows - s + 1))
    return PixelWindow((u0, v0), s)


@dataclass
class RaySamples:
    t: torch.Tensor  # (..., K)
    sigma: torch.Tensor  # (..., K)
    color: torch.Tensor  # (..., K, 3)


def sample_depths(n_rays: int, near: float, far: float, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``(n_rays, k)`` depths: bin centers, or one uniform draw per bin when ``rng`` is given."""
    width = (far - near) / k
    offsets = np.full((n_rays, k), 0.5) if rng is None else rng.random((n_rays, k))
    return near + (np.arange(k)[None, :] + offsets) * width


def composite_weights(samples: RaySamples, tail: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample compositing weights and the residual transmittance.

    Intervals are ``t[k+1] - t[k]``; the last sample uses ``tail``.
    """
    t = torch.as_tensor(samples.t, dtype=samples.sigma.dtype)
    tail_col = torch.full_like(t[..., :1], float(tail))
    delta = torch.cat([t[..., 1:] - t[..., :-1], tail_col], dim=-1)
    tau = samples.sigma * delta
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    weights = trans * -torch.expm1(-tau)
    return weights, torch.exp(-acc[..., -1])


def composite_color(weights: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
    return (weights[..., None] * color).sum(dim=-2)


def composite_depth(weights: torch.Tensor, t) -> torch.Tensor:
    return (weights * torch.as_tensor(t, dtype=weights.dtype)).sum(dim=-1)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (N, 3)
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, K)

    @property
    def depth_valid(self) -> np.ndarray:
        return self.opacity.detach().numpy() > 1e-6


def render_rays(model, volume, inputs, origins: np.ndarray, dirs: np.ndarray, near: float, far: float, k: int,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Sample, decode and composite a batch of rays through ``model``'s field."""
    from .field import sample_encoding, sample_view_inputs

    t = sample_depths(len(origins), near, far, k, rng)
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d = np.broadcast_to(dirs[:, None, :], x.shape)
    flat_x = x.reshape(-1, 3)
    s, valid = sample_encoding(volume, flat_x)
    c_img, c_tra = sample_view_inputs(inputs, flat_x)
    out = model.decoder(flat_x, d.reshape(-1, 3), s, c_img, c_tra)
    sigma = out.sigma * torch.from_numpy(valid.astype(np.float64))
    samples = RaySamples(torch.from_numpy(t), sigma.reshape(t.shape), out.color.reshape(*t.shape, 3))
    weights, t_final = composite_weights(samples, (far - near) / k)
    return RenderOutput(composite_color(weights, samples.color), composite_depth(weights, samples.t),
                        1.0 - t_final, weights)


def render_pixels(model, volume, inputs, camera: geometry.Camera, uv: np.ndarray, near: float, far: float, k: int,
                  rng: np.random.Generator | None = None, chunk: int | None = None) -> RenderOutput:
    origins, dirs = geometry.pixel_rays(camera, uv)
    if chunk is None or len(uv) <= chunk:
        return render_rays(model, volume, inputs, origins, dirs, near, far, k, rng)
    parts = [render_rays(model, volume, inputs, origins[i:i + chunk], dirs[i:i + chunk], near, far, k, rng)
             for i in range(0, len(uv), chunk)]
    return RenderOutput(*(torch.cat([getattr(p, f) for p in parts]) for f in ("color", "depth", "opacity", "weights")))


def render_window(model, inputs, target_camera: geometry.Camera, window: PixelWindow, k: int | None = None,
                  rng: np.random.Generator | None = None, volume=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Color ``(s, s, 3)`` and depth ``(s, s)`` patches for one window of the target view."""
    if volume is None:
        volume = model.encode(inputs)
    k = len(inputs.hypotheses) if k is None else k
    out = render_pixels(model, volume, inputs, target_camera, window.pixels, inputs.near, inputs.far, k, rng)
    s = window.size
    return out.color.reshape(s, s, 3), out.depth.reshape(s, s)


def render_image(model, inputs, camera: geometry.Camera, k: int | None = None, chunk: int = 4096) -> RenderOutput:
    """Full-frame render without gradients; bin-center depth samples."""
    k = len(inputs.hypotheses) if k is None else k
    with torch.no_grad():
        volume = model.encode(inputs)
        return render_pixels(model, volume, inputs, camera, geometry.pixel_grid(*camera.image_size),
                             inputs.near, inputs.far, k, None, chunk)
