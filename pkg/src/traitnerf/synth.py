"""Synthetic finger scenes: textured elliptic cylinders seen from a camera arc.

The cylinder axis is the local y axis.  Its cross-section is the ellipse
``(x/b)^2 + (z/a)^2 = 1``, so ``a`` is the semi-axis facing the central
camera of the arc and ``b`` the lateral one.  Surface texture is addressed by
the parametric angle ``theta`` (``x = b sin theta``, ``z = -a cos theta``) and
the axial coordinate ``y``.  Depth maps store the distance along the unit
pixel ray.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .errors import ConfigError

MIN_FOREGROUND_FRACTION = 0.30


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (320, 200)  # (n_rows, n_cols)
    semi_axes: tuple[float, float] = (0.6, 0.7)  # (a, b)
    length: float = 8.0
    tilt_deg: float = 0.0
    camera_distance: float = 3.0
    focal_scale: float = 1.25  # focal length in units of image width
    arc_deg: float = 60.0
    n_arc_views: int = 31
    n_input_views: int = 3
    n_heldout_views: int = 20
    input_views: tuple[int, ...] | None = None
    near: float = 2.0
    far: float = 3.6
    trait: str = "ridge"  # "ridge" (fingerprint-like) or "vein"
    ridge_period: float = 0.3
    pseudo_scale: float = -0.5
    pseudo_shift: float = 7.0
    pseudo_noise: float = 0.01

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("image_size", "semi_axes", "input_views"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass
class Texture:
    phases: np.ndarray
    creases: np.ndarray
    veins: list[np.ndarray] = field(default_factory=list)  # polylines in (arc length, y)


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    cameras: list[geometry.Camera]
    angles_deg: np.ndarray
    input_views: list[int]  # reference first
    supervision_views: list[int]
    heldout_views: list[int]
    texture: Texture
    pose_rotation: np.ndarray  # local -> world

    @property
    def semi_axes(self) -> tuple[float, float]:
        return self.config.semi_axes


@dataclass
class ViewBundle:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    trait: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) ray distance, 0 on background
    valid: np.ndarray  # (H, W) foreground mask


def _arc_cameras(cfg: SceneConfig) -> tuple[list[geometry.Camera], np.ndarray]:
    n_rows, n_cols = cfg.image_size
    f = cfg.focal_scale * n_cols
    K = np.array([[f, 0.0, (n_cols - 1) / 2.0], [0.0, f, (n_rows - 1) / 2.0], [0.0, 0.0, 1.0]])
    angles = np.linspace(-cfg.arc_deg / 2, cfg.arc_deg / 2, cfg.n_arc_views)
    cams = []
    for phi in np.deg2rad(angles):
        center = cfg.camera_distance * np.array([np.sin(phi), 0.0, -np.cos(phi)])
        R, t = geometry.look_at(center, np.zeros(3))
        cams.append(geometry.Camera(K, R, t, cfg.image_size))
    return cams, angles


def _choose_splits(cfg: SceneConfig, rng: np.random.Generator) -> tuple[list[int], list[int], list[int]]:
    n = cfg.n_arc_views
    if cfg.input_views is not None:
        inputs = list(cfg.input_views)
    else:
        spread = np.linspace(0, n - 1, cfg.n_input_views + 2)[1:-1]
        inputs = sorted({int(round(x)) for x in spread})
        center = min(inputs, key=lambda i: abs(i - (n - 1) / 2))
        inputs = [center] + [i for i in inputs if i != center]
    if len(inputs) != cfg.n_input_views or len(set(inputs)) != len(inputs) or not all(0 <= i < n for i in inputs):
        raise ConfigError(f"invalid input views {inputs} for {n} arc views")
    rest = [i for i in range(n) if i not in inputs]
    if cfg.n_heldout_views > len(rest):
        raise ConfigError(f"{cfg.n_heldout_views} held-out views requested, only {len(rest)} free")
    heldout = sorted(int(i) for i in rng.choice(rest, size=cfg.n_heldout_views, replace=False))
    supervision = [i for i in rest if i not in heldout]
    return inputs, supervision, heldout


def _make_texture(cfg: SceneConfig, rng: np.random.Generator) -> Texture:
    phases = rng.uniform(0, 2 * np.pi, size=8)
    creases = np.sort(rng.uniform(-cfg.length / 3, cfg.length / 3, size=3))
    veins = []
    if cfg.trait == "vein":
        a, b = cfg.semi_axes
        half_arc = np.pi * 0.5 * (a + b) * 0.9
        for _ in range(4):
            ys = np.linspace(-cfg.length / 2, cfg.length / 2, 33)
            w = rng.uniform(-half_arc * 0.6, half_arc * 0.6) + np.cumsum(rng.normal(0, 0.06, size=len(ys)))
            veins.append(np.stack([w, ys], axis=1))
        for _ in range(4):
            parent = veins[int(rng.integers(0, 4))]
            j = int(rng.integers(4, len(parent) - 8))
            steps = int(rng.integers(4, 8))
            direction = rng.choice([-1.0, 1.0])
            pts = [parent[j]]
            for _ in range(steps):
                pts.append(pts[-1] + np.array([direction * rng.uniform(0.05, 0.12), rng.uniform(0.1, 0.25)]))
            veins.append(np.array(pts))
    elif cfg.trait != "ridge":
        raise ConfigError(f"unknown trait kind {cfg.trait!r}")
    return Texture(phases, creases, veins)


def make_scene(config: SceneConfig | None = None, seed: int = 0) -> SyntheticScene:
    cfg = config or SceneConfig()
    if cfg.n_arc_views < 3 or cfg.n_input_views < 2:
        raise ConfigError("scene needs >= 3 arc cameras and >= 2 input views")
    if not 0 < cfg.arc_deg < 180:
        raise ConfigError(f"camera arc must span (0, 180) degrees, got {cfg.arc_deg}")
    a, b = cfg.semi_axes
    if cfg.camera_distance <= max(a, b):
        raise ConfigError("cameras must sit outside the cylinder")
    if not 0 < cfg.near < cfg.far:
        raise ConfigError(f"invalid depth range [{cfg.near}, {cfg.far}]")
    rng = np.random.default_rng(seed)
    cams, angles = _arc_cameras(cfg)
    inputs, supervision, heldout = _choose_splits(cfg, rng)
    tilt = np.deg2rad(cfg.tilt_deg)
    pose = np.array([[np.cos(tilt), -np.sin(tilt), 0.0], [np.sin(tilt), np.cos(tilt), 0.0], [0.0, 0.0, 1.0]])
    scene = SyntheticScene(cfg, seed, cams, angles, inputs, supervision, heldout, _make_texture(cfg, rng), pose)
    for i, cam in enumerate(cams):
        _, hit, _ = intersect(scene, *geometry.pixel_rays(cam, geometry.pixel_grid(*cam.image_size)))
        if hit.mean() < MIN_FOREGROUND_FRACTION:
            raise ConfigError(f"camera {i} sees only {hit.mean():.0%} cylinder pixels")
    return scene


def intersect(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest ray/side-surface hit.  Returns ``(t, hit, local_points)``."""
    a, b = scene.semi_axes
    P = scene.pose_rotation
    o = origins @ P  # world -> local (P is orthonormal)
    d = dirs @ P
    A = (d[:, 0] / b) ** 2 + (d[:, 2] / a) ** 2
    B = 2 * (o[:, 0] * d[:, 0] / b**2 + o[:, 2] * d[:, 2] / a**2)
    C = (o[:, 0] / b) ** 2 + (o[:, 2] / a) ** 2 - 1
    disc = B * B - 4 * A * C
    ok = (disc >= 0) & (A > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = np.stack([(-B - sq) / (2 * A), (-B + sq) / (2 * A)], axis=1)
    half = scene.config.length / 2
    t = np.full(len(o), np.inf)
    for r in (roots[:, 1], roots[:, 0]):  # nearer root wins
        y = o[:, 1] + r * d[:, 1]
        good = ok & (r > 1e-9) & (np.abs(y) <= half)
        t = np.where(good, r, t)
    hit = np.isfinite(t)
    t = np.where(hit, t, 0.0)
    return t, hit, o + t[:, None] * d


def _surface_angle(scene: SyntheticScene, local: np.ndarray) -> np.ndarray:
    a, b = scene.semi_axes
    return np.arctan2(local[:, 0] / b, -local[:, 2] / a)


def _trait_mask(scene: SyntheticScene, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    cfg, tex = scene.config, scene.texture
    if cfg.trait == "ridge":
        wobble = 0.35 * np.sin(1.3 * theta + tex.phases[0]) + 0.12 * theta**2
        return np.sin(2 * np.pi * (y + wobble) / cfg.ridge_period + tex.phases[1]) > 0.4
    a, b = scene.semi_axes
    w = theta * 0.5 * (a + b)
    pts = np.stack([w, y], axis=1)
    best = np.full(len(pts), np.inf)
    for line in tex.veins:
        p0, p1 = line[:-1], line[1:]
        seg = p1 - p0
        rel = pts[:, None, :] - p0[None]
        lam = np.clip((rel * seg[None]).sum(-1) / (seg * seg).sum(-1)[None], 0, 1)
        dist = np.linalg.norm(rel - lam[..., None] * seg[None], axis=-1).min(axis=1)
        best = np.minimum(best, dist)
    return best < 0.045


def _albedo(scene: SyntheticScene, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    tex = scene.texture
    skin = np.array([0.86, 0.64, 0.54])
    mod = (0.8 + 0.12 * np.sin(2 * np.pi * y / 1.7 + tex.phases[2]) * np.sin(3 * theta + tex.phases[3])
           + 0.08 * np.sin(2 * np.pi * y / 0.9 + 2 * theta + tex.phases[4]))
    for yc in tex.creases:
        mod = mod * (1 - 0.25 * np.exp(-(((y - yc) / 0.08) ** 2)))
    tint = 1 + 0.06 * np.sin(theta * 2 + tex.phases[5])[:, None] * np.array([1.0, -0.5, -0.5])
    return np.clip(mod[:, None] * skin[None] * tint, 0, 1)


_LIGHT = np.array([0.3, -0.4, -1.0]) / np.linalg.norm([0.3, -0.4, -1.0])


def shade_points(scene: SyntheticScene, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """View-independent color and trait flag for local surface points."""
    a, b = scene.semi_axes
    theta = _surface_angle(scene, local)
    y = local[:, 1]
    trait = _trait_mask(scene, theta, y)
    n_local = np.stack([local[:, 0] / b**2, np.zeros(len(local)), local[:, 2] / a**2], axis=1)
    n_world = n_local @ scene.pose_rotation.T
    n_world /= np.linalg.norm(n_world, axis=1, keepdims=True)
    shade = 0.45 + 0.55 * np.clip(n_world @ _LIGHT, 0, None)
    color = _albedo(scene, theta, y) * (1 - 0.45 * trait)[:, None] * shade[:, None]
    return np.clip(color, 0, 1), trait


def rasterize(scene: SyntheticScene, cam: geometry.Camera) -> ViewBundle:
    n_rows, n_cols = cam.image_size
    origins, dirs = geometry.pixel_rays(cam, geometry.pixel_grid(n_rows, n_cols))
    t, hit, local = intersect(scene, origins, dirs)
    color = np.zeros((len(t), 3))
    trait = np.zeros(len(t), dtype=bool)
    if hit.any():
        color[hit], trait[hit] = shade_points(scene, local[hit])
    return ViewBundle(color.reshape(n_rows, n_cols, 3), trait.reshape(n_rows, n_cols),
                      t.reshape(n_rows, n_cols), hit.reshape(n_rows, n_cols))


def pseudo_depth(gt_depth: np.ndarray, a: float, b: float, noise_sigma: float, seed: int = 0,
                 valid: np.ndarray | None = None) -> np.ndarray:
    """Affine-distorted, noisy copy of the foreground depth with clutter on the background."""
    if a == 0:
        raise ValueError("pseudo-depth scale must be non-zero")
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = gt_depth > 0 if valid is None else np.asarray(valid, dtype=bool)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sigma, size=gt_depth.shape) if noise_sigma > 0 else 0.0
    fg = a * gt_depth + b + noise
    lo, hi = (np.min(fg[valid]), np.max(fg[valid])) if valid.any() else (0.0, 1.0)
    span = max(hi - lo, 1.0)
    clutter = rng.uniform(lo - span, hi + span, size=gt_depth.shape)
    return np.where(valid, fg, clutter)
