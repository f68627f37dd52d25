"""Scene manifests, PNG images and depth sidecars on disk."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry, synth
from .encoder import SceneInputs

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


def write_png_rgb(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)


def write_png_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def write_png_depth_mm(path, depth: np.ndarray) -> None:
    """16-bit PNG holding depth in thousandths of a scene unit."""
    mm = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        return arr.astype(np.float64) / 1000.0
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    values = np.unique(arr)
    if not np.all(np.isin(values, [0.0, 1.0])):
        raise ValueError(f"trait mask {path} must only hold 0 and 255")
    return arr > 0.5


def write_dataset(scene: synth.SyntheticScene, out_dir) -> Path:
    """Rasterize every arc view of ``scene`` and write images plus manifest."""
    out = Path(out_dir)
    try:
        for sub in ("images", "traits", "depth", "pseudo"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    cfg = scene.config
    views = []
    for i, cam in enumerate(scene.cameras):
        bundle = synth.rasterize(scene, cam)
        name = f"view_{i:03d}"
        write_png_rgb(out / "images" / f"{name}.png", bundle.color)
        write_png_mask(out / "traits" / f"{name}.png", bundle.trait)
        np.save(out / "depth" / f"{name}.npy", bundle.depth)
        pse = synth.pseudo_depth(bundle.depth, cfg.pseudo_scale, cfg.pseudo_shift, cfg.pseudo_noise,
                                 seed=scene.seed * 1000 + i, valid=bundle.valid)
        np.save(out / "pseudo" / f"{name}.npy", pse)
        entry = {
            "id": i,
            "image_path": f"images/{name}.png",
            "trait_path": f"traits/{name}.png",
            "depth_path": f"depth/{name}.npy",
            "pseudo_depth_path": f"pseudo/{name}.npy",
            "angle_deg": float(scene.angles_deg[i]),
            "near": cfg.near,
            "far": cfg.far,
        }
        entry.update({k: v for k, v in cam.to_dict().items() if k != "image_size"})
        views.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "extrinsics": "world_to_camera",
        "image_size": list(cfg.image_size),
        "input_views": scene.input_views,
        "supervision_views": scene.supervision_views,
        "heldout_views": scene.heldout_views,
        "scene": {"seed": scene.seed, "config": cfg.to_dict()},
        "views": views,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out / MANIFEST


@dataclass
class View:
    id: int
    camera: geometry.Camera
    near: float
    far: float
    image: np.ndarray
    trait: np.ndarray
    depth: np.ndarray | None
    pseudo_depth: np.ndarray | None


class Dataset:
    def __init__(self, root, manifest: dict, views: dict[int, View]):
        self.root = Path(root)
        self.manifest = manifest
        self.views = views

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        manifest_path = path / MANIFEST if path.is_dir() else path
        if not manifest_path.exists():
            raise FileNotFoundError(f"no scene manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        root = manifest_path.parent
        size = tuple(manifest["image_size"])
        views = {}
        for entry in manifest["views"]:
            cam = geometry.Camera.from_dict(entry, size)
            depth = np.load(root / entry["depth_path"]) if entry.get("depth_path") else None
            pseudo = np.load(root / entry["pseudo_depth_path"]) if entry.get("pseudo_depth_path") else None
            image = read_png(root / entry["image_path"])
            if image.ndim == 2:
                image = np.repeat(image[..., None], 3, axis=2)
            views[int(entry["id"])] = View(int(entry["id"]), cam, float(entry["near"]), float(entry["far"]),
                                           image[..., :3], read_mask(root / entry["trait_path"]), depth, pseudo)
        return cls(root, manifest, views)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.manifest["image_size"])

    @property
    def input_views(self) -> list[int]:
        return list(self.manifest["input_views"])

    @property
    def supervision_views(self) -> list[int]:
        return list(self.manifest.get("supervision_views", []))

    @property
    def heldout_views(self) -> list[int]:
        return list(self.manifest.get("heldout_views", []))

    def scene_inputs(self, n_depth: int, n_views: int | None = None) -> SceneInputs:
        ids = self.input_views if n_views is None else self.input_views[:n_views]
        ref = self.views[ids[0]]
        hyp = geometry.depth_hypotheses(ref.near, ref.far, n_depth)
        return SceneInputs([self.views[i].image for i in ids], [self.views[i].trait.astype(np.float64) for i in ids],
                           [self.views[i].camera for i in ids], hyp, ref.near, ref.far)
