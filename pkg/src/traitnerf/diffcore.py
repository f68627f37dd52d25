"""Differentiable substrate: parameter sets, gathers, checkpoints, gradient checks.

Reverse-mode differentiation itself is delegated to torch in float64; this
module adds the pieces the rest of the package relies on: named parameter
sets with exact snapshots, bilinear/trilinear gathers with validity masks,
a versioned checkpoint file, and a central-difference gradient checker.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import NonFiniteError, RankError, ShapeError

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, torch.Tensor) else x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def backward(output: torch.Tensor) -> None:
    if output.numel() != 1:
        raise RankError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    output.reshape(()).backward()


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch subtracts the row max internally
    return torch.softmax(x, dim=dim)


def require_same_shape(a, b, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


class ParameterSet:
    """Ordered name -> parameter map with exact snapshot/restore."""

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: "OrderedDict[str, torch.nn.Parameter]" = OrderedDict()
        items = params.items() if isinstance(params, Mapping) else params
        for name, p in items:
            self.add(name, p)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterSet":
        return cls((prefix + n, p) for n, p in module.named_parameters())

    def add(self, name: str, p: torch.Tensor) -> torch.nn.Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(p, torch.nn.Parameter):
            p = torch.nn.Parameter(torch.as_tensor(p, dtype=DTYPE))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> torch.nn.Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient arrays; parameters the last backward pass never reached get zeros."""
        return {
            n: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
            for n, p in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self._params.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(snap)
        if missing:
            raise KeyError(f"snapshot lacks parameters: {sorted(missing)}")
        with torch.no_grad():
            for n, p in self._params.items():
                value = np.asarray(snap[n], dtype=np.float64)
                if value.shape != tuple(p.shape):
                    raise ShapeError(f"parameter {n!r}: snapshot shape {value.shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(value))


BOUNDARY_TOL = 1e-9


def bilinear_plan(uv: np.ndarray, n_rows: int, n_cols: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner indices and weights for bilinear lookups into a row-major image.

    ``uv`` has shape ``(..., 2)``.  Returns ``(index, weight, valid)`` with
    ``index``/``weight`` of shape ``(..., 4)``.  Samples outside
    ``[0, W-1] x [0, H-1]`` get zero weights and ``valid=False``; coordinates
    within ``BOUNDARY_TOL`` of the border are snapped onto it.
    """
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    tol = BOUNDARY_TOL
    valid = (np.isfinite(u) & np.isfinite(v) & (u >= -tol) & (u <= n_cols - 1 + tol)
             & (v >= -tol) & (v <= n_rows - 1 + tol))
    u = np.where(valid, np.clip(u, 0, n_cols - 1), 0.0)
    v = np.where(valid, np.clip(v, 0, n_rows - 1), 0.0)
    u0 = np.minimum(np.floor(u), n_cols - 1).astype(np.int64)
    v0 = np.minimum(np.floor(v), n_rows - 1).astype(np.int64)
    du, dv = u - u0, v - v0
    u1 = np.minimum(u0 + 1, n_cols - 1)
    v1 = np.minimum(v0 + 1, n_rows - 1)
    index = np.stack([v0 * n_cols + u0, v0 * n_cols + u1, v1 * n_cols + u0, v1 * n_cols + u1], axis=-1)
    weight = np.stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv], axis=-1)
    weight = weight * valid[..., None]
    return index, weight, valid


def trilinear_plan(coords: np.ndarray, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eight-corner plan for lookups into a ``(rows, cols, planes)`` volume.

    ``coords[..., :]`` is ``(u, v, k)``: column, row and plane index, all
    fractional.  Out-of-range coordinates are clamped onto the boundary and
    reported through ``valid``.
    """
    n_rows, n_cols, n_planes = shape
    coords = np.asarray(coords, dtype=np.float64)
    u, v, k = coords[..., 0], coords[..., 1], coords[..., 2]
    finite = np.isfinite(u) & np.isfinite(v) & np.isfinite(k)
    tol = BOUNDARY_TOL
    valid = (finite & (u >= -tol) & (u <= n_cols - 1 + tol) & (v >= -tol) & (v <= n_rows - 1 + tol)
             & (k >= -tol) & (k <= n_planes - 1 + tol))
    u = np.clip(np.where(finite, u, 0.0), 0, n_cols - 1)
    v = np.clip(np.where(finite, v, 0.0), 0, n_rows - 1)
    k = np.clip(np.where(finite, k, 0.0), 0, n_planes - 1)
    u0 = np.minimum(np.floor(u), n_cols - 1).astype(np.int64)
    v0 = np.minimum(np.floor(v), n_rows - 1).astype(np.int64)
    k0 = np.minimum(np.floor(k), n_planes - 1).astype(np.int64)
    du, dv, dk = u - u0, v - v0, k - k0
    u1 = np.minimum(u0 + 1, n_cols - 1)
    v1 = np.minimum(v0 + 1, n_rows - 1)
    k1 = np.minimum(k0 + 1, n_planes - 1)
    idx, wts = [], []
    for vv, wv in ((v0, 1 - dv), (v1, dv)):
        for uu, wu in ((u0, 1 - du), (u1, du)):
            for kk, wk in ((k0, 1 - dk), (k1, dk)):
                idx.append((vv * n_cols + uu) * n_planes + kk)
                wts.append(wv * wu * wk)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1), valid


def gather(table: torch.Tensor, index: np.ndarray, weight: np.ndarray) -> torch.Tensor:
    """Weighted gather: ``out[..., c] = sum_j weight[..., j] * table[index[..., j], c]``.

    ``table`` is a flat ``(N, C)`` tensor.  Differentiable in ``table``.
    """
    idx = torch.from_numpy(np.ascontiguousarray(index))
    w = torch.from_numpy(np.ascontiguousarray(weight, dtype=np.float64))
    picked = table[idx.reshape(-1)].reshape(*idx.shape, table.shape[-1])
    return (picked * w[..., None]).sum(dim=-2)


def gather_matrix(index: np.ndarray, weight: np.ndarray, n_source: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """The gather plan as a sparse ``(n_out, n_source)`` matrix; ``matrix @ table`` equals :func:`gather`."""
    index = np.asarray(index).reshape(-1, index.shape[-1])
    rows = np.repeat(np.arange(index.shape[0]), index.shape[1])
    coords = torch.from_numpy(np.stack([rows, index.ravel()]))
    values = torch.from_numpy(np.ascontiguousarray(weight, dtype=np.float64).ravel()).to(dtype)
    return torch.sparse_coo_tensor(coords, values, (index.shape[0], n_source), check_invariants=False).coalesce()


def trilinear_gather(volume: torch.Tensor, coords: np.ndarray) -> tuple[torch.Tensor, np.ndarray]:
    """Sample a ``(rows, cols, planes, C)`` volume at fractional ``(u, v, k)`` coordinates."""
    shape = tuple(volume.shape[:3])
    index, weight, valid = trilinear_plan(coords, shape)
    return gather(volume.reshape(-1, volume.shape[-1]), index, weight), valid


def bilinear_gather(image: torch.Tensor, uv: np.ndarray) -> tuple[torch.Tensor, np.ndarray]:
    """Sample a ``(rows, cols, C)`` map at fractional ``(u, v)``; zero outside."""
    index, weight, valid = bilinear_plan(uv, image.shape[0], image.shape[1])
    return gather(image.reshape(-1, image.shape[-1]), index, weight), valid


def grad_check(
    f: Callable[[], torch.Tensor],
    params: ParameterSet,
    step: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |central difference|)``.

    ``f`` re-evaluates the scalar loss from the current parameter values.  By
    default every coordinate of every parameter is perturbed; ``max_coords``
    caps the number per tensor (a seeded random subset) for large sets.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    selected = list(params.names() if names is None else names)
    params.zero_grad()
    loss = f()
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"loss is not finite at the base point ({loss.item()})")
    backward(loss)
    analytic = params.gradients()
    params.zero_grad()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name in selected:
            p = params[name]
            flat = p.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and len(coords) > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            g = analytic[name].reshape(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                plus = f().item()
                flat[i] = orig - step
                minus = f().item()
                flat[i] = orig
                if not (np.isfinite(plus) and np.isfinite(minus)):
                    raise NonFiniteError(f"loss became non-finite perturbing {name}[{i}]")
                fd = (plus - minus) / (2 * step)
                worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
    return worst


def save_checkpoint(path, params: ParameterSet, optimizer: torch.optim.Optimizer | None = None, meta: dict | None = None) -> None:
    """Write parameters (and Adam moments) as float64 arrays in an ``.npz`` file."""
    arrays: dict[str, np.ndarray] = {"format_version": np.array(CHECKPOINT_VERSION)}
    for name, value in params.snapshot().items():
        arrays["param/" + name] = value
    if optimizer is not None:
        for name, p in params.items():
            state = optimizer.state.get(p)
            if not state:
                continue
            arrays["adam_m/" + name] = state["exp_avg"].detach().numpy().copy()
            arrays["adam_v/" + name] = state["exp_avg_sq"].detach().numpy().copy()
            arrays["adam_step/" + name] = np.array(float(state["step"]))
    arrays["meta"] = np.array(json.dumps(meta or {}, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, params: ParameterSet, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore parameters (and optimizer moments) in place; returns the metadata dict."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} in {path}")
        missing = [n for n in params.names() if "param/" + n not in data]
        if missing:
            raise KeyError(f"checkpoint {path} lacks parameters: {missing}")
        params.restore({n: data["param/" + n] for n in params.names()})
        if optimizer is not None:
            optimizer.state.clear()
            for name, p in params.items():
                if "adam_m/" + name not in data:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(float(data["adam_step/" + name])),
                    "exp_avg": torch.from_numpy(data["adam_m/" + name].copy()),
                    "exp_avg_sq": torch.from_numpy(data["adam_v/" + name].copy()),
                }
        return json.loads(str(data["meta"]))


def make_optimizer(params: ParameterSet, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                   lr_overrides: Mapping[str, float] | None = None) -> torch.optim.Adam:
    """Adam over ``params``; ``lr_overrides`` maps name prefixes to their own rate."""
    lr_overrides = dict(lr_overrides or {})
    groups: dict[float, list] = {}
    for name, p in params.items():
        rate = next((r for prefix, r in lr_overrides.items() if name.startswith(prefix)), lr)
        groups.setdefault(rate, []).append(p)
    return torch.optim.Adam([{"params": ps, "lr": r} for r, ps in groups.items()], lr=lr, betas=tuple(betas), eps=eps)
