"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np

_RANGE_TOL = 1e-6


def check_image(arr, channels: int | None = None, name: str = "image") -> np.ndarray:
    """Return ``arr`` as a float32 ``(C, H, W)`` array in ``[0, 1]``.

    2-D input is read as a single-channel image. Values outside ``[0, 1]`` by
    more than rounding error are rejected rather than silently clipped.
    """
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"{name} must be (C, H, W), got shape {a.shape}")
    if channels is not None and a.shape[0] != channels:
        raise ValueError(f"{name} must have {channels} channel(s), got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if a.size and (a.min() < -_RANGE_TOL or a.max() > 1 + _RANGE_TOL):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(a, 0.0, 1.0)


def check_mask(arr, name: str = "mask") -> np.ndarray:
    return check_image(arr, channels=1, name=name)


def check_same_hw(*arrays) -> None:
    shapes = {tuple(np.shape(a)[-2:]) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"spatial sizes differ: {sorted(shapes)}")


def check_divisible(size: int, factor: int, name: str = "image size") -> None:
    if size % factor:
        raise ValueError(f"{name} {size} is not divisible by {factor}")
