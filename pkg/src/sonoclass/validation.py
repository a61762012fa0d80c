"""Input validation helpers shared by the estimator-facing APIs."""

from __future__ import annotations

import numpy as np

from .image import RasterImage

__all__ = ["check_images", "check_labels", "check_consistent_length"]


def check_images(X) -> list[RasterImage]:
    """Coerce an N x H x W x C array or a sequence of images/arrays into
    a list of unit-interval RasterImages."""
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            items = list(X)
        elif X.ndim == 3:
            items = [X]
        else:
            raise ValueError(
                f"expected an N x H x W x C image array, got shape {X.shape}"
            )
    else:
        items = list(X)
    if not items:
        raise ValueError("need at least one image")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, RasterImage):
            out.append(item)
            continue
        arr = np.asarray(item, dtype=np.float64)
        try:
            out.append(RasterImage(arr))
        except ValueError as exc:
            raise ValueError(f"image {i} is not a valid raster: {exc}") from exc
    return out


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be a 1-d array, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"{len(y)} labels for {n_samples} images")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64))
        if not np.all(rounded == np.asarray(y, dtype=np.float64)):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be nonnegative")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} outside 0..{n_classes - 1}")
    return y


def check_consistent_length(*arrays) -> None:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent input lengths: {sorted(lengths)}")
