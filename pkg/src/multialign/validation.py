"""Input checking shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .encoders import ImageInstance


def check_images(images, feature_dim: int | None = None) -> list[ImageInstance]:
    """Coerce images to :class:`ImageInstance`.

    Accepts instances, ``(global, regions)`` tuples or ``{"global", "regions"}``
    mappings. All images must share one feature dimension, and match
    ``feature_dim`` when given.
    """
    if images is None or len(images) == 0:
        raise ValueError("expected at least one image")
    out = []
    for i, img in enumerate(images):
        if isinstance(img, ImageInstance):
            inst = img
        elif isinstance(img, dict):
            inst = ImageInstance(img["global"], img["regions"])
        else:
            try:
                glob, regions = img
            except (TypeError, ValueError):
                raise TypeError(f"image {i}: expected ImageInstance or (global, regions), got {type(img).__name__}") from None
            inst = ImageInstance(glob, regions)
        if inst.global_feat.ndim != 1:
            raise ValueError(f"image {i}: global feature must be a vector, got shape {inst.global_feat.shape}")
        if not np.all(np.isfinite(inst.global_feat)) or not np.all(np.isfinite(inst.regions)):
            raise ValueError(f"image {i}: non-finite feature values")
        dim = feature_dim if feature_dim is not None else (out[0].global_feat.shape[0] if out else inst.global_feat.shape[0])
        if inst.global_feat.shape[0] != dim or inst.regions.shape[1] != dim:
            raise ValueError(
                f"image {i}: feature dim {inst.global_feat.shape[0]}/{inst.regions.shape[1]} does not match {dim}"
            )
        out.append(inst)
    return out


def check_captions(captions) -> list[str]:
    if isinstance(captions, str):
        raise TypeError("expected a sequence of captions, got a single string")
    if captions is None or len(captions) == 0:
        raise ValueError("expected at least one caption")
    for i, c in enumerate(captions):
        if not isinstance(c, str):
            raise TypeError(f"caption {i}: expected str, got {type(c).__name__}")
    return list(captions)


def check_matches(matches, n_images: int, n_texts: int) -> list[set[int]]:
    """Image-to-text ground truth; ``None`` means image ``i`` matches text ``i``."""
    if matches is None:
        if n_images != n_texts:
            raise ValueError(f"{n_images} images and {n_texts} captions need explicit matches")
        return [{i} for i in range(n_images)]
    if len(matches) != n_images:
        raise ValueError(f"matches has {len(matches)} entries for {n_images} images")
    out = []
    for i, m in enumerate(matches):
        s = {int(t) for t in m}
        if not s:
            raise ValueError(f"image {i} has no matching caption")
        bad = [t for t in s if not 0 <= t < n_texts]
        if bad:
            raise ValueError(f"image {i}: caption indices {bad} out of range")
        out.append(s)
    covered = set().union(*out)
    if len(covered) != n_texts:
        raise ValueError(f"captions {sorted(set(range(n_texts)) - covered)} match no image")
    return out


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_pairs(images: Sequence, captions: Sequence) -> None:
    if len(images) != len(captions):
        raise ValueError(f"got {len(images)} images but {len(captions)} captions")
