"""Training targets from head dots: density maps, crowd masks, splits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DEFAULT_SIGMA = 4.0
DEFAULT_LNF = 100.0
VAL_FRACTION = 0.10
TEST_FRACTION = 0.25
STRATEGIES = ("random", "cross_camera", "cross_location")


@dataclass
class DensityMap:
    values: np.ndarray
    lnf: float
    sigma: float

    @property
    def count(self) -> float:
        return float(self.values.sum() / self.lnf)


def density_from_dots(dots, shape, sigma: float = DEFAULT_SIGMA, lnf: float = DEFAULT_LNF) -> DensityMap:
    """Sum of truncated Gaussians, one per dot, each renormalized to mass lnf.

    The kernel is evaluated at pixel centers inside a window of width 4*sigma
    around the dot and clipped to the image before renormalizing, so a dot
    near a border keeps its full mass.
    """
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValueError(f"shape must be positive, got {shape}")
    if sigma <= 0 or lnf <= 0:
        raise ValueError("sigma and lnf must be positive")
    out = np.zeros((h, w), dtype=np.float64)
    radius = max(1, int(math.ceil(2 * sigma)))
    for i, (x, y) in enumerate(dots):
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"dot {i} at ({x}, {y}) lies outside the {h}x{w} image")
        cx, cy = int(math.floor(x)), int(math.floor(y))
        c0, c1 = max(cx - radius, 0), min(cx + radius + 1, w)
        r0, r1 = max(cy - radius, 0), min(cy + radius + 1, h)
        gx = np.exp(-((np.arange(c0, c1) + 0.5 - x) ** 2) / (2 * sigma**2))
        gy = np.exp(-((np.arange(r0, r1) + 0.5 - y) ** 2) / (2 * sigma**2))
        k = np.outer(gy, gx)
        out[r0:r1, c0:c1] += k * (lnf / k.sum())
    return DensityMap(out, float(lnf), float(sigma))


def downsample_density(values: np.ndarray, factor: int = 8) -> np.ndarray:
    """Sum-pool by `factor`; preserves total mass when the shape divides."""
    h, w = values.shape
    if h % factor or w % factor:
        raise ValueError(f"density shape {values.shape} not divisible by {factor}")
    return values.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def mask_from_render(per_person_masks, shape=None) -> np.ndarray:
    """Pixelwise OR of the person masks.

    An empty plain list needs `shape`; a PersonMasks carries its own.
    """
    union = getattr(per_person_masks, "union", None)
    if union is not None:
        return union()
    masks = list(per_person_masks)
    if not masks:
        if shape is None:
            raise ValueError("empty mask list: pass shape")
        return np.zeros(shape, bool)
    shape = np.shape(masks[0]) if shape is None else tuple(shape)
    out = np.zeros(shape, bool)
    for i, m in enumerate(masks):
        if np.shape(m) != shape:
            raise ValueError(f"mask {i} has shape {np.shape(m)}, expected {shape}")
        out |= np.asarray(m, bool)
    return out


@dataclass
class Split:
    strategy: str
    seed: int
    train_ids: list
    val_ids: list
    test_ids: list

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path) -> "Split":
        return cls(**json.loads(Path(path).read_text()))


def split_manifest(manifest: list[dict], strategy: str, seed: int) -> Split:
    """Random 75/25 images, one held-out camera per location, or 75/25 locations.

    10% of the training ids are then moved to validation.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown split strategy {strategy!r}; expected one of {STRATEGIES}")
    if not manifest:
        raise ValueError("manifest is empty")
    rng = np.random.default_rng(seed)
    ids = [r["id"] for r in manifest]

    if strategy == "random":
        perm = rng.permutation(len(ids))
        n_test = int(round(TEST_FRACTION * len(ids)))
        test = {ids[i] for i in perm[:n_test]}
    elif strategy == "cross_camera":
        cams: dict[int, set] = {}
        for r in manifest:
            cams.setdefault(r["location_id"], set()).add(r["camera_id"])
        test_cam = {}
        for loc in sorted(cams):
            if len(cams[loc]) < 2:
                raise ValueError(f"cross_camera split needs >= 2 cameras at location {loc}")
            test_cam[loc] = sorted(cams[loc])[int(rng.integers(len(cams[loc])))]
        test = {r["id"] for r in manifest if test_cam[r["location_id"]] == r["camera_id"]}
    else:
        locs = sorted({r["location_id"] for r in manifest})
        n_test = int(round(TEST_FRACTION * len(locs)))
        if len(locs) > 1:
            n_test = min(max(n_test, 1), len(locs) - 1)
        test_locs = {locs[i] for i in rng.permutation(len(locs))[:n_test]}
        test = {r["id"] for r in manifest if r["location_id"] in test_locs}

    train = [i for i in ids if i not in test]
    n_val = int(round(VAL_FRACTION * len(train)))
    val = {train[i] for i in rng.permutation(len(train))[:n_val]}
    return Split(
        strategy=strategy, seed=seed,
        train_ids=[i for i in train if i not in val],
        val_ids=[i for i in train if i in val],
        test_ids=[i for i in ids if i in test],
    )
