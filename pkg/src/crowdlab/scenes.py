"""Procedural crowd-scene generation with automatic labels.

A scene is a fixed camera view onto a location with a polygonal region of
interest (ROI) where people may stand. Each generated image draws time and
weather, places a crowd inside the ROI in depth bands, renders sprites back to
front, and keeps only the heads that remain visible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# upper bound of the head count for each scene-capacity level
LEVEL_RANGES: tuple[tuple[int, int], ...] = (
    (0, 10), (0, 25), (0, 50), (0, 100), (0, 300),
    (0, 600), (0, 1000), (0, 2000), (0, 4000),
)
WEATHERS = ("clear", "clouds", "rain", "foggy", "thunder", "overcast", "extra_sunny")
CAMERAS_PER_LOCATION = 4
BAND_CAPACITY = 256
CELL = 8  # capacity guard: one head per CELL x CELL pixel cell
MINUTES_PER_DAY = 1440

# biased draws favoring daytime and fine weather
_TIME_BIN_WEIGHTS = np.array([0.04, 0.06, 0.14, 0.20, 0.21, 0.17, 0.10, 0.08])
_WEATHER_WEIGHTS = np.array([0.30, 0.24, 0.07, 0.07, 0.04, 0.16, 0.12])


class CapacityError(ValueError):
    pass


def level_capacity(level: int) -> int:
    return LEVEL_RANGES[level][1]


def images_per_scene(level: int, scale: float = 1.0) -> int:
    """30/40/50 images for the first/second/last three levels, times `scale`."""
    base = (30, 40, 50)[level // 3]
    return max(1, int(round(base * scale)))


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_polygon(points, poly) -> np.ndarray:
    """Vectorized even-odd crossing test; points is (N, 2) of (x, y)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p = np.asarray(poly, dtype=float)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = p[:, 0][None, :], p[:, 1][None, :]
    x1, y1 = np.roll(p[:, 0], -1)[None, :], np.roll(p[:, 1], -1)[None, :]
    straddles = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    hits = straddles & (x < x_cross)
    return np.count_nonzero(hits, axis=1) % 2 == 1


def _orient(p, q, r) -> float:
    return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))


def _on_segment(p, q, r) -> bool:
    """r lies on the closed segment pq (given collinearity)."""
    return min(p[0], q[0]) <= r[0] <= max(p[0], q[0]) and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])


def _segments_intersect(a, b, c, d) -> bool:
    o1, o2, o3, o4 = _orient(a, b, c), _orient(a, b, d), _orient(c, d, a), _orient(c, d, b)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return ((o1 == 0 and _on_segment(a, b, c)) or (o2 == 0 and _on_segment(a, b, d))
            or (o3 == 0 and _on_segment(c, d, a)) or (o4 == 0 and _on_segment(c, d, b)))


def is_simple_polygon(poly) -> bool:
    """No repeated vertices, no edge touching a non-adjacent edge, no fold-back at a vertex."""
    p = [tuple(float(c) for c in v) for v in poly]
    n = len(p)
    if n < 3 or len(set(p)) < n or polygon_area(p) == 0:
        return False
    for i in range(n):
        a, b, c = p[i - 1], p[i], p[(i + 1) % n]
        # adjacent edges a-b and b-c overlap if c doubles back along b-a
        if _orient(a, b, c) == 0 and (a[0] - b[0]) * (c[0] - b[0]) + (a[1] - b[1]) * (c[1] - b[1]) > 0:
            return False
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class SceneSpec:
    """A fixed camera view: ROI polygon (x, y vertices), capacity level, size."""

    location_id: int
    camera_id: int
    roi: tuple[tuple[float, float], ...]
    level: int
    image_size: tuple[int, int] = (240, 320)
    # person height as a fraction of image height at the top and bottom rows
    perspective: tuple[float, float] = (0.05, 0.16)

    def __post_init__(self):
        if not 0 <= self.camera_id < CAMERAS_PER_LOCATION:
            raise ValueError(f"camera_id must be in 0..3, got {self.camera_id}")
        if not 0 <= self.level < len(LEVEL_RANGES):
            raise ValueError(f"level must be in 0..8, got {self.level}")

    @property
    def roi_area(self) -> float:
        return polygon_area(self.roi)

    @property
    def capacity(self) -> int:
        return int(self.roi_area // (CELL * CELL))

    @property
    def depth_field(self) -> np.ndarray:
        """Per-pixel depth proxy; 1 at the top row, falling toward the camera."""
        h, w = self.image_size
        rows = 1.0 - (np.arange(h, dtype=float) + 0.5) / h
        return np.repeat(rows[:, None], w, axis=1)

    def depth_at(self, y: float) -> float:
        h = self.image_size[0]
        y = min(max(y, 0.0), h - 1e-6)
        return 1.0 - (math.floor(y) + 0.5) / h

    def person_height(self, y: float) -> float:
        h = self.image_size[0]
        far, near = self.perspective
        t = min(max(y / h, 0.0), 1.0)
        return h * (far + (near - far) * t)


@dataclass(frozen=True)
class SceneAttributes:
    time_of_day: int
    weather: int
    target_count: int

    def __post_init__(self):
        if not 0 <= self.weather < len(WEATHERS):
            raise ValueError(f"weather code must be in 0..6, got {self.weather}")
        if not 0 <= self.time_of_day < MINUTES_PER_DAY:
            raise ValueError(f"time_of_day must be in 0..1439, got {self.time_of_day}")


@dataclass(frozen=True)
class PersonPlacement:
    head_xy: tuple[float, float]
    footprint: tuple[float, float, float, float]  # x0, y0, x1, y1
    depth: float
    appearance_seed: int

    @property
    def head_radius(self) -> float:
        return max(1.0, 0.13 * (self.footprint[3] - self.footprint[1]))


@dataclass
class Sample:
    image: np.ndarray
    dots: list[tuple[float, float]]
    mask: np.ndarray
    attributes: SceneAttributes
    scene: SceneSpec
    placements: list[PersonPlacement] = field(default_factory=list, repr=False)

    @property
    def count(self) -> int:
        return len(self.dots)


def _level_for_capacity(capacity: int) -> int:
    level = 0
    for lv, (_, hi) in enumerate(LEVEL_RANGES):
        if hi <= capacity:
            level = lv
    return level


def _make_roi(rng, image_size, target_area):
    """Star-shaped polygon around a random center; star-shaped means simple."""
    h, w = image_size
    n = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    # keep angular gaps open so the polygon does not degenerate
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + 0.5 * (angles - angles.mean()) / n
    radii = rng.uniform(0.7, 1.0, n)
    unit = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    unit_area = polygon_area(unit)
    aspect = rng.uniform(0.8, 1.6)
    # scale so that area(unit * (sx, sy)) == target_area, then fit inside the frame
    s = math.sqrt(target_area / (unit_area * aspect))
    sx, sy = s * aspect, s
    margin = 2.0
    sx = min(sx, (w - 2 * margin) / 2 / np.abs(unit[:, 0]).max())
    sy = min(sy, (h - 2 * margin) / 2 / np.abs(unit[:, 1]).max())
    ext_x = np.abs(unit[:, 0]).max() * sx
    ext_y = np.abs(unit[:, 1]).max() * sy
    cx = rng.uniform(margin + ext_x, w - margin - ext_x) if w - 2 * (margin + ext_x) > 0 else w / 2
    # crowds stand on the ground: bias the ROI toward the lower part of the frame
    lo, hi = margin + ext_y, h - margin - ext_y
    cy = rng.uniform(lo + 0.4 * (hi - lo), hi) if hi > lo else h / 2
    pts = unit * np.array([sx, sy]) + np.array([cx, cy])
    return tuple((float(x), float(y)) for x, y in pts)


def build_scene_bank(n_locations: int, seed: int, image_size: tuple[int, int] = (240, 320)) -> list[SceneSpec]:
    """Four camera views per location; level follows the ROI's capacity."""
    if n_locations < 1:
        raise ValueError(f"n_locations must be >= 1, got {n_locations}")
    rng = np.random.default_rng(seed)
    h, w = image_size
    max_cells = 0.85 * h * w / (CELL * CELL)
    specs = []
    for loc in range(n_locations):
        for cam in range(CAMERAS_PER_LOCATION):
            # aim for a level first, then size the ROI to that capacity
            wanted = (loc * CAMERAS_PER_LOCATION + cam + int(rng.integers(0, 9))) % 9
            lo = LEVEL_RANGES[wanted][1]
            hi = LEVEL_RANGES[wanted + 1][1] if wanted < 8 else 1.5 * lo
            cells = min(rng.uniform(lo, hi) * 1.05, max_cells)
            roi = _make_roi(rng, image_size, cells * CELL * CELL)
            far = rng.uniform(0.04, 0.07)
            near = far + rng.uniform(0.07, 0.13)
            cap = int(polygon_area(roi) // (CELL * CELL))
            specs.append(SceneSpec(
                location_id=loc, camera_id=cam, roi=roi,
                level=_level_for_capacity(cap), image_size=tuple(image_size),
                perspective=(float(far), float(near)),
            ))
    return specs


def sample_attributes(spec: SceneSpec, rng_seed: int) -> SceneAttributes:
    rng = np.random.default_rng([rng_seed, spec.location_id, spec.camera_id])
    b = rng.choice(len(_TIME_BIN_WEIGHTS), p=_TIME_BIN_WEIGHTS / _TIME_BIN_WEIGHTS.sum())
    minute = int(b * 180 + rng.integers(0, 180))
    weather = int(rng.choice(len(_WEATHER_WEIGHTS), p=_WEATHER_WEIGHTS / _WEATHER_WEIGHTS.sum()))
    lo, hi = LEVEL_RANGES[spec.level]
    hi = min(hi, spec.capacity)
    count = int(rng.integers(lo, hi + 1))
    return SceneAttributes(time_of_day=minute, weather=weather, target_count=count)


def _footprint(spec: SceneSpec, head, width_jitter: float):
    hx, hy = head
    height = spec.person_height(hy)
    r = max(1.0, 0.13 * height)
    half_w = 0.22 * height * width_jitter
    return (hx - half_w, hy - r, hx + half_w, hy - r + height)


def place_crowd(spec: SceneSpec, count: int, seed: int) -> list[PersonPlacement]:
    """Place `count` people inside the ROI, ordered far to near.

    Placement happens in non-overlapping depth bands holding at most
    BAND_CAPACITY people each.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count > spec.capacity:
        raise CapacityError(
            f"{count} people exceed ROI capacity {spec.capacity} "
            f"(roi area {spec.roi_area:.1f} px^2, one head per {CELL}x{CELL} cell)")
    if count == 0:
        return []
    rng = np.random.default_rng([seed, spec.location_id, spec.camera_id, 7])
    roi = np.asarray(spec.roi)
    (xmin, ymin), (xmax, ymax) = roi.min(axis=0), roi.max(axis=0)
    heads = np.empty((0, 2))
    while len(heads) < count:
        cand = rng.uniform((xmin, ymin), (xmax, ymax), size=(max(64, 2 * count), 2))
        heads = np.concatenate([heads, cand[points_in_polygon(cand, roi)]])
    heads = heads[:count]
    jitter = rng.uniform(0.85, 1.15, count)
    seeds = rng.integers(0, 2**31 - 1, count)

    people = []
    for (hx, hy), jit, s in zip(heads, jitter, seeds):
        fp = _footprint(spec, (hx, hy), jit)
        people.append(PersonPlacement(
            head_xy=(float(hx), float(hy)), footprint=tuple(float(v) for v in fp),
            depth=spec.depth_at(fp[3]), appearance_seed=int(s)))
    # far first; ties broken by head y so the order is total
    people.sort(key=lambda p: (-p.depth, p.head_xy[1], p.head_xy[0]))
    return people


def depth_bands(placements: list[PersonPlacement]) -> list[list[PersonPlacement]]:
    """Split far-to-near placements into contiguous bands of <= BAND_CAPACITY."""
    n_bands = math.ceil(len(placements) / BAND_CAPACITY)
    if n_bands == 0:
        return []
    sizes = [len(a) for a in np.array_split(np.arange(len(placements)), n_bands)]
    out, i = [], 0
    for s in sizes:
        out.append(placements[i:i + s])
        i += s
    return out


@dataclass(frozen=True)
class RenderStyle:
    """Palette and texture knobs; two styles stand in for two image domains."""

    name: str = "synthetic"
    ground: tuple[float, float, float] = (0.55, 0.55, 0.5)
    backdrop: tuple[float, float, float] = (0.35, 0.45, 0.6)
    texture: float = 0.04
    stripe_period: float = 0.0
    clothing_saturation: float = 1.0
    channel_order: tuple[int, int, int] = (0, 1, 2)
    gamma: float = 1.0
    outline: float = 0.0


SYNTHETIC = RenderStyle()
PHOTO = RenderStyle(
    name="photo", ground=(0.7, 0.62, 0.45), backdrop=(0.75, 0.7, 0.62), texture=0.1,
    stripe_period=6.0, clothing_saturation=0.45, channel_order=(2, 0, 1), gamma=0.6, outline=0.35,
)
# photometric shift only: palette, gamma, channel order and saturation, no stripes or outlines
TINTED = replace(PHOTO, name="tinted", stripe_period=0.0, outline=0.0)
STYLES = {s.name: s for s in (SYNTHETIC, PHOTO, TINTED)}


def daylight(minute: int) -> float:
    """Global luminance factor: 1 at noon, 0.2 at midnight, monotone in between."""
    return 0.2 + 0.8 * 0.5 * (1.0 - math.cos(2 * math.pi * minute / MINUTES_PER_DAY))


class PersonMasks:
    """Visible-pixel masks per person, backed by a single owner map.

    owner[y, x] is the index of the person visible at that pixel, or -1.
    """

    def __init__(self, owner: np.ndarray, n: int):
        self.owner = owner
        self.n = n

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.n))]
        if i < 0:
            i += self.n
        if not 0 <= i < self.n:
            raise IndexError(i)
        return self.owner == i

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def union(self) -> np.ndarray:
        return self.owner >= 0


def _sprite_masks(p: PersonPlacement, shape):
    """Pixel masks of the person sprite (body, head) restricted to its bbox."""
    h, w = shape
    x0, y0, x1, y1 = p.footprint
    hx, hy = p.head_xy
    r = p.head_radius
    c0, c1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)) + 1, w)
    r0, r1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)) + 1, h)
    if c0 >= c1 or r0 >= r1:
        empty = np.zeros((0, 0), bool)
        return (r0, r1, c0, c1), empty, empty
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    head = (xx - hx) ** 2 + (yy - hy) ** 2 <= r * r
    # the pixel containing the head point always belongs to the head
    iy, ix = int(math.floor(hy)) - r0, int(math.floor(hx)) - c0
    if 0 <= iy < head.shape[0] and 0 <= ix < head.shape[1]:
        head[iy, ix] = True
    body_top = hy + 0.8 * r
    bcx, bcy = hx, (body_top + y1) / 2
    ax, ay = max((x1 - x0) / 2, 0.75), max((y1 - body_top) / 2, 0.75)
    body = ((xx - bcx) / ax) ** 2 + ((yy - bcy) / ay) ** 2 <= 1.0
    return (r0, r1, c0, c1), body, head


def head_region(p: PersonPlacement, shape) -> np.ndarray:
    (r0, r1, c0, c1), _, head = _sprite_masks(p, shape)
    out = np.zeros(shape, bool)
    if head.size:
        out[r0:r1, c0:c1] = head
    return out


def _background(spec: SceneSpec, style: RenderStyle) -> np.ndarray:
    h, w = spec.image_size
    rng = np.random.default_rng([spec.location_id, spec.camera_id, 99])
    tone = rng.uniform(-0.08, 0.08, 3)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    t = (yy / h)[..., None]
    sky = np.asarray(style.backdrop) + tone
    ground = np.asarray(style.ground) - tone
    img = sky * (1 - t) + ground * t
    inside = points_in_polygon(np.stack([xx.ravel(), yy.ravel()], 1), spec.roi).reshape(h, w)
    img = np.where(inside[..., None], img * 0.9 + 0.08, img)
    noise = rng.normal(0, style.texture, (h, w, 1))
    img = img + noise
    if style.stripe_period:
        img = img + 0.06 * np.sin(2 * np.pi * (xx + 0.5 * yy) / style.stripe_period)[..., None]
    return img


def _apply_weather(img, attrs: SceneAttributes, spec: SceneSpec):
    rng = np.random.default_rng([spec.location_id, spec.camera_id, attrs.time_of_day, attrs.weather])
    name = WEATHERS[attrs.weather]
    if name in ("clouds", "overcast"):
        img = 0.8 * img + 0.2 * img.mean()
        if name == "overcast":
            img = img * 0.85
    elif name == "rain":
        streaks = rng.random(img.shape[:2]) < 0.02
        img = img * 0.8
        img[streaks] = 0.5 * img[streaks] + 0.35
    elif name == "foggy":
        img = 0.55 * img + 0.45 * 0.7
    elif name == "thunder":
        img = img * 0.6
    elif name == "extra_sunny":
        img = img * 1.15
    return img * daylight(attrs.time_of_day)


def render(spec: SceneSpec, attrs: SceneAttributes, placements, style: RenderStyle = SYNTHETIC):
    """Composite sprites back to front.

    Returns (image in [0, 1], PersonMasks); masks are aligned with
    `placements` and hold each person's visible pixels after occlusion.
    """
    h, w = spec.image_size
    img = _background(spec, style)
    owner = np.full((h, w), -1, dtype=np.int32)
    order = sorted(range(len(placements)), key=lambda i: (-placements[i].depth, i))
    for i in order:
        p = placements[i]
        (r0, r1, c0, c1), body, head = _sprite_masks(p, (h, w))
        if not body.size:
            continue
        rng = np.random.default_rng(p.appearance_seed)
        cloth = rng.uniform(0.05, 0.95, 3)
        cloth = cloth.mean() + style.clothing_saturation * (cloth - cloth.mean())
        skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.45, 1.05)
        region = img[r0:r1, c0:c1]
        shade = np.linspace(1.0, 0.75, r1 - r0)[:, None, None]
        region[body] = (cloth * shade)[np.nonzero(body)[0], 0]
        if style.outline:
            pad = np.pad(body, 1)
            interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
            edge = body & ~interior
            region[edge] *= 1 - style.outline
        region[head] = skin
        sprite = body | head
        owner[r0:r1, c0:c1][sprite] = i
    img = _apply_weather(img, attrs, spec)
    img = np.clip(img, 0.0, 1.0) ** style.gamma
    img = img[..., list(style.channel_order)]
    return np.ascontiguousarray(img), PersonMasks(owner, len(placements))


def prune_occluded(placements, per_person_masks, threshold: float = 0.5) -> list[tuple[float, float]]:
    """Keep heads whose visible fraction of the head disk is >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if len(placements) != len(per_person_masks):
        raise ValueError("masks are not aligned with placements")
    dots = []
    for i, p in enumerate(placements):
        if threshold > 0:
            mask = per_person_masks[i]
            (r0, r1, c0, c1), _, head = _sprite_masks(p, mask.shape)
            total = head.sum()
            visible = (mask[r0:r1, c0:c1] & head).sum() if total else 0
            if total == 0 or visible / total < threshold:
                continue
        dots.append(p.head_xy)
    return dots


def generate_sample(spec: SceneSpec, seed: int, threshold: float = 0.5,
                    style: RenderStyle = SYNTHETIC) -> Sample:
    attrs = sample_attributes(spec, seed)
    placements = place_crowd(spec, attrs.target_count, seed)
    image, masks = render(spec, attrs, placements, style)
    dots = prune_occluded(placements, masks, threshold)
    return Sample(image=image, dots=dots, mask=masks.union(), attributes=attrs,
                  scene=spec, placements=placements)
