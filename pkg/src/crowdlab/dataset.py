"""Dataset layout on disk and the in-memory equivalent.

Layout under a root directory::

    manifest.json          list of records (id, image, label, mask, location_id,
                           camera_id, level, time, weather, count)
    images/<id>.png        RGB
    masks/<id>.png         0 = background, 255 = crowd
    labels/<id>.json       {"dots": [[x, y], ...], "count": n, "attributes": {...}}

Label reads are counted on every dataset so training code can be audited for
touching target-domain labels.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import scenes
from .labels import density_from_dots, downsample_density


def _record(rid: str, sample: scenes.Sample) -> dict:
    a = sample.attributes
    return {
        "id": rid,
        "image": f"images/{rid}.png",
        "label": f"labels/{rid}.json",
        "mask": f"masks/{rid}.png",
        "location_id": sample.scene.location_id,
        "camera_id": sample.scene.camera_id,
        "level": sample.scene.level,
        "time": a.time_of_day,
        "weather": a.weather,
        "count": sample.count,
    }


def sample_id(spec: scenes.SceneSpec, k: int) -> str:
    return f"L{spec.location_id:03d}C{spec.camera_id}_{k:04d}"


def generate_samples(n_locations: int, seed: int, image_size=(240, 320), scale: float = 1.0,
                     style: scenes.RenderStyle = scenes.SYNTHETIC, threshold: float = 0.5,
                     per_scene: int | None = None):
    """Yield (id, Sample); per-scene counts follow the 30/40/50 rule times `scale`."""
    bank = scenes.build_scene_bank(n_locations, seed, image_size)
    for spec in bank:
        n = per_scene if per_scene is not None else scenes.images_per_scene(spec.level, scale)
        for k in range(n):
            s = seed * 1_000_003 + spec.location_id * 4099 + spec.camera_id * 131 + k
            yield sample_id(spec, k), scenes.generate_sample(spec, s, threshold, style)


class BaseDataset:
    """Shared accessors; subclasses provide _load_image/_load_label/_load_mask."""

    records: list[dict]

    def __init__(self):
        self.label_reads = 0
        self.by_id = {r["id"]: r for r in self.records}

    @property
    def ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def __len__(self):
        return len(self.records)

    def image(self, rid) -> np.ndarray:
        return self._load_image(rid)

    def label(self, rid) -> dict:
        self.label_reads += 1
        return self._load_label(rid)

    def mask(self, rid) -> np.ndarray:
        self.label_reads += 1
        return self._load_mask(rid)

    def dots(self, rid) -> np.ndarray:
        return np.asarray(self.label(rid)["dots"], dtype=float).reshape(-1, 2)

    def density(self, rid, sigma=4.0, lnf=100.0, stride=8) -> np.ndarray:
        img = self._load_image(rid)
        d = density_from_dots(self.dots(rid), img.shape[:2], sigma, lnf).values
        return downsample_density(d, stride) if stride > 1 else d

    def subset(self, ids) -> "MemoryDataset":
        keep = set(ids)
        return MemoryDataset.from_loader(self, [r for r in self.records if r["id"] in keep])

    def images_only(self) -> "ImageView":
        return ImageView(self)


class ImageView:
    """Read-only image access to a dataset; labels are not reachable."""

    def __init__(self, ds: BaseDataset):
        self._ds = ds
        self.ids = ds.ids

    def __len__(self):
        return len(self.ids)

    def image(self, rid) -> np.ndarray:
        return self._ds.image(rid)


class MemoryDataset(BaseDataset):
    def __init__(self, records, images, labels, masks):
        self.records = list(records)
        self._images, self._labels, self._masks = images, labels, masks
        super().__init__()

    @classmethod
    def from_samples(cls, items) -> "MemoryDataset":
        records, images, labels, masks = [], {}, {}, {}
        for rid, s in items:
            records.append(_record(rid, s))
            images[rid] = s.image.astype(np.float32)
            labels[rid] = {"dots": [list(d) for d in s.dots], "count": s.count,
                           "attributes": asdict(s.attributes)}
            masks[rid] = s.mask.astype(bool)
        return cls(records, images, labels, masks)

    @classmethod
    def from_loader(cls, ds: BaseDataset, records) -> "MemoryDataset":
        ids = [r["id"] for r in records]
        return cls(records, {i: ds._load_image(i) for i in ids},
                   {i: ds._load_label(i) for i in ids}, {i: ds._load_mask(i) for i in ids})

    def _load_image(self, rid):
        return self._images[rid]

    def _load_label(self, rid):
        return self._labels[rid]

    def _load_mask(self, rid):
        return self._masks[rid]


class CrowdDataset(BaseDataset):
    def __init__(self, root):
        self.root = Path(root)
        self.records = json.loads((self.root / "manifest.json").read_text())
        super().__init__()

    def _load_image(self, rid):
        arr = np.asarray(Image.open(self.root / self.by_id[rid]["image"]).convert("RGB"))
        return arr.astype(np.float32) / 255.0

    def _load_label(self, rid):
        return json.loads((self.root / self.by_id[rid]["label"]).read_text())

    def _load_mask(self, rid):
        return np.asarray(Image.open(self.root / self.by_id[rid]["mask"])) > 127


def write_dataset(root, items) -> list[dict]:
    root = Path(root)
    for sub in ("images", "labels", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = []
    for rid, s in items:
        rec = _record(rid, s)
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / rec["image"])
        Image.fromarray(s.mask.astype(np.uint8) * 255).save(root / rec["mask"])
        label = {"dots": [[float(x), float(y)] for x, y in s.dots], "count": s.count,
                 "attributes": asdict(s.attributes)}
        (root / rec["label"]).write_text(json.dumps(label))
        manifest.append(rec)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
