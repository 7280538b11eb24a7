"""Scene regularization (rule-based manifest filtering) and density regularization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .scenes import LEVEL_RANGES, level_capacity

CLAUSES = ("level", "time", "weather", "count", "ratio")
_REQUIRED = ("level", "time", "weather", "count")


def parse_minutes(t) -> int:
    if isinstance(t, str):
        hh, mm = t.split(":")
        return int(hh) * 60 + int(mm)
    return int(t)


@dataclass(frozen=True)
class FilterRule:
    levels: frozenset
    time_window: tuple[int, int]
    weathers: frozenset
    count_range: tuple[float, float]
    ratio_range: tuple[float, float]
    name: str = ""

    def __post_init__(self):
        if not self.levels or not self.weathers:
            raise ValueError("levels and weathers must be non-empty")
        if not set(self.levels) <= set(range(len(LEVEL_RANGES))):
            raise ValueError(f"levels must lie in 0..8, got {sorted(self.levels)}")
        for name in ("time_window", "count_range", "ratio_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {lo} > {hi}")

    @classmethod
    def from_dict(cls, d: dict) -> "FilterRule":
        unknown = set(d) - {"levels", "time_window", "weathers", "count_range", "ratio_range", "name"}
        if unknown:
            raise ValueError(f"unknown filter-rule keys: {sorted(unknown)}")
        return cls(
            levels=frozenset(int(v) for v in d["levels"]),
            time_window=tuple(parse_minutes(t) for t in d["time_window"]),
            weathers=frozenset(int(v) for v in d["weathers"]),
            count_range=tuple(float(v) for v in d["count_range"]),
            ratio_range=tuple(float(v) for v in d["ratio_range"]),
            name=d.get("name", ""),
        )

    @classmethod
    def load(cls, path_or_name) -> "FilterRule":
        """Read a rule file, or a bundled rule by name (sht_a, sht_b, ucf_cc_50, ucf_qnrf, worldexpo)."""
        p = Path(path_or_name)
        if p.suffix == ".json" and p.exists():
            return cls.from_dict(json.loads(p.read_text()))
        bundled = resources.files("crowdlab") / "rules" / f"{path_or_name}.json"
        return cls.from_dict(json.loads(bundled.read_text()))

    def to_dict(self) -> dict:
        return {"name": self.name, "levels": sorted(self.levels), "time_window": list(self.time_window),
                "weathers": sorted(self.weathers), "count_range": list(self.count_range),
                "ratio_range": list(self.ratio_range)}


def first_failed_clause(record: dict, rule: FilterRule):
    """Name of the first clause the record fails, or None if it passes."""
    missing = [k for k in _REQUIRED if k not in record]
    if missing:
        raise ValueError(f"record {record.get('id', '?')} lacks attributes {missing}")
    level, count = int(record["level"]), record["count"]
    if level not in rule.levels:
        return "level"
    if not rule.time_window[0] <= record["time"] <= rule.time_window[1]:
        return "time"
    if int(record["weather"]) not in rule.weathers:
        return "weather"
    if not rule.count_range[0] <= count <= rule.count_range[1]:
        return "count"
    if not rule.ratio_range[0] <= count / level_capacity(level) <= rule.ratio_range[1]:
        return "ratio"
    return None


def scene_filter(manifest, rule: FilterRule):
    """Split a manifest into (kept records, {rejected id: first failed clause})."""
    kept, rejected = [], {}
    for r in manifest:
        clause = first_failed_clause(r, rule)
        if clause is None:
            kept.append(r)
        else:
            rejected[r["id"]] = clause
    return kept, rejected


def apply_scene_filter(manifest, rule: FilterRule) -> list[dict]:
    return scene_filter(manifest, rule)[0]


@dataclass(frozen=True)
class DensityBound:
    max_s: float

    def __post_init__(self):
        if not self.max_s > 0:
            raise ValueError(f"max_s must be positive, got {self.max_s}")


def fit_density_bound(train_density_maps) -> DensityBound:
    maps = list(train_density_maps)
    if not maps:
        raise ValueError("need at least one density map")
    return DensityBound(float(max(np.max(m) for m in maps)))


def density_clip(pred_map, bound: DensityBound):
    """Zero every pixel strictly above max_s; leave the rest untouched."""
    m = np.asarray(pred_map)
    if (m < 0).any():
        raise ValueError("density map has negative pixels; expected a rectified prediction")
    return np.where(m > bound.max_s, np.zeros_like(m), m)
