"""
Class Mapping
Semantic KITTI taxonomy: raw label ids, contiguous training class ids, names and palette
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DataFormatError

# Reserved markers
FREE = 0          # voxel / point label of free space
UNLABELED = -1    # point without a usable semantic label
VOID = -1         # ground-image pixel outside the triangulated ground

# ------------------------------------------------------------------------------------------------------------------------------ #
# Training classes 1..N (index = class_id - 1)
class_names = [
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist", "motorcyclist",
    "road", "parking", "sidewalk", "other-ground", "building", "fence", "vegetation", "trunk",
    "terrain", "pole", "traffic-sign"
]

class_palette = [
    (100, 150, 245), (100, 230, 245), (30, 60, 150), (80, 30, 180), (0, 0, 255), (255, 30, 30),
    (255, 40, 200), (150, 30, 90), (255, 0, 255), (255, 150, 255), (75, 0, 75), (175, 0, 75),
    (255, 200, 0), (255, 120, 50), (0, 175, 0), (135, 60, 0), (150, 240, 80), (255, 240, 150),
    (255, 0, 0)
]

# ------------------------------------------------------------------------------------------------------------------------------ #
# Raw label id (lower 16 bits of a .label record) -> training class id
# ids missing here (unlabeled, outlier, other-structure, other-object) become UNLABELED
learning_map = {
    10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6, 31: 7, 32: 8,
    40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19,
    # moving objects
    252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}

# First raw id of every moving-object class
MOVING_RAW_ID_MIN = 252

ground_class_names = ["road", "parking", "sidewalk", "other-ground", "terrain"]


# ======================================================= #
@dataclass(frozen=True)
class ClassMap:
    """Raw-id lookup plus names and colors of the N training classes"""

    raw_to_class: Tuple[Tuple[int, int], ...]
    names: Tuple[str, ...]
    palette: Tuple[Tuple[int, int, int], ...]

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def as_dict(self) -> Dict[int, int]:
        return dict(self.raw_to_class)

    def lookup_table(self) -> np.ndarray:
        """Dense LUT over the 16-bit raw id space, UNLABELED where unmapped"""
        lut = np.full(1 << 16, UNLABELED, dtype=np.int32)
        for raw_id, class_id in self.raw_to_class:
            lut[raw_id] = class_id
        return lut

    def map_raw(self, raw_ids: np.ndarray) -> np.ndarray:
        """Map raw label records (lower 16 bits used) to class ids"""
        raw_ids = np.asarray(raw_ids, dtype=np.uint32)
        return self.lookup_table()[raw_ids & 0xFFFF]

    def raw_id_of(self, class_id: int) -> int:
        """Smallest raw id mapping to class_id (used when writing label files)"""
        candidates = [raw for raw, cls in self.raw_to_class if cls == class_id]
        if not candidates:
            return 0
        return min(candidates)

    def class_id(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise ConfigError(f"Unknown class name: {name}") from None

    def color(self, class_id: int) -> Tuple[int, int, int]:
        if 1 <= class_id <= self.n_classes:
            return self.palette[class_id - 1]
        return (0, 0, 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.raw_to_class, columns=["raw_id", "class_id"])


def default_class_map() -> ClassMap:
    """Semantic KITTI learning map with 19 classes"""
    return ClassMap(
        raw_to_class=tuple(sorted(learning_map.items())),
        names=tuple(class_names),
        palette=tuple(class_palette),
    )


def make_class_map(mapping: Dict[int, int], names: Iterable[str] = None) -> ClassMap:
    """Build a class map from a raw->class dict (names default to the KITTI ones)"""
    if names is None:
        n = max(mapping.values(), default=0)
        names = class_names[:n] if n <= len(class_names) else [f"class-{i}" for i in range(1, n + 1)]
    names = tuple(names)
    for raw_id, class_id in mapping.items():
        if not 0 <= raw_id < (1 << 16):
            raise ConfigError(f"raw id {raw_id} is outside the 16-bit label range")
        if not 1 <= class_id <= len(names):
            raise ConfigError(f"class id {class_id} for raw id {raw_id} is outside 1..{len(names)}")
    palette = tuple(class_palette[(i % len(class_palette))] for i in range(len(names)))
    return ClassMap(raw_to_class=tuple(sorted(mapping.items())), names=names, palette=palette)


def load_class_map_csv(path: str) -> ClassMap:
    """Read a class map CSV with columns raw_id,class_id[,name]"""
    df = pd.read_csv(path)
    missing = {"raw_id", "class_id"} - set(df.columns)
    if missing:
        raise DataFormatError(f"{path}: class map is missing columns {sorted(missing)}")

    mapping = {int(r): int(c) for r, c in zip(df["raw_id"], df["class_id"])}
    names: List[str] = None
    if "name" in df.columns:
        named = df.drop_duplicates("class_id").sort_values("class_id")
        names = [str(n) for n in named["name"]]
        if list(named["class_id"]) != list(range(1, len(names) + 1)):
            raise DataFormatError(f"{path}: class ids must be contiguous from 1")
    return make_class_map(mapping, names)


def class_map_from_records(raw_to_class: np.ndarray, names: List[str]) -> ClassMap:
    """Rebuild a class map stored inside a checkpoint"""
    mapping = {int(r): int(c) for r, c in np.asarray(raw_to_class).reshape(-1, 2)}
    return make_class_map(mapping, names)
