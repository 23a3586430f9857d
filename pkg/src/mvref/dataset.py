"""Dataset layout on disk and the loaders that feed training.

A dataset is a directory of locations along a synthetic trajectory; each
location holds the four rig views (plus optional pose-jittered augments)
as raw little-endian planes next to a small JSON meta file.  The top-level
manifest records the generation parameters and the contiguous
train/val/test split: the first 80% of the locations train, the next 10%
validate, and the last 10% are held out for testing.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Se3Transform
from .net import ViewBundle, make_bundle
from .scene import (
    VIEW_TAGS,
    CorruptionSpec,
    SceneSpec,
    build_scene,
    corrupt_mesh,
    default_intrinsics,
    extent_for_locations,
    render_location,
    trajectory_base_poses,
)

FORMAT_VERSION = 1

PLANE_FILES = (
    ("idepth_lq", "<f4", 1),
    ("idepth_hq", "<f4", 1),
    ("color", "<f4", 3),
    ("normals", "<f4", 3),
    ("area", "<f4", 1),
    ("tri_id", "<u8", 1),
)

CORRUPTION_PRESETS = {
    "none": CorruptionSpec(),
    "mild": CorruptionSpec(noise_sigma=0.02, hole_fraction=0.01,
                           bulge_amplitude=0.12, bulge_wavelength=7.0),
    "moderate": CorruptionSpec(noise_sigma=0.04, hole_fraction=0.02,
                               bulge_amplitude=0.25, bulge_wavelength=6.0),
    "heavy": CorruptionSpec(noise_sigma=0.08, hole_fraction=0.06,
                            bulge_amplitude=0.5, bulge_wavelength=5.0),
}


class DatasetError(RuntimeError):
    pass


def split_ranges(n_locations: int) -> dict:
    """Contiguous 80/10/10 location ranges, half-open."""
    a = int(n_locations * 0.8)
    b = int(n_locations * 0.9)
    return {"train": (0, a), "val": (a, b), "test": (b, n_locations)}


def view_dir_name(tag: str, aug: int = 0) -> str:
    return f"view_{tag}" if aug == 0 else f"view_{tag}_aug{aug}"


@dataclass(frozen=True)
class DatasetManifest:
    format_version: int
    scene: dict  # generation parameter echo, including corruption
    n_locations: int
    augments: int  # extra jittered renders per canonical view
    height: int
    width: int
    channels: tuple
    splits: dict  # name -> (start, stop) location range

    def __post_init__(self):
        if self.format_version != FORMAT_VERSION:
            raise DatasetError(
                f"manifest format version {self.format_version} != {FORMAT_VERSION}")
        edges = [0]
        for name in ("train", "val", "test"):
            if name not in self.splits:
                raise DatasetError(f"manifest misses split {name!r}")
            start, stop = self.splits[name]
            if start != edges[-1] or stop < start:
                raise DatasetError("splits must be contiguous and ordered")
            edges.append(stop)
        if edges[-1] != self.n_locations:
            raise DatasetError("splits must cover every location")

    @property
    def views_per_location(self) -> int:
        return len(VIEW_TAGS) * (1 + self.augments)

    def split_locations(self, name: str) -> range:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}")
        return range(*self.splits[name])

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "scene": self.scene,
            "n_locations": self.n_locations,
            "views_per_location": self.views_per_location,
            "augments": self.augments,
            "height": self.height,
            "width": self.width,
            "channels": list(self.channels),
            "splits": {k: list(v) for k, v in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            manifest = cls(
                format_version=d["format_version"],
                scene=d["scene"],
                n_locations=d["n_locations"],
                augments=d["augments"],
                height=d["height"],
                width=d["width"],
                channels=tuple(d["channels"]),
                splits={k: tuple(v) for k, v in d["splits"].items()},
            )
        except KeyError as e:
            raise DatasetError(f"manifest misses field {e}") from None
        if d["views_per_location"] != manifest.views_per_location:
            raise DatasetError("views_per_location inconsistent with augments")
        return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pose_to_row_major(pose: Se3Transform) -> list:
    m = np.eye(4, dtype=np.float64)
    m[:3, :3] = pose.rotation
    m[:3, 3] = pose.translation
    return m.reshape(-1).tolist()


def _pose_from_row_major(values) -> Se3Transform:
    m = np.asarray(values, dtype=np.float64).reshape(4, 4)
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise DatasetError("pose matrix must end in the row 0 0 0 1")
    return Se3Transform(m[:3, :3], m[:3, 3])


def _valid_stats(plane: np.ndarray) -> dict:
    valid = plane > 0
    if not valid.any():
        return {"mean": 0.0, "std": 0.0}
    return {"mean": float(plane[valid].mean()), "std": float(plane[valid].std())}


def write_view(view_dir, lq, hq_idepth: np.ndarray) -> None:
    """Serialize one rendered view: meta.json plus raw row-major planes.

    Multi-channel planes (color, normals) are stored channel-first, one
    full H*W plane per channel.
    """
    view_dir = Path(view_dir)
    view_dir.mkdir(parents=True, exist_ok=True)
    k = lq.intrinsics
    arrays = {
        "idepth_lq": lq.idepth,
        "idepth_hq": np.asarray(hq_idepth, dtype=np.float32),
        "color": lq.color.transpose(2, 0, 1),
        "normals": lq.normals.transpose(2, 0, 1),
        "area": lq.area,
        "tri_id": lq.tri_id,
    }
    for name, dtype, _ in PLANE_FILES:
        suffix = "u64" if dtype == "<u8" else "f32"
        data = np.ascontiguousarray(arrays[name], dtype=dtype)
        (view_dir / f"{name}.{suffix}").write_bytes(data.tobytes())
    meta = {
        "view_tag": lq.view_tag,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "pose_world_from_camera": _pose_to_row_major(lq.pose),
        "stats": {
            "idepth_lq": _valid_stats(lq.idepth),
            "idepth_hq": _valid_stats(np.asarray(hq_idepth)),
        },
    }
    _write_json(view_dir / "meta.json", meta)


def _read_plane(path: Path, dtype: str, shape) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing plane file {path}")
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DatasetError(f"{path} holds {data.size} values, expected {expected}")
    return data.reshape(shape)


def read_view(view_dir):
    """Load one view directory back into (RenderedView-like fields, hq plane).

    Returns a dict with keys matching the stored planes plus 'intrinsics',
    'pose', and 'view_tag'.
    """
    from .scene import RenderedView

    view_dir = Path(view_dir)
    meta_path = view_dir / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing meta file {meta_path}")
    meta = json.loads(meta_path.read_text())
    ki = meta["intrinsics"]
    k = CameraIntrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                         width=ki["width"], height=ki["height"])
    h, w = k.height, k.width
    planes = {}
    for name, dtype, ch in PLANE_FILES:
        suffix = "u64" if dtype == "<u8" else "f32"
        shape = (ch, h, w) if ch > 1 else (h, w)
        planes[name] = _read_plane(view_dir / f"{name}.{suffix}", dtype, shape)
    view = RenderedView(
        intrinsics=k,
        pose=_pose_from_row_major(meta["pose_world_from_camera"]),
        idepth=planes["idepth_lq"].copy(),
        color=np.ascontiguousarray(planes["color"].transpose(1, 2, 0)),
        normals=np.ascontiguousarray(planes["normals"].transpose(1, 2, 0)),
        area=planes["area"].copy(),
        tri_id=planes["tri_id"].copy(),
        view_tag=meta["view_tag"],
    )
    return view, planes["idepth_hq"].copy()


def generate_dataset(out_dir, seed: int, n_locations: int,
                     corruption: CorruptionSpec = CORRUPTION_PRESETS["moderate"],
                     augments: int = 3, width: int = 288, height: int = 96,
                     n_boxes=None, n_walls=None) -> DatasetManifest:
    """Build one scene, walk the trajectory, and serialize every view.

    The whole tree is a pure function of the arguments: the same call
    produces byte-identical files.
    """
    if n_locations < 1:
        raise DatasetError("need at least one location")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_boxes is None:
        n_boxes = max(6, n_locations // 2)
    if n_walls is None:
        n_walls = max(2, n_locations // 12)
    spec = SceneSpec(rng_seed=seed, extent=extent_for_locations(n_locations),
                     n_boxes=n_boxes, n_walls=n_walls, corruption=corruption)
    clean = build_scene(spec)
    corrupted = corrupt_mesh(clean, corruption, seed=seed + 1)
    k = default_intrinsics(width, height)
    for i, base in enumerate(trajectory_base_poses(n_locations)):
        loc_dir = out / f"loc_{i:06d}"
        for aug in range(augments + 1):
            aug_seed = None if aug == 0 else [seed, i, aug]
            pairs = render_location(clean, corrupted, base, k, augment_seed=aug_seed)
            for tag, (lq, hq) in zip(VIEW_TAGS, pairs):
                write_view(loc_dir / view_dir_name(tag, aug), lq, hq)
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        scene={
            "rng_seed": seed,
            "extent": spec.extent,
            "n_boxes": n_boxes,
            "n_walls": n_walls,
            "corruption": {
                "noise_sigma": corruption.noise_sigma,
                "hole_fraction": corruption.hole_fraction,
                "bulge_amplitude": corruption.bulge_amplitude,
                "bulge_wavelength": corruption.bulge_wavelength,
            },
        },
        n_locations=n_locations,
        augments=augments,
        height=height,
        width=width,
        channels=tuple(f"{name}.{'u64' if dtype == '<u8' else 'f32'}"
                       for name, dtype, _ in PLANE_FILES),
        splits=split_ranges(n_locations),
    )
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


class DiskDataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)

    def location_dir(self, index: int) -> Path:
        if not 0 <= index < self.manifest.n_locations:
            raise DatasetError(f"location {index} out of range")
        return self.root / f"loc_{index:06d}"

    def load_location(self, index: int, aug: int = 0):
        """One location's rig as (ViewBundle, hq planes (V, H, W))."""
        if not 0 <= aug <= self.manifest.augments:
            raise DatasetError(f"augment {aug} out of range")
        loc = self.location_dir(index)
        views, hqs = [], []
        for tag in VIEW_TAGS:
            view, hq = read_view(loc / view_dir_name(tag, aug))
            views.append(view)
            hqs.append(hq)
        bundle = make_bundle(
            np.stack([v.idepth for v in views]),
            np.stack([v.color for v in views]),
            np.stack([v.normals for v in views]),
            np.stack([v.area for v in views]),
            np.stack([v.tri_id for v in views]),
            views[0].intrinsics,
            tuple(v.pose for v in views),
        )
        return bundle, np.stack(hqs)

    def pairs(self, split: str):
        """Canonical (bundle, hq) pairs of one split, in location order."""
        for i in self.manifest.split_locations(split):
            yield self.load_location(i)


class SplitProvider:
    """Feeds the training loop: augmented train examples, canonical val.

    Training example j maps to (location, augment) = (j // (A+1), j % (A+1)),
    a pure function of the index so resumed runs revisit identical data.
    """

    def __init__(self, dataset: DiskDataset, augmented: bool = True, cache: bool = True):
        self.dataset = dataset
        m = dataset.manifest
        self._per_loc = (1 + m.augments) if augmented else 1
        self._train_locs = list(m.split_locations("train"))
        self._val_locs = list(m.split_locations("val"))
        self._cache = {} if cache else None

    @property
    def n_train(self) -> int:
        return len(self._train_locs) * self._per_loc

    @property
    def n_val(self) -> int:
        return len(self._val_locs)

    def _load(self, loc: int, aug: int):
        if self._cache is None:
            return self.dataset.load_location(loc, aug)
        if (loc, aug) not in self._cache:
            self._cache[loc, aug] = self.dataset.load_location(loc, aug)
        return self._cache[loc, aug]

    def train_pair(self, j: int):
        loc = self._train_locs[j // self._per_loc]
        return self._load(loc, j % self._per_loc)

    def val_pairs(self):
        for loc in self._val_locs:
            yield self._load(loc, 0)
