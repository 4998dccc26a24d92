"""CT volumes, Hounsfield windowing, manifests, embedding files and a
synthetic lesion-volume generator."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "HU_MIN",
    "HU_MAX",
    "WindowSpec",
    "WINDOWS",
    "get_window",
    "apply_window",
    "Volume",
    "VolumeFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "HURangeError",
    "save_volume",
    "load_volume",
    "BBox",
    "ManifestEntry",
    "MANIFEST_HEADER",
    "write_manifest",
    "read_manifest",
    "label_matrix",
    "EmbeddingFormatError",
    "write_embeddings",
    "read_embeddings",
    "LesionClass",
    "SyntheticSpec",
    "DEFAULT_LESION_CLASSES",
    "disk_mask",
    "mask_bbox",
    "generate_synthetic",
    "write_dataset",
    "load_dataset_info",
]

HU_MIN, HU_MAX = -1024, 1024


# -- windowing ---------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"window {self.name!r}: low {self.low} must be below high {self.high}")


WINDOWS = {
    "abdominal": WindowSpec("abdominal", -175.0, 275.0),
    "lung": WindowSpec("lung", -1500.0, 500.0),
}


def get_window(name: str) -> WindowSpec:
    try:
        return WINDOWS[name]
    except KeyError:
        raise ValueError(f"unknown window {name!r}; known: {sorted(WINDOWS)}") from None


def apply_window(hu, window: WindowSpec) -> np.ndarray:
    """Clip HU values to the window and rescale linearly onto [0, 1]."""
    x = np.asarray(hu, dtype=np.float64)
    return (np.clip(x, window.low, window.high) - window.low) / (window.high - window.low)


# -- volumes -----------------------------------------------------------------


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class HURangeError(VolumeFormatError):
    pass


@dataclass
class Volume:
    patient_id: str
    scan_id: str
    voxels: np.ndarray  # int16, (n_slices, height, width), HU
    spacing: tuple = (1.0, 1.0, 5.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or 0 in self.voxels.shape:
            raise VolumeFormatError(f"volume {self.scan_id}: voxels must be a non-empty 3D array, got {self.voxels.shape}")
        if self.voxels.min() < HU_MIN or self.voxels.max() > HU_MAX:
            raise HURangeError(f"volume {self.scan_id}: HU outside [{HU_MIN}, {HU_MAX}]")
        self.voxels = self.voxels.astype(np.int16)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]


_VOL_MAGIC = b"CLVL"
_VOL_VERSION = 1
_ID_WIDTH = 32
_VOL_HEADER = struct.Struct(f"<4sI{_ID_WIDTH}s{_ID_WIDTH}sIII3d")


def _fixed_id(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > _ID_WIDTH:
        raise VolumeFormatError(f"identifier {s!r} longer than {_ID_WIDTH} bytes")
    return raw


def save_volume(vol: Volume, path: str | Path) -> None:
    n, h, w = vol.voxels.shape
    header = _VOL_HEADER.pack(_VOL_MAGIC, _VOL_VERSION, _fixed_id(vol.patient_id), _fixed_id(vol.scan_id),
                              n, h, w, *map(float, vol.spacing))
    Path(path).write_bytes(header + vol.voxels.astype("<i2").tobytes())


def load_volume(path: str | Path) -> Volume:
    buf = Path(path).read_bytes()
    if buf[:4] != _VOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {_VOL_MAGIC!r}")
    if len(buf) < _VOL_HEADER.size:
        raise TruncatedFileError(f"{path}: expected a {_VOL_HEADER.size}-byte header, got {len(buf)} bytes")
    _, version, pid, sid, n, h, w, *spacing = _VOL_HEADER.unpack_from(buf)
    if version != _VOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if n == 0 or h == 0 or w == 0:
        raise VolumeFormatError(f"{path}: header declares an empty volume ({n}x{h}x{w})")
    expected = _VOL_HEADER.size + 2 * n * h * w
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise VolumeFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    voxels = np.frombuffer(buf, dtype="<i2", offset=_VOL_HEADER.size).reshape(n, h, w)
    return Volume(pid.rstrip(b"\0").decode("utf-8"), sid.rstrip(b"\0").decode("utf-8"),
                  voxels.astype(np.int16), tuple(spacing))


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)`` on one slice."""

    x0: int
    y0: int
    x1: int
    y1: int
    slice_index: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


@dataclass
class ManifestEntry:
    patient_id: str
    scan_id: str
    path: str
    labels: list = field(default_factory=list)
    key_slices: list = field(default_factory=list)
    bboxes: list = field(default_factory=list)
    split: str = "train"

    def bbox_for(self, slice_index: int) -> BBox | None:
        for b in self.bboxes:
            if b.slice_index == slice_index:
                return b
        return None


MANIFEST_HEADER = ["patient_id", "scan_id", "path", "labels", "key_slices", "bboxes", "split"]


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for e in entries:
        writer.writerow([
            e.patient_id,
            e.scan_id,
            e.path,
            ";".join(e.labels),
            ";".join(str(k) for k in e.key_slices),
            ";".join(f"{b.x0}:{b.y0}:{b.x1}:{b.y1}@{b.slice_index}" for b in e.bboxes),
            e.split,
        ])
    Path(path).write_text(buf.getvalue())


def _split_field(s: str) -> list[str]:
    return [p for p in s.split(";") if p]


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            pid, sid, p, labels, keys, boxes, split = row
            bboxes = []
            for item in _split_field(boxes):
                coords, _, sl = item.partition("@")
                x0, y0, x1, y1 = (int(v) for v in coords.split(":"))
                bboxes.append(BBox(x0, y0, x1, y1, int(sl)))
            entries.append(ManifestEntry(pid, sid, p, _split_field(labels),
                                         [int(k) for k in _split_field(keys)], bboxes, split))
    return entries


def label_matrix(entries: Sequence[ManifestEntry], classes: Sequence[str]) -> np.ndarray:
    """Binary (n_entries, n_classes) matrix; unknown class names are an error."""
    index = {c: i for i, c in enumerate(classes)}
    y = np.zeros((len(entries), len(classes)), dtype=np.int64)
    for r, e in enumerate(entries):
        for lab in e.labels:
            if lab not in index:
                raise ValueError(f"scan {e.scan_id}: label {lab!r} not in vocabulary {list(classes)}")
            y[r, index[lab]] = 1
    return y


# -- embedding files ---------------------------------------------------------


class EmbeddingFormatError(ValueError):
    pass


_EMB_MAGIC = b"CLEM"
_EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIIB")
_WINDOW_TAGS = {"abdominal": 0, "lung": 1, "none": 255}
_TAG_NAMES = {v: k for k, v in _WINDOW_TAGS.items()}


def write_embeddings(rows, path: str | Path, window: str = "none") -> None:
    rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in rows]
    if not rows:
        raise EmbeddingFormatError("no embedding rows to write")
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise EmbeddingFormatError(f"embedding rows have inconsistent dims {sorted(dims)}")
    if window not in _WINDOW_TAGS:
        raise EmbeddingFormatError(f"unknown window tag {window!r}")
    mat = np.stack(rows).astype("<f4")
    header = _EMB_HEADER.pack(_EMB_MAGIC, _EMB_VERSION, mat.shape[0], mat.shape[1], _WINDOW_TAGS[window])
    Path(path).write_bytes(header + mat.tobytes())


def read_embeddings(path: str | Path) -> tuple[np.ndarray, str]:
    """Return the (n_slices, dim) float64 matrix and the window name."""
    buf = Path(path).read_bytes()
    if buf[:4] != _EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {buf[:4]!r}, expected {_EMB_MAGIC!r}")
    if len(buf) < _EMB_HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    _, version, n, dim, tag = _EMB_HEADER.unpack_from(buf)
    if version != _EMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_NAMES:
        raise EmbeddingFormatError(f"{path}: unknown window tag byte {tag}")
    expected = _EMB_HEADER.size + 4 * n * dim
    if len(buf) != expected:
        raise EmbeddingFormatError(f"{path}: expected {expected} bytes, got {len(buf)}")
    mat = np.frombuffer(buf, dtype="<f4", offset=_EMB_HEADER.size).reshape(n, dim)
    return mat.astype(np.float64), _TAG_NAMES[tag]


# -- synthetic cohort --------------------------------------------------------


@dataclass(frozen=True)
class LesionClass:
    name: str
    offset_hu: float
    radius_range: tuple = (3, 6)
    slice_prior: float = 0.5  # mean axial position as a fraction of the scan


DEFAULT_LESION_CLASSES = (
    LesionClass("liver", -150.0, (4, 7), 0.6),
    LesionClass("kidney", 160.0, (4, 7), 0.7),
    LesionClass("bone", 400.0, (3, 5), 0.4),
    LesionClass("lung", -400.0, (4, 7), 0.25),
)


@dataclass
class SyntheticSpec:
    n_patients: int = 200
    scans_per_patient: int = 1
    slices_per_scan: int = 32
    image_size: tuple = (64, 64)
    lesion_classes: tuple = DEFAULT_LESION_CLASSES
    class_prob: float = 0.4
    max_classes_per_scan: int = 2
    lesion_half_thickness: int = 2
    slice_prior_spread: float = 0.1
    background_hu: float = 40.0
    gradient_hu: float = 30.0
    noise_sigma: float = 8.0
    multilabel: bool = True
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        problems = []
        h, w = self.image_size
        if self.n_patients < 1 or self.scans_per_patient < 1 or self.slices_per_scan < 1:
            problems.append("n_patients, scans_per_patient and slices_per_scan must be positive")
        for c in self.lesion_classes:
            lo, hi = c.radius_range
            if lo < 2:
                problems.append(f"class {c.name}: lesion radius must be >= 2 px, got {lo}")
            if lo > hi:
                problems.append(f"class {c.name}: radius range {c.radius_range} is empty")
            if 2 * hi + 3 > min(h, w):
                problems.append(f"class {c.name}: radius {hi} does not fit a {h}x{w} image")
        offs = sorted(c.offset_hu for c in self.lesion_classes)
        if any(b - a < 30 for a, b in zip(offs, offs[1:])):
            problems.append("lesion class intensity offsets must differ pairwise by >= 30 HU")
        names = [c.name for c in self.lesion_classes]
        if len(set(names)) != len(names):
            problems.append("lesion class names must be unique")
        if not 0.0 <= self.class_prob <= 1.0:
            problems.append(f"class_prob must lie in [0, 1], got {self.class_prob}")
        if not self.multilabel and self.max_classes_per_scan > 1:
            problems.append("single-label cohorts need max_classes_per_scan = 1")
        if problems:
            raise ValueError("infeasible SyntheticSpec: " + "; ".join(problems))
        return self

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.lesion_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["lesion_classes"] = [
            {"name": c.name, "offset_hu": c.offset_hu, "radius_range": list(c.radius_range), "slice_prior": c.slice_prior}
            for c in self.lesion_classes
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "lesion_classes" in d:
            d["lesion_classes"] = tuple(
                LesionClass(c["name"], float(c["offset_hu"]), tuple(c["radius_range"]), float(c["slice_prior"]))
                for c in d["lesion_classes"]
            )
        return cls(**d)


def disk_mask(shape: tuple, cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean mask of pixels whose centre lies within ``radius`` of (cx, cy); x is the column."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _background(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    n, (h, w) = spec.slices_per_scan, spec.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = (xx - w / 2) / (w / 2), (yy - h / 2) / (h / 2)
    z = np.linspace(0.0, 1.0, n)
    theta = rng.uniform(0, 2 * np.pi)
    grad = spec.gradient_hu * (np.cos(theta) * u + np.sin(theta) * v)
    # body outline widens towards mid-scan, air outside
    ax = 0.70 + 0.20 * np.sin(np.pi * z) + rng.uniform(-0.05, 0.05)
    ay = 0.55 + 0.15 * np.sin(np.pi * z) + rng.uniform(-0.05, 0.05)
    vol = np.empty((n, h, w))
    for k in range(n):
        body = (u / ax[k]) ** 2 + (v / ay[k]) ** 2 <= 1.0
        tissue = spec.background_hu + grad + 20.0 * np.cos(2 * np.pi * z[k])
        vol[k] = np.where(body, tissue, -1000.0)
    return vol


def generate_synthetic(spec: SyntheticSpec, return_masks: bool = False):
    """Render a synthetic cohort.

    Returns ``(volumes, entries)``, plus a list of per-scan integer class maps
    (0 = background, c+1 = lesion class c) of the noiseless lesion masks when
    ``return_masks`` is set.  Entry paths are relative (``volumes/<scan>.clvl``).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, (h, w) = spec.slices_per_scan, spec.image_size
    volumes, entries, maps = [], [], []
    for p in range(spec.n_patients):
        pid = f"P{p:04d}"
        for s in range(spec.scans_per_patient):
            sid = f"{pid}_S{s}"
            vol = _background(rng, spec)
            class_map = np.zeros((n, h, w), dtype=np.int16)
            present = [i for i in range(len(spec.lesion_classes)) if rng.random() < spec.class_prob]
            if len(present) > spec.max_classes_per_scan:
                present = sorted(rng.choice(present, spec.max_classes_per_scan, replace=False).tolist())
            bboxes, keys = [], []
            for ci in present:
                cls = spec.lesion_classes[ci]
                r = rng.uniform(*cls.radius_range)
                zc = int(np.clip(round(rng.normal(cls.slice_prior, spec.slice_prior_spread) * (n - 1)), 0, n - 1))
                margin = int(np.ceil(r)) + 2
                cx = rng.uniform(w / 2 - w / 4, w / 2 + w / 4)
                cy = rng.uniform(h / 2 - h / 5, h / 2 + h / 5)
                cx, cy = float(np.clip(cx, margin, w - 1 - margin)), float(np.clip(cy, margin, h - 1 - margin))
                t = spec.lesion_half_thickness
                for dz in range(-t, t + 1):
                    z = zc + dz
                    if not 0 <= z < n:
                        continue
                    rz = r * np.sqrt(1.0 - (dz / (t + 1)) ** 2)
                    m = disk_mask((h, w), cx, cy, rz)
                    vol[z][m] += cls.offset_hu
                    class_map[z][m] = ci + 1
                    if dz == 0:
                        x0, y0, x1, y1 = mask_bbox(m)
                        bboxes.append(BBox(x0, y0, x1, y1, z))
                        keys.append(z)
            vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape)
            voxels = np.clip(np.round(vol), HU_MIN, HU_MAX).astype(np.int16)
            volumes.append(Volume(pid, sid, voxels))
            bboxes.sort(key=lambda b: b.slice_index)
            entries.append(ManifestEntry(
                pid, sid, f"volumes/{sid}.clvl",
                labels=[spec.lesion_classes[ci].name for ci in present],
                key_slices=sorted(set(keys)),
                bboxes=bboxes,
            ))
            maps.append(class_map)
    if return_masks:
        return volumes, entries, maps
    return volumes, entries


def write_dataset(out_dir: str | Path, spec: SyntheticSpec, volumes, entries) -> Path:
    """Write volumes, ``manifest.csv`` and ``dataset.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    for vol, e in zip(volumes, entries):
        save_volume(vol, out / e.path)
    write_manifest(entries, out / "manifest.csv")
    info = {"classes": spec.class_names, "multilabel": spec.multilabel, "spec": spec.to_dict()}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"


def load_dataset_info(manifest_path: str | Path) -> dict:
    """Class vocabulary and task kind stored next to a manifest.

    Falls back to the sorted union of manifest labels when no ``dataset.json``
    is present.
    """
    info_path = Path(manifest_path).with_name("dataset.json")
    if info_path.exists():
        return json.loads(info_path.read_text())
    classes = sorted({lab for e in read_manifest(manifest_path) for lab in e.labels})
    return {"classes": classes, "multilabel": True}


def with_split(entry: ManifestEntry, split: str) -> ManifestEntry:
    return replace(entry, split=split)
