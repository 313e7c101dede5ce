"""Synthetic head-and-neck phantoms, resizing, patient-level folds and the
sample file format.

The phantom uses radiological orientation: the patient's left is on the
image's right, so every ``*_L`` organ lies in columns ``x >= W/2``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .tensor import bilinear_matrix

LABELS = (
    "background",
    "eye_L",
    "eye_R",
    "temporal_lobe_L",
    "temporal_lobe_R",
    "mandible_L",
    "mandible_R",
    "brainstem",
    "parotid_L",
    "parotid_R",
    "spinal_cord",
    "submandibular_L",
    "submandibular_R",
    "thyroid",
)
NUM_CLASSES = len(LABELS)
ORGANS = tuple(range(1, NUM_CLASSES))


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 labels
    patient_id: str
    sample_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"image must have shape (1, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f"mask shape {self.mask.shape} != image extents {self.image.shape[1:]}")
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= NUM_CLASSES):
            bad = int(self.mask.max() if self.mask.max() >= NUM_CLASSES else self.mask.min())
            raise DataError(f"mask label {bad} outside 0..{NUM_CLASSES - 1}")
        self.mask = self.mask.astype(np.uint8)

    @property
    def size(self) -> tuple:
        return self.mask.shape


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class _Organ:
    label: int
    mirror: int | None  # label of the right-hand twin, drawn at -u
    u: float  # centre, fraction of half-width from the midline
    v: float  # centre, fraction of half-height from the middle row
    a: float  # semi-axis along x, fraction of half-width
    b: float  # semi-axis along y, fraction of half-height
    z0: float  # present for slice positions z in [z0, z1]
    z1: float
    intensity: float


# Drawn in this order, so later (smaller) organs win on overlap.
_ANATOMY = (
    _Organ(3, 4, 0.38, -0.05, 0.22, 0.32, 0.05, 0.45, 0.45),  # temporal lobes
    _Organ(5, 6, 0.35, -0.25, 0.12, 0.30, 0.47, 0.80, 0.90),  # mandible
    _Organ(8, 9, 0.55, 0.10, 0.12, 0.18, 0.47, 0.72, 0.38),  # parotids
    _Organ(7, None, 0.0, 0.15, 0.12, 0.14, 0.25, 0.60, 0.52),  # brainstem
    _Organ(1, 2, 0.30, -0.55, 0.11, 0.10, 0.00, 0.30, 0.60),  # eyes
    _Organ(11, 12, 0.22, 0.15, 0.08, 0.07, 0.65, 0.90, 0.68),  # submandibular
    _Organ(13, None, 0.0, -0.15, 0.20, 0.07, 0.80, 1.00, 0.78),  # thyroid
    _Organ(10, None, 0.0, 0.45, 0.06, 0.06, 0.30, 1.00, 0.97),  # spinal cord
)
_BODY_INTENSITY = 0.25
_NOISE_SIGMA = 0.03
_ABSENT_PROB = 0.1


def _ellipse(shape, u, v, a, b):
    h, w = shape
    ys = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xs = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return ((xs[None, :] - u) / a) ** 2 + ((ys[:, None] - v) / b) ** 2 <= 1.0


def _phantom_slice(rng, size, z, organ_scale, body_scale, offset):
    shape = (size, size)
    image = np.zeros(shape)
    mask = np.zeros(shape, dtype=np.uint8)
    body = _ellipse(shape, 0.0, 0.0, 0.85 * body_scale, 0.92 * body_scale)
    image[body] = _BODY_INTENSITY
    for org in _ANATOMY:
        if not org.z0 <= z <= org.z1:
            continue
        # organs taper towards the ends of their extent but never vanish
        half = (org.z1 - org.z0) / 2
        t = (z - (org.z0 + half)) / half if half > 0 else 0.0
        profile = 0.6 + 0.4 * np.sqrt(max(0.0, 1.0 - t * t))
        s = organ_scale[org.label] * profile
        sides = [(org.label, org.u)] if org.mirror is None else [(org.label, org.u), (org.mirror, -org.u)]
        for label, u in sides:
            if rng.random() < _ABSENT_PROB:
                continue
            region = _ellipse(shape, u, org.v, org.a * s, org.b * s) & body
            mask[region] = label
            image[region] = org.intensity + offset
    image += rng.normal(0.0, _NOISE_SIGMA, size=shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_phantom(seed: int, n_patients: int, slices_per_patient: int, size: int) -> list:
    """Deterministic synthetic dataset of ``n_patients * slices_per_patient`` samples.

    Each patient gets its own anatomy scale and intensity offset; slices
    sweep from the orbits (z=0) down to the neck (z=1), so which organs
    appear depends on the slice, and any organ may be randomly absent.
    """
    if size % 16 or size < 16:
        raise ConfigurationError(f"phantom size must be a positive multiple of 16, got {size}")
    if n_patients < 1 or slices_per_patient < 1:
        raise ConfigurationError("need at least one patient and one slice per patient")
    samples = []
    for p in range(n_patients):
        rng = np.random.default_rng([seed, p])
        body_scale = rng.uniform(0.95, 1.05)
        offset = rng.uniform(-0.02, 0.02)
        organ_scale = {}
        for org in _ANATOMY:
            s = body_scale * rng.uniform(0.9, 1.1)
            organ_scale[org.label] = s
            if org.mirror is not None:
                organ_scale[org.mirror] = s
        phase = rng.uniform(0.0, 1.0)
        pid = f"P{p:03d}"
        for j in range(slices_per_patient):
            z = (j + phase) / slices_per_patient
            image, mask = _phantom_slice(rng, size, z, organ_scale, body_scale, offset)
            samples.append(Sample(image[None], mask, pid, f"{pid}_S{j:03d}"))
    return samples


def restrict_labels(samples: Sequence[Sample], organs: Sequence[int]) -> list:
    """Keep only ``organs`` (relabelled 1..len(organs)); everything else becomes background."""
    lut = np.zeros(NUM_CLASSES, dtype=np.uint8)
    for new, old in enumerate(organs, start=1):
        if not 1 <= old < NUM_CLASSES:
            raise DataError(f"organ label {old} outside 1..{NUM_CLASSES - 1}")
        lut[old] = new
    return [replace(s, mask=lut[s.mask]) for s in samples]


# ---------------------------------------------------------------- resizing


def _pad_to_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    n = max(h, w)
    top, left = (n - h) // 2, (n - w) // 2
    out = np.zeros((n, n), dtype=arr.dtype)
    out[top:top + h, left:left + w] = arr
    return out


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.intp), n_in - 1)


def resize_to(sample: Sample, target: int) -> Sample:
    """Zero-pad symmetrically to a square, then resize to ``target``.

    The image is resampled bilinearly, the mask by nearest neighbour so no
    new label values can appear.
    """
    if target < 1:
        raise ConfigurationError(f"target size must be positive, got {target}")
    h, w = sample.mask.shape
    if h == w == target:
        return sample
    image = _pad_to_square(sample.image[0])
    mask = _pad_to_square(sample.mask)
    n = image.shape[0]
    m = bilinear_matrix(n, target, np.float64)
    image = (m @ image.astype(np.float64) @ m.T).astype(np.float32)
    idx = _nearest_index(n, target)
    mask = mask[np.ix_(idx, idx)]
    return replace(sample, image=np.clip(image, 0.0, 1.0)[None], mask=mask)


# ---------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    k: int
    assignment: dict = field(default_factory=dict)  # patient_id -> fold index

    def patients(self, fold: int) -> list:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def sizes(self) -> list:
        return [len(self.patients(f)) for f in range(self.k)]

    def train_test(self, samples: Sequence[Sample], fold: int) -> tuple:
        if not 0 <= fold < self.k:
            raise ConfigurationError(f"fold {fold} outside 0..{self.k - 1}")
        train = [s for s in samples if self.assignment[s.patient_id] != fold]
        test = [s for s in samples if self.assignment[s.patient_id] == fold]
        return train, test

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}


def split_folds(patient_ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    """Seeded shuffle of the distinct patients, then round-robin into ``k`` folds."""
    patients = sorted(set(patient_ids))
    if k < 1 or k > len(patients):
        raise ConfigurationError(f"cannot split {len(patients)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    return FoldSplit(k, {patients[i]: pos % k for pos, i in enumerate(order)})


# ---------------------------------------------------------------- file format

SAMPLE_MAGIC = b"SECPIMG"
SAMPLE_VERSION = 1
KIND_IMAGE = 0
KIND_MASK = 1
_HEADER = struct.Struct("<7sBBII")


def encode_array(arr: np.ndarray, kind: int) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"sample payload must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    if kind == KIND_IMAGE:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif kind == KIND_MASK:
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise DataError(f"mask label {int(arr.max())} outside 0..{NUM_CLASSES - 1}")
        payload = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    else:
        raise DataError(f"unknown sample kind {kind}")
    return _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, kind, h, w) + payload


def decode_array(blob: bytes) -> tuple:
    """Parse a sample file; returns ``(kind, array)``."""
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} of {_HEADER.size} bytes", len(blob))
    magic, version, kind, h, w = _HEADER.unpack_from(blob)
    if magic != SAMPLE_MAGIC:
        raise FormatError("bad sample magic", 0)
    if version != SAMPLE_VERSION:
        raise FormatError(f"unsupported sample version {version}", 7)
    if kind not in (KIND_IMAGE, KIND_MASK):
        raise FormatError(f"unknown sample kind {kind}", 8)
    itemsize = 4 if kind == KIND_IMAGE else 1
    need = _HEADER.size + h * w * itemsize
    if len(blob) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError("trailing bytes after payload", need)
    body = blob[_HEADER.size:need]
    if kind == KIND_IMAGE:
        return kind, np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    mask = np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
    bad = np.flatnonzero(mask >= NUM_CLASSES)
    if bad.size:
        raise DataError(
            f"mask value {int(mask.flat[bad[0]])} at byte offset {_HEADER.size + int(bad[0])} "
            f"exceeds the largest label {NUM_CLASSES - 1}"
        )
    return kind, mask


def read_array(path, expect_kind: int | None = None) -> np.ndarray:
    kind, arr = decode_array(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected kind {expect_kind}, found {kind}", 8)
    return arr


def write_array(path, arr: np.ndarray, kind: int) -> None:
    Path(path).write_bytes(encode_array(arr, kind))


def sample_paths(stem) -> tuple:
    stem = Path(stem)
    return stem.with_name(stem.name + ".image.bin"), stem.with_name(stem.name + ".mask.bin")


def save_sample(sample: Sample, stem) -> tuple:
    """Write ``<stem>.image.bin`` and ``<stem>.mask.bin``; returns both paths."""
    img_path, mask_path = sample_paths(stem)
    img_path.parent.mkdir(parents=True, exist_ok=True)
    write_array(img_path, sample.image, KIND_IMAGE)
    write_array(mask_path, sample.mask, KIND_MASK)
    return img_path, mask_path


def load_sample(stem, patient_id: str = "", sample_id: str = "") -> Sample:
    img_path, mask_path = sample_paths(stem)
    return Sample(read_array(img_path, KIND_IMAGE)[None], read_array(mask_path, KIND_MASK), patient_id, sample_id)


MANIFEST = "manifest.json"


def save_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write every sample under ``out_dir/samples`` plus ``manifest.json``."""
    out = Path(out_dir)
    entries = []
    for i, s in enumerate(samples):
        sid = s.sample_id or f"{s.patient_id}_{i:05d}"
        img, mask = save_sample(s, out / "samples" / sid)
        entries.append({
            "id": sid,
            "patient": s.patient_id,
            "image_path": img.relative_to(out).as_posix(),
            "mask_path": mask.relative_to(out).as_posix(),
        })
    manifest = {"labels": list(LABELS), "samples": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(path) -> list:
    """Load from a dataset directory or its manifest file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text())
    if list(manifest.get("labels", [])) != list(LABELS):
        raise FormatError(f"{path}: label list does not match the 14 expected labels")
    root = path.parent
    return [
        Sample(
            read_array(root / e["image_path"], KIND_IMAGE)[None],
            read_array(root / e["mask_path"], KIND_MASK),
            e["patient"],
            e["id"],
        )
        for e in manifest["samples"]
    ]
