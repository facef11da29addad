"""Case ingestion, preprocessing, slicing, fold splits and phantom cases."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MissingModality, ShapeMismatch, TooFewCases, UnreadableFile
from .morphology import WeightSpec, weight_map

log = logging.getLogger(__name__)

MODALITIES = ("TMax", "TTP", "DWI")
MASKS = ("penumbra", "core")
EXTENSIONS = (".rawf32", ".nii.gz", ".nii")
BACKGROUND, PENUMBRA, CORE = 0, 1, 2


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume must be 3-D with positive extent, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Case:
    case_id: str
    modalities: dict
    penumbra_mask: Volume
    core_mask: Volume

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.modalities]
        if missing:
            raise MissingModality(missing[0], self.case_id)
        shapes = {name: vol.shape for name, vol in self.volumes().items()}
        if len(set(shapes.values())) != 1:
            raise ShapeMismatch(shapes)
        for name in MASKS:
            vol = getattr(self, f"{name}_mask")
            if not np.isin(vol.data, (0.0, 1.0)).all():
                raise DataError(f"{name} mask of case {self.case_id} is not binary")

    def volumes(self):
        vols = {m: self.modalities[m] for m in MODALITIES}
        vols["penumbra"] = self.penumbra_mask
        vols["core"] = self.core_mask
        return vols

    @property
    def shape(self):
        return self.penumbra_mask.shape

    def labels(self) -> np.ndarray:
        return encode_labels(self.penumbra_mask.data, self.core_mask.data)


@dataclass
class SliceSample:
    input: np.ndarray
    labels: np.ndarray
    boundary_weights: np.ndarray
    case_id: str
    slice_index: int
    # (top, bottom, left, right) zero padding added around the original slice
    padding: tuple = (0, 0, 0, 0)

    def crop(self, arr):
        top, bottom, left, right = self.padding
        h, w = arr.shape[-2:]
        return arr[..., top : h - bottom, left : w - right]


@dataclass
class FoldSplit:
    folds: list
    seed: int

    @property
    def k(self):
        return len(self.folds)

    def train_ids(self, fold):
        return [cid for i, f in enumerate(self.folds) if i != fold for cid in f]

    def val_ids(self, fold):
        return list(self.folds[fold])

    def to_json(self):
        return {"seed": self.seed, "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_json(cls, obj):
        return cls(folds=[list(f) for f in obj["folds"]], seed=int(obj["seed"]))


# -- raw + sidecar and NIfTI io ------------------------------------------------


def write_rawf32(path, data, spacing=(1.0, 1.0, 1.0)):
    """Write ``<stem>.rawf32`` plus the ``<stem>.json`` sidecar."""
    path = Path(path)
    data = np.ascontiguousarray(data, dtype="<f4")
    path.write_bytes(data.tobytes(order="C"))
    sidecar = {"shape": list(data.shape), "spacing": [float(s) for s in spacing]}
    path.with_suffix(".json").write_text(json.dumps(sidecar) + "\n")


def read_rawf32(path) -> Volume:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(meta.get("spacing", (1.0, 1.0, 1.0)))
        flat = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if flat.size != int(np.prod(shape)):
        raise UnreadableFile(f"{path}: {flat.size} floats do not fill shape {shape}")
    return Volume(flat.reshape(shape), spacing)


def read_nifti(path) -> Volume:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises a zoo of types
        raise UnreadableFile(f"{path}: {exc}") from exc
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise UnreadableFile(f"{path}: expected 3-D image, got shape {arr.shape}")
    zooms = img.header.get_zooms()[:3]
    # NIfTI stores (x, y, z); volumes here are (D, H, W) = (z, y, x)
    return Volume(arr.transpose(2, 1, 0), tuple(float(z) for z in zooms[::-1]))


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0)):
    import nibabel as nib

    arr = np.asarray(data, dtype=np.float32).transpose(2, 1, 0)
    affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
    nib.save(nib.Nifti1Image(arr, affine), str(path))


def _find_volume_file(case_dir: Path, name: str):
    for ext in EXTENSIONS:
        p = case_dir / f"{name}{ext}"
        if p.exists():
            return p
    return None


def read_volume(path) -> Volume:
    path = Path(path)
    if path.suffix == ".rawf32":
        return read_rawf32(path)
    return read_nifti(path)


def load_case(case_dir) -> Case:
    case_dir = Path(case_dir)
    if not case_dir.is_dir():
        raise DataError(f"case directory not found: {case_dir}")
    vols = {}
    for name in MODALITIES + MASKS:
        path = _find_volume_file(case_dir, name)
        if path is None:
            raise MissingModality(name, case_dir)
        vols[name] = read_volume(path)
    shapes = {k: v.shape for k, v in vols.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeMismatch(shapes)
    for name in MASKS:
        vols[name] = Volume((vols[name].data > 0.5).astype(np.float32), vols[name].spacing)
    return Case(
        case_id=case_dir.name,
        modalities={m: vols[m] for m in MODALITIES},
        penumbra_mask=vols["penumbra"],
        core_mask=vols["core"],
    )


def save_case(case: Case, root, fmt="rawf32") -> Path:
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for name, vol in case.volumes().items():
        if fmt == "rawf32":
            write_rawf32(case_dir / f"{name}.rawf32", vol.data, vol.spacing)
        elif fmt in ("nii", "nii.gz"):
            write_nifti(case_dir / f"{name}.{fmt}", vol.data, vol.spacing)
        else:
            raise ValueError(f"unknown volume format {fmt!r}")
    return case_dir


def read_manifest(path, root=None) -> list:
    """Case ids listed one per line; returns ``(case_id, case_dir)`` pairs."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = Path(root) if root is not None else path.parent
    ids = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return [(cid, root / cid) for cid in ids]


def write_manifest(path, case_ids):
    Path(path).write_text("".join(f"{cid}\n" for cid in case_ids))


def load_manifest_cases(path, root=None) -> list:
    return [load_case(d) for _, d in read_manifest(path, root)]


# -- preprocessing -------------------------------------------------------------


def encode_labels(penumbra_mask, core_mask) -> np.ndarray:
    pen = np.asarray(penumbra_mask)
    core = np.asarray(core_mask)
    if pen.shape != core.shape:
        raise ShapeMismatch({"penumbra": pen.shape, "core": core.shape})
    labels = np.zeros(pen.shape, dtype=np.int64)
    labels[pen > 0.5] = PENUMBRA
    labels[core > 0.5] = CORE
    return labels


def normalize_modality(v: Volume) -> Volume:
    """Z-score over nonzero voxels; zeros stay zero, constant volumes become all-zero."""
    data = v.data.astype(np.float64)
    support = data != 0
    out = np.zeros_like(data)
    if support.any():
        vals = data[support]
        std = vals.std()
        if std > 0:
            out[support] = (vals - vals.mean()) / std
    return Volume(out.astype(np.float32), v.spacing)


def pad_amounts(size: int, multiple: int):
    target = -(-size // multiple) * multiple
    total = target - size
    return total // 2, total - total // 2


def extract_slices(case: Case, pad_to_multiple: int = 32, weights: WeightSpec | None = None,
                   drop_empty: bool = False) -> list:
    weights = weights or WeightSpec()
    stack = np.stack([normalize_modality(case.modalities[m]).data for m in MODALITIES])
    labels = case.labels()
    d, h, w = labels.shape
    top, bottom = pad_amounts(h, pad_to_multiple)
    left, right = pad_amounts(w, pad_to_multiple)
    samples = []
    for z in range(d):
        lab = labels[z]
        if drop_empty and not lab.any():
            continue
        x = np.pad(stack[:, z], ((0, 0), (top, bottom), (left, right)))
        lab = np.pad(lab, ((top, bottom), (left, right)))
        samples.append(SliceSample(
            input=x.astype(np.float32),
            labels=lab,
            boundary_weights=weight_map(lab, weights),
            case_id=case.case_id,
            slice_index=z,
            padding=(top, bottom, left, right),
        ))
    return samples


def make_folds(case_ids, k: int, seed: int) -> FoldSplit:
    ids = list(case_ids)
    if k < 2:
        raise TooFewCases(f"k must be >= 2, got {k}")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate case ids")
    if len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases cannot fill {k} folds")
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    folds = [order[i::k] for i in range(k)]
    return FoldSplit(folds=folds, seed=seed)


# -- phantom cases -------------------------------------------------------------

# Intensity offsets per region (penumbra, core). Perfusion maps light up the whole
# lesion, TTP only weakly separates core, DWI marks the core alone.
_OFFSETS = {
    "TMax": (1.6, 1.6),
    "TTP": (1.0, 1.8),
    "DWI": (0.0, 2.2),
}


def synth_case(seed: int, shape=(2, 96, 96), case_id: str | None = None) -> Case:
    d, h, w = (int(s) for s in shape)
    if h < 64 or w < 64 or d < 1:
        raise DataError(f"phantom needs H, W >= 64 and D >= 1, got {shape}")
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(np.arange(d) + 0.5, np.arange(h) + 0.5, np.arange(w) + 0.5,
                             indexing="ij")

    brain = ((yy - h / 2) / (0.45 * h)) ** 2 + ((xx - w / 2) / (0.42 * w)) ** 2 <= 1.0

    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    ry = rng.uniform(0.16, 0.22) * h
    rx = rng.uniform(0.16, 0.22) * w
    rz = 0.75 * d + 0.5
    theta = rng.uniform(0, np.pi)
    cos, sin = np.cos(theta), np.sin(theta)
    u = (yy - cy) * cos + (xx - cx) * sin
    v = -(yy - cy) * sin + (xx - cx) * cos
    rho = (u / ry) ** 2 + (v / rx) ** 2 + ((zz - d / 2) / rz) ** 2

    core_frac = rng.uniform(0.45, 0.6)
    penumbra = (rho <= 1.0) & brain
    core = (rho <= core_frac ** 2) & brain

    phase = rng.uniform(0, 2 * np.pi, size=2)
    smooth = 0.3 * np.sin(2 * np.pi * yy / h + phase[0]) * np.cos(2 * np.pi * xx / w + phase[1])

    modalities = {}
    for name in MODALITIES:
        off_pen, off_core = _OFFSETS[name]
        base = 2.0 + smooth + rng.normal(0.0, 0.25, size=(d, h, w))
        img = base + off_pen * (penumbra & ~core) + off_core * core
        img = np.where(brain, img, 0.0)
        modalities[name] = Volume(img.astype(np.float32))

    return Case(
        case_id=case_id or f"synth{seed:04d}",
        modalities=modalities,
        penumbra_mask=Volume(penumbra.astype(np.float32)),
        core_mask=Volume(core.astype(np.float32)),
    )
