"""Synthetic brain-like phantom volumes with class-conditioned lesions.

Geometry is defined in normalized template coordinates ``[-1, 1]^3`` and
sampled on the voxel grid after a per-patient (plus small per-image) affine
jitter, so the same patient renders consistently at any resolution.

Volumes are indexed ``[x, y, z]``; axial slices fix z, coronal fix y and
sagittal fix x.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor.rng import RngStream, mix_seed

CLASSES = ("healthy", "ms", "leuk1", "leuk2", "leuk3")
LEUK_GRADES = {"leuk1": 1, "leuk2": 2, "leuk3": 3}
METADATA_KEYS = ("tr_ms", "te_ms", "pixel_bandwidth_hz", "age_years")

# patients per class in the clinical databases (healthy, MS, L1, L2, L3)
PAPER_PATIENTS = {"healthy": 1855, "ms": 616, "leuk1": 384, "leuk2": 40, "leuk3": 201}
PAPER_IMAGES = {"healthy": 1855, "ms": 2910, "leuk1": 393, "leuk2": 41, "leuk3": 205}
PAPER_AGE = {"healthy": (39.0, 24.0), "ms": (46.0, 14.0), "leuk1": (73.0, 10.0),
             "leuk2": (76.0, 9.0), "leuk3": (81.0, 8.0)}

DEFAULT_SHAPE = (40, 48, 40)
RAW_SHAPE = (182, 218, 182)

# stream keys for mix_seed
_ANATOMY, _MS, _LEUK, _PATIENT_META = 1, 2, 3, 4
_IMAGE_BASE = 100


def _default_weights() -> dict[str, float]:
    total = sum(PAPER_PATIENTS.values())
    return {c: PAPER_PATIENTS[c] / total for c in CLASSES}


def _default_extra_images() -> dict[str, float]:
    return {c: PAPER_IMAGES[c] / PAPER_PATIENTS[c] - 1.0 for c in CLASSES}


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    class_proportions: dict[str, float] = field(default_factory=_default_weights)
    # mean number of extra scans per patient (Poisson); paper ratio images/patients - 1
    extra_images: dict[str, float] = field(default_factory=_default_extra_images)
    max_images_per_patient: int = 8

    brain_radii: tuple[float, float, float] = (0.82, 0.86, 0.78)
    rim_fraction: float = 0.15
    ventricle_offset: float = 0.13
    ventricle_radii: tuple[float, float, float] = (0.09, 0.30, 0.15)
    background: float = 0.0
    gray_intensity: float = 0.35
    white_intensity: float = 0.55
    ventricle_intensity: float = 0.12

    lesion_threshold: float = 0.75
    ms_count_mean: float = 8.0
    ms_radius_range: tuple[float, float] = (0.13, 0.20)
    ms_intensity_range: tuple[float, float] = (0.88, 1.0)
    leuk_thickness: tuple[float, float, float] = (0.10, 0.17, 0.26)
    leuk_peak: tuple[float, float, float] = (0.80, 0.88, 0.97)
    leuk_patchiness: float = 0.3

    jitter_rotation_deg: float = 2.0
    jitter_scale: float = 0.02
    jitter_shift: float = 0.015
    image_jitter_fraction: float = 0.25
    noise_sigma: float = 0.02

    scan_means: dict[str, float] = field(default_factory=lambda: {
        "tr_ms": 9000.0, "te_ms": 90.0, "pixel_bandwidth_hz": 260.0})
    scan_sds: dict[str, float] = field(default_factory=lambda: {
        "tr_ms": 400.0, "te_ms": 6.0, "pixel_bandwidth_hz": 25.0})
    ms_scan_offset: dict[str, float] = field(default_factory=lambda: {
        "tr_ms": 1000.0, "te_ms": 30.0, "pixel_bandwidth_hz": -60.0})
    age: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(PAPER_AGE))
    # 0 disables; otherwise intensities scale by 1 + gain * (te - te_mean) / te_mean
    contrast_gain: float = 0.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        for k in ("brain_radii", "ventricle_radii", "ms_radius_range", "ms_intensity_range",
                  "leuk_thickness", "leuk_peak"):
            setattr(self, k, tuple(float(v) for v in getattr(self, k)))
        self.age = {c: tuple(v) for c, v in self.age.items()}
        self.validate()

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise ValueError(f"shape must be three extents >= 2, got {self.shape}")
        if set(self.class_proportions) != set(CLASSES):
            raise ValueError(f"class_proportions must cover exactly {CLASSES}")
        props = np.array([self.class_proportions[c] for c in CLASSES])
        if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ValueError(f"class proportions must be >= 0 and sum to 1, got sum {props.sum()}")
        shell = self.white_matter_shell()
        lo, hi = self.ms_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"ms_radius_range must satisfy 0 < lo <= hi, got {self.ms_radius_range}")
        if 2 * hi > shell:
            raise ValueError(f"MS lesion diameter {2 * hi:.3f} exceeds the white-matter shell {shell:.3f}")
        if max(self.leuk_thickness) > shell:
            raise ValueError(f"leukoencephalopathy thickness {max(self.leuk_thickness):.3f} "
                             f"exceeds the white-matter shell {shell:.3f}")
        if list(self.leuk_thickness) != sorted(self.leuk_thickness) or \
                list(self.leuk_peak) != sorted(self.leuk_peak):
            raise ValueError("leuk_thickness and leuk_peak must increase with grade")

    def white_matter_shell(self) -> float:
        """Narrowest template-space gap between ventricle surface and the gray rim."""
        inner = [r * (1 - self.rim_fraction) for r in self.brain_radii]
        vo, vr = self.ventricle_offset, self.ventricle_radii
        return min(inner[0] - (vo + vr[0]), inner[1] - vr[1], inner[2] - vr[2])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Lesion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float


# ---------------------------------------------------------------- geometry

def _grid(shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [((np.arange(n, dtype=np.float32) + 0.5) * (2.0 / n) - 1.0) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _rotation(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _draw_jitter(rng: RngStream, cfg: PhantomConfig, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    angles = np.deg2rad(rng.uniform(-1, 1, 3) * cfg.jitter_rotation_deg * fraction)
    scales = 1.0 + rng.uniform(-1, 1, 3) * cfg.jitter_scale * fraction
    shift = rng.uniform(-1, 1, 3) * cfg.jitter_shift * fraction
    return _rotation(angles) @ np.diag(1.0 / scales), shift


def _template_coords(shape, transforms) -> list[np.ndarray]:
    """Map voxel centers into template space through the composed jitters."""
    x = np.stack(_grid(shape), axis=0).reshape(3, -1)
    for mat, shift in transforms:
        x = mat.astype(np.float32) @ (x - shift.astype(np.float32)[:, None])
    return [c.reshape(shape) for c in x]


def _ellipsoid_rho(coords, center, radii) -> np.ndarray:
    return np.sqrt(sum(((c - o) / r) ** 2 for c, o, r in zip(coords, center, radii)))


def _ventricle_centers(cfg: PhantomConfig):
    vo = cfg.ventricle_offset
    return [(-vo, 0.0, 0.0), (vo, 0.0, 0.0)]


def ms_lesions(cfg: PhantomConfig, patient_seed: int) -> list[Lesion]:
    """Focal lesions hugging the ventricle surface; count ~ 1 + Poisson(mean - 1)."""
    rng = RngStream(mix_seed(patient_seed, _MS))
    count = 1 + int(rng.poisson(max(cfg.ms_count_mean - 1.0, 0.0)))
    lesions = []
    vr = np.array(cfg.ventricle_radii)
    for _ in range(count):
        lobe = _ventricle_centers(cfg)[int(rng.integers(0, 2))]
        direction = rng.normal(3)
        direction[0] = abs(direction[0]) * np.sign(lobe[0])  # lateral side only
        direction /= np.linalg.norm(direction)
        surface = np.array(lobe) + direction / np.linalg.norm(direction / vr)
        r = rng.uniform(*cfg.ms_radius_range)
        radii = r * rng.uniform(0.75, 1.0, 3)
        center = surface + direction * radii.max() * rng.uniform(0.5, 1.0)
        lesions.append(Lesion(tuple(center), tuple(radii), float(rng.uniform(*cfg.ms_intensity_range))))
    return lesions


def _leuk_layer(cfg: PhantomConfig, coords, grade: int, patient_seed: int) -> np.ndarray:
    """Diffuse periventricular hyperintensity; returns target intensity (0 where absent)."""
    rng = RngStream(mix_seed(patient_seed, _LEUK))
    vr = cfg.ventricle_radii
    r_mean = float(np.mean(vr))
    dist = np.minimum(*[_ellipsoid_rho(coords, c, vr) for c in _ventricle_centers(cfg)])
    dist = (dist - 1.0) * r_mean
    thick = cfg.leuk_thickness[grade - 1]
    peak = cfg.leuk_peak[grade - 1]
    # low-frequency patchiness from a few random cosine modes, shared across grades
    k = rng.normal((4, 3)) * 3.0
    ph = rng.uniform(0, 2 * np.pi, 4)
    patch = sum(np.cos(k[i, 0] * coords[0] + k[i, 1] * coords[1] + k[i, 2] * coords[2] + ph[i])
                for i in range(4)) / 4.0
    profile = np.clip(1.0 - dist / thick, 0.0, 1.0) * (dist > 0)
    amp = (peak - cfg.white_intensity) * (1.0 + cfg.leuk_patchiness * patch)
    return np.where(profile > 0, cfg.white_intensity + amp * profile, 0.0).astype(np.float32)


def _draw_metadata(cfg: PhantomConfig, patient_seed: int, image_index: int, label: str) -> dict[str, float]:
    prng = RngStream(mix_seed(patient_seed, _PATIENT_META))
    am, asd = cfg.age[label]
    meta = {}
    irng = RngStream(mix_seed(patient_seed, _IMAGE_BASE + image_index, 1))
    for key in ("tr_ms", "te_ms", "pixel_bandwidth_hz"):
        mu = cfg.scan_means[key] + (cfg.ms_scan_offset.get(key, 0.0) if label == "ms" else 0.0)
        meta[key] = float(mu + cfg.scan_sds[key] * irng.normal())
    meta["age_years"] = float(np.clip(am + asd * prng.normal(), 0.0, 105.0))
    return meta


def generate_phantom(config: PhantomConfig, patient_seed: int, class_label: str,
                     image_index: int = 0) -> tuple[np.ndarray, dict[str, float]]:
    """Render one phantom volume (float32, values in [0, 1]) and its metadata.

    Anatomy and lesions depend only on ``patient_seed`` and ``class_label``;
    ``image_index`` selects a repeat scan with its own small repositioning,
    noise and acquisition parameters.
    """
    if class_label not in CLASSES:
        raise ValueError(f"unknown class label {class_label!r}; expected one of {CLASSES}")
    cfg = config
    arng = RngStream(mix_seed(patient_seed, _ANATOMY))
    brain_scale = 1.0 + arng.uniform(-0.03, 0.03, 3)
    transforms = [_draw_jitter(arng, cfg, 1.0)]
    irng = RngStream(mix_seed(patient_seed, _IMAGE_BASE + image_index))
    if image_index:
        transforms.append(_draw_jitter(irng, cfg, cfg.image_jitter_fraction))
    coords = _template_coords(cfg.shape, transforms)

    radii = np.array(cfg.brain_radii) * brain_scale
    rho = _ellipsoid_rho(coords, (0.0, 0.0, 0.0), radii)
    vol = np.full(cfg.shape, cfg.background, dtype=np.float32)
    vol[rho <= 1.0] = cfg.gray_intensity
    white = rho <= 1.0 - cfg.rim_fraction
    vol[white] = cfg.white_intensity
    ventricle = np.zeros(cfg.shape, dtype=bool)
    for c in _ventricle_centers(cfg):
        ventricle |= _ellipsoid_rho(coords, c, cfg.ventricle_radii) <= 1.0

    if class_label in LEUK_GRADES:
        layer = _leuk_layer(cfg, coords, LEUK_GRADES[class_label], patient_seed)
        vol = np.where(white & (layer > vol), layer, vol)
    if class_label == "ms":
        for les in ms_lesions(cfg, patient_seed):
            inside = white & (_ellipsoid_rho(coords, les.center, les.radii) <= 1.0)
            vol[inside] = np.maximum(vol[inside], les.intensity)
    vol[ventricle] = cfg.ventricle_intensity

    meta = _draw_metadata(cfg, patient_seed, image_index, class_label)
    if cfg.contrast_gain:
        te0 = cfg.scan_means["te_ms"]
        vol = vol * np.float32(1.0 + cfg.contrast_gain * (meta["te_ms"] - te0) / te0)
    vol = vol + irng.normal(cfg.shape, dtype=np.float32) * np.float32(cfg.noise_sigma)
    return np.clip(vol, 0.0, 1.0).astype(np.float32), meta


def lesion_load(volume: np.ndarray, threshold: float = 0.75) -> int:
    """Count of voxels above the lesion-intensity threshold."""
    return int(np.count_nonzero(volume > threshold))


# ---------------------------------------------------------------- manifests

@dataclass
class ImageRecord:
    image_id: str
    patient_id: str
    class_label: str
    split: str = "unassigned"
    metadata: dict[str, float] = field(default_factory=dict)
    patient_seed: int = 0
    image_index: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id, "patient_id": self.patient_id,
            "class_label": self.class_label, "split": self.split, "metadata": self.metadata,
            "patient_seed": self.patient_seed, "image_index": self.image_index,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ImageRecord":
        return cls(**json.loads(line))


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    seed: int = 0
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def patients(self) -> dict[str, list[ImageRecord]]:
        out: dict[str, list[ImageRecord]] = {}
        for r in self.records:
            out.setdefault(r.patient_id, []).append(r)
        return out

    def select(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def validate(self) -> None:
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image_id in manifest")
        for pid, recs in self.patients().items():
            if len({r.class_label for r in recs}) != 1 or len({r.split for r in recs}) != 1:
                raise ValueError(f"patient {pid} has mixed class labels or splits")

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, path: str | Path, extra_meta: dict | None = None) -> None:
        """Write the JSONL manifest plus a ``.meta.json`` sidecar (seed, config hash)."""
        from .io import atomic_write_bytes

        path = Path(path)
        atomic_write_bytes(path, self.to_jsonl().encode())
        meta = {"seed": self.seed, "config_hash": self.config_hash, **(extra_meta or {})}
        atomic_write_bytes(path.with_suffix(".meta.json"), (json.dumps(meta, sort_keys=True) + "\n").encode())

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        records = [ImageRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(records, int(meta.get("seed", 0)), meta.get("config_hash", ""))


def largest_remainder_counts(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Integer counts summing to ``n``; leftover units go to the largest fractional parts.

    Ties in the fractional part go to the class listed first in ``CLASSES``.
    """
    quotas = {c: n * proportions[c] for c in CLASSES}
    counts = {c: int(math.floor(q)) for c, q in quotas.items()}
    left = n - sum(counts.values())
    order = sorted(CLASSES, key=lambda c: (-(quotas[c] - counts[c]), CLASSES.index(c)))
    for c in order[:left]:
        counts[c] += 1
    return counts


def build_manifest(config: PhantomConfig, n_patients: int, master_seed: int) -> DatasetManifest:
    """Assign classes, seeds and image counts to ``n_patients`` patients.

    Patient ``i`` gets seed ``mix_seed(master_seed, i)``; class labels are
    dealt in a seeded random order so ids do not reveal the class.
    """
    if n_patients < len(CLASSES):
        raise ValueError(f"n_patients must be >= {len(CLASSES)}, got {n_patients}")
    counts = largest_remainder_counts(n_patients, config.class_proportions)
    labels = [c for c in CLASSES for _ in range(counts[c])]
    order = RngStream(mix_seed(master_seed, 0xC1A55)).permutation(n_patients)
    labels = [labels[i] for i in order]
    width = max(4, len(str(n_patients - 1)))
    records = []
    for i, label in enumerate(labels):
        pseed = mix_seed(master_seed, i)
        extra_mean = config.extra_images.get(label, 0.0)
        extra = int(RngStream(mix_seed(pseed, 0xA11)).poisson(extra_mean)) if extra_mean > 0 else 0
        n_img = min(1 + extra, config.max_images_per_patient)
        pid = f"P{i:0{width}d}"
        for k in range(n_img):
            meta = _draw_metadata(config, pseed, k, label)
            records.append(ImageRecord(f"{pid}_I{k}", pid, label, "unassigned", meta, pseed, k))
    return DatasetManifest(records, master_seed, config.digest())


def iter_volumes(config: PhantomConfig, manifest: DatasetManifest | Iterable[ImageRecord]
                 ) -> Iterator[tuple[ImageRecord, np.ndarray]]:
    for rec in manifest:
        vol, _ = generate_phantom(config, rec.patient_seed, rec.class_label, rec.image_index)
        yield rec, vol


def generate_dataset(config: PhantomConfig, n_patients: int, master_seed: int,
                     out_dir: str | Path | None = None, train_fraction: float | None = 0.9
                     ) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Build a manifest and render every volume.

    With ``out_dir`` the volumes are written as ``volumes/<image_id>.v3f`` plus
    ``manifest.jsonl`` and nothing is kept in memory; otherwise the volumes are
    returned keyed by image id. ``train_fraction`` applies a patient-level split.
    """
    from .io import write_volume

    manifest = build_manifest(config, n_patients, master_seed)
    if train_fraction is not None:
        manifest = split_by_patient(manifest, train_fraction, master_seed)
    volumes: dict[str, np.ndarray] = {}
    if out_dir is not None:
        vdir = Path(out_dir) / "volumes"
        vdir.mkdir(parents=True, exist_ok=True)
    for rec, vol in iter_volumes(config, manifest):
        if out_dir is None:
            volumes[rec.image_id] = vol
        else:
            write_volume(vdir / f"{rec.image_id}.v3f", vol)
    if out_dir is not None:
        manifest.write(Path(out_dir) / "manifest.jsonl")
    return manifest, volumes


def split_by_patient(manifest: DatasetManifest, train_fraction: float = 0.9, seed: int = 0
                     ) -> DatasetManifest:
    """Stratified patient-level train/test split.

    Within each class the patients are shuffled with a seeded stream and the
    first ``round(train_fraction * P)`` go to train (halves round up, and both
    splits keep at least one patient). A class with fewer than two patients
    goes wholly to train with a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    patients = manifest.patients()
    assignment: dict[str, str] = {}
    for ci, label in enumerate(CLASSES):
        pids = sorted(p for p, recs in patients.items() if recs[0].class_label == label)
        if not pids:
            continue
        if len(pids) < 2:
            warnings.warn(f"class {label!r} has {len(pids)} patient(s); assigning all to train")
            assignment.update({p: "train" for p in pids})
            continue
        order = RngStream(mix_seed(seed, 0x5917, ci)).permutation(len(pids))
        # nearest integer (halves up), keeping at least one patient on each side
        n_train = math.floor(train_fraction * len(pids) + 0.5 + 1e-9)
        n_train = min(max(n_train, 1), len(pids) - 1)
        for rank, idx in enumerate(order):
            assignment[pids[idx]] = "train" if rank < n_train else "test"
    records = [ImageRecord(r.image_id, r.patient_id, r.class_label, assignment[r.patient_id],
                           dict(r.metadata), r.patient_seed, r.image_index) for r in manifest.records]
    return DatasetManifest(records, manifest.seed, manifest.config_hash)
