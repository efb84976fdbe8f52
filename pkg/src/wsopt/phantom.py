"""Seeded synthetic chest-like slices and dataset assembly.

Each slice is a body ellipse over an air background with two noisy lung
ellipses; small bright "vessel" disks texture the lungs, and rib
cross-sections plus a spine disk put noisy high-attenuation tissue at the
top of the HU range the way real axial chest slices do. A truncated
partial-volume blur mixes tissue boundaries so the HU histogram is
continuous instead of a few spikes. Diseased slices additionally get
Gaussian-profile low-attenuation blobs inside the lung tissue, planting a
discriminative signal in the [-1024, -900] HU band.

Reproducibility contract: all randomness flows through numpy PCG64
generators. The stream for subject k is

    PCG64(SeedSequence(entropy=cfg.seed, spawn_key=(1, k)))

and dataset-level draws (splits, balancing) use spawn keys (0,) and (2,),
so identical (config, seed) yields bit-identical datasets and any subject
can be regenerated in isolation.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .husl import read_husl, write_husl
from .windowing import HU_MAX, HU_MIN

LABEL_COPD = "copd"
LABEL_NO_COPD = "no_copd"
SPLITS = ("train", "validation", "test", "ood_test")

MANIFEST_HEADER = ["path", "subject", "label", "split"]

# Spawn keys for the per-purpose generator streams derived from cfg.seed.
_STREAM_SPLIT = (0,)
_STREAM_SUBJECT = 1  # (1, subject_index)
_STREAM_BALANCE = (2,)

# Anatomy layout in fractions of image_size; jittered per slice. The body
# wall stays several pixels thick in the worst jitter case so partial-volume
# mixing never opens a sub -500 HU corridor from the lungs to the outer air.
_BODY_CENTER = (0.50, 0.52)
_BODY_SEMI = (0.46, 0.42)
_LUNG_CENTERS = ((0.34, 0.47), (0.66, 0.47))
_LUNG_SEMI = (0.13, 0.24)
_CENTER_JITTER = 0.02
_AXIS_JITTER = 0.08

# Vessel texture inside the lungs (bright soft-tissue disks, absolute pixels).
_VESSEL_COUNT = (4, 10)
_VESSEL_RADIUS = (1.0, 2.2)

# Skeletal structures: rib cross-sections ring the body periphery and a
# spine disk sits behind the lungs. Their HU draws are wide enough to reach
# the +1024 recording limit, so the top of the intensity range is populated
# (and clamped) the way bone is in real axial slices.
_RIB_COUNT = (8, 12)
_RIB_RADIUS = (1.5, 3.0)
_RIB_RING = 0.88  # ribs sit at this fraction of the body semi-axes
_SPINE_CENTER = (0.50, 0.80)
_SPINE_RADIUS = 0.07
_BONE_HU = (850.0, 180.0)

# Partial-volume mixing: separable truncated Gaussian, radius 2 pixels, so
# tissue interfaces span the HU gaps between air, lung, soft tissue and
# bone. Pixels 3+ px inside a structure keep their exact value.
_PV_SIGMA = 0.8
_PV_RADIUS = 2


class PhantomConfigError(ValueError):
    """Invalid phantom configuration."""


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    subjects_per_class: int = 8
    slices_per_subject: int = 40
    body_hu_mean: float = 40.0
    body_hu_sigma: float = 15.0
    lung_hu_mean: float = -820.0
    lung_hu_sigma: float = 40.0
    air_hu: float = -1000.0
    blob_count_min: int = 3
    blob_count_max: int = 8
    blob_radius_min: float = 2.0
    blob_radius_max: float = 6.0
    blob_hu_mean: float = -980.0
    blob_hu_sigma: float = 15.0
    # HU shift applied to body/vessel tissue when rendering the ood_test
    # split only; the lung parenchyma and the planted band are untouched.
    ood_offset: float = 60.0
    seed: int = 1234

    def validate(self) -> None:
        if self.image_size < 16:
            raise PhantomConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.image_size > 256:
            raise PhantomConfigError(f"image_size must be <= 256, got {self.image_size}")
        if self.slices_per_subject < 1:
            raise PhantomConfigError("slices_per_subject must be >= 1")
        if self.blob_count_min < 1:
            raise PhantomConfigError(
                f"blob_count_min must be >= 1 (diseased slices need a planted signal), "
                f"got {self.blob_count_min}"
            )
        if self.blob_count_max < self.blob_count_min:
            raise PhantomConfigError("blob_count_max must be >= blob_count_min")
        if not 0 < self.blob_radius_min <= self.blob_radius_max:
            raise PhantomConfigError("blob radius range must satisfy 0 < min <= max")
        # separability of the planted band from parenchyma
        blob_hi = self.blob_hu_mean + 2.0 * self.blob_hu_sigma
        lung_lo = self.lung_hu_mean - 2.0 * self.lung_hu_sigma
        if not blob_hi < lung_lo:
            raise PhantomConfigError(
                f"blob HU ({self.blob_hu_mean}±{self.blob_hu_sigma}) must sit 2 sigma "
                f"below lung HU ({self.lung_hu_mean}±{self.lung_hu_sigma})"
            )
        if not -1024.0 <= self.blob_hu_mean <= -900.0:
            raise PhantomConfigError(
                f"blob_hu_mean must lie in [-1024, -900], got {self.blob_hu_mean}"
            )


@dataclass
class SubjectRecord:
    subject_id: str
    label: str
    slices: list
    lung_masks: list


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: str = "."

    def for_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def splits(self) -> list:
        return sorted({e.split for e in self.entries})

    def abspath(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def subject_isolation_ok(self) -> bool:
        seen = {}
        for e in self.entries:
            if seen.setdefault(e.subject, e.split) != e.split:
                return False
        return True

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in self.entries:
            writer.writerow([e.path, e.subject, e.label, e.split])
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def read_csv(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected manifest header {MANIFEST_HEADER}")
        entries = [ManifestEntry(*row) for row in rows[1:]]
        return cls(entries=entries, root=os.path.dirname(os.path.abspath(path)))


def _ellipse_mask(size, cx, cy, ax, ay):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _pv_kernel():
    d = np.arange(-_PV_RADIUS, _PV_RADIUS + 1, dtype=float)
    k = np.exp(-(d**2) / (2.0 * _PV_SIGMA**2))
    return k / k.sum()


def _partial_volume(img: np.ndarray) -> np.ndarray:
    k = _pv_kernel()
    out = ndimage.convolve1d(img, k, axis=0, mode="nearest")
    return ndimage.convolve1d(out, k, axis=1, mode="nearest")


def generate_slice(
    cfg: PhantomConfig,
    rng: np.random.Generator,
    diseased: bool,
    hu_offset: float = 0.0,
):
    """Render one slice; returns (HU image float64, analytic lung mask).

    The lung mask marks lung parenchyma only: vessel disks are excluded, so
    statistics over the mask see the planted band and nothing else. All
    draws happen in a fixed order, making output a pure function of
    (cfg, rng state, diseased, hu_offset).
    """
    cfg.validate()
    size = cfg.image_size

    # per-slice anatomy jitter: 6 center offsets + 1 axis scale
    jit = rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, size=6) * size
    axis_scale = rng.uniform(1.0 - _AXIS_JITTER, 1.0 + _AXIS_JITTER)
    body_noise = rng.normal(0.0, 1.0, size=(size, size))
    lung_noise = rng.normal(0.0, 1.0, size=(size, size))

    body_cx = _BODY_CENTER[0] * size + jit[0]
    body_cy = _BODY_CENTER[1] * size + jit[1]
    body_ax = _BODY_SEMI[0] * size * axis_scale
    body_ay = _BODY_SEMI[1] * size * axis_scale
    body = _ellipse_mask(size, body_cx, body_cy, body_ax, body_ay)
    lungs = np.zeros((size, size), dtype=bool)
    for i, (lcx, lcy) in enumerate(_LUNG_CENTERS):
        lungs |= _ellipse_mask(
            size,
            lcx * size + jit[2 + 2 * i],
            lcy * size + jit[3 + 2 * i],
            _LUNG_SEMI[0] * size * axis_scale,
            _LUNG_SEMI[1] * size * axis_scale,
        )
    lungs &= body

    base = np.full((size, size), float(cfg.air_hu))
    base[body] = cfg.body_hu_mean + hu_offset
    base[lungs] = cfg.lung_hu_mean

    yy, xx = np.mgrid[0:size, 0:size]
    lung_idx = np.flatnonzero(lungs)

    vessel = np.zeros((size, size), dtype=bool)
    n_vessels = int(rng.integers(_VESSEL_COUNT[0], _VESSEL_COUNT[1] + 1))
    for _ in range(n_vessels):
        center = int(lung_idx[rng.integers(len(lung_idx))])
        radius = rng.uniform(*_VESSEL_RADIUS)
        cy, cx = divmod(center, size)
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        vessel |= disk & lungs
    base[vessel] = cfg.body_hu_mean + hu_offset

    # analytic truth: where lung tissue was rasterized (vessels carved out).
    # Boundary pixels are partial-volume mixtures; tests that need value-pure
    # parenchyma erode this mask themselves.
    lung_mask = lungs & ~vessel
    if not lung_mask.any():
        raise PhantomConfigError(f"image_size {size} leaves no lung parenchyma")

    # skeleton: rib ring around the body periphery plus a spine disk; bone
    # HU draws are clamped at the recording limit later, so the top of the
    # intensity range carries noisy, saturating tissue like real slices
    soft = body & ~lungs
    n_ribs = int(rng.integers(_RIB_COUNT[0], _RIB_COUNT[1] + 1))
    for k in range(n_ribs):
        theta = 2.0 * np.pi * k / n_ribs + rng.uniform(-0.2, 0.2)
        radius = rng.uniform(*_RIB_RADIUS)
        bone_hu = rng.normal(*_BONE_HU)
        cx = body_cx + _RIB_RING * body_ax * np.cos(theta)
        cy = body_cy + _RIB_RING * body_ay * np.sin(theta)
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        base[disk & soft] = bone_hu
    spine_hu = rng.normal(*_BONE_HU)
    spine = _ellipse_mask(
        size, _SPINE_CENTER[0] * size + jit[0], _SPINE_CENTER[1] * size + jit[1],
        _SPINE_RADIUS * size, _SPINE_RADIUS * size,
    )
    base[spine & soft] = spine_hu

    if diseased:
        mask_idx = np.flatnonzero(lung_mask)
        n_blobs = int(rng.integers(cfg.blob_count_min, cfg.blob_count_max + 1))
        for _ in range(n_blobs):
            center = int(mask_idx[rng.integers(len(mask_idx))])
            radius = rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max)
            blob_hu = rng.normal(cfg.blob_hu_mean, cfg.blob_hu_sigma)
            cy, cx = divmod(center, size)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            # truncated Gaussian bump, sigma = radius / 2
            weight = np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
            weight[d2 > radius**2] = 0.0
            base[lung_mask] += weight[lung_mask] * (blob_hu - base[lung_mask])

    img = _partial_volume(base)
    soft_and_bone = (body & ~lungs) | vessel
    img[soft_and_bone] += cfg.body_hu_sigma * body_noise[soft_and_bone]
    img[lung_mask] += cfg.lung_hu_sigma * lung_noise[lung_mask]

    np.clip(img, HU_MIN, HU_MAX, out=img)
    return img, lung_mask


def generate_subject(
    cfg: PhantomConfig, subject_id: str, subject_index: int, diseased: bool,
    hu_offset: float = 0.0,
) -> SubjectRecord:
    """Generate all slices of one subject from its own derived stream."""
    rng = np.random.Generator(
        np.random.PCG64(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_STREAM_SUBJECT, subject_index))
        )
    )
    slices, masks = [], []
    for _ in range(cfg.slices_per_subject):
        img, mask = generate_slice(cfg, rng, diseased, hu_offset)
        slices.append(img)
        masks.append(mask)
    label = LABEL_COPD if diseased else LABEL_NO_COPD
    return SubjectRecord(subject_id=subject_id, label=label, slices=slices, lung_masks=masks)


def balance_classes(entries: list, rng: np.random.Generator) -> list:
    """Down-sample the larger class to the smaller one, order-stable.

    Removal is random via `rng`; retained entries keep their input order.
    """
    by_label = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e)
    if len(by_label) < 2:
        raise ValueError(f"balancing needs both classes, got {sorted(by_label)}")
    if any(len(v) == 0 for v in by_label.values()):
        raise ValueError("balancing with an empty class")
    n_keep = min(len(v) for v in by_label.values())
    drop = set()
    for label in sorted(by_label):
        group = by_label[label]
        n_drop = len(group) - n_keep
        if n_drop > 0:
            drop_idx = rng.choice(len(group), size=n_drop, replace=False)
            drop.update(id(group[i]) for i in drop_idx)
    return [e for e in entries if id(e) not in drop]


def _split_subjects(ids: list, rng: np.random.Generator):
    """Shuffle one class's subject ids and cut 50/17/33 train/val/test."""
    ids = list(ids)
    rng.shuffle(ids)
    n = len(ids)
    n_train = round(0.50 * n)
    n_val = max(1, round(0.17 * n))
    return ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :]


def generate_dataset(cfg: PhantomConfig, out_dir) -> DatasetManifest:
    """Generate slices + manifest under out_dir; returns the manifest.

    Subjects are split 50/17/33% into train/validation/test per class, then
    each split is class-balanced. An extra ood_test split of fresh subjects
    (as many per class as the test split) is rendered with cfg.ood_offset
    added to body/vessel tissue. Layout:

        out_dir/manifest.csv
        out_dir/slices/<subject>_s<k>.husl
        out_dir/masks/<subject>_s<k>.husl     (analytic lung masks, 0/1)
    """
    cfg.validate()
    if cfg.subjects_per_class < 4:
        raise PhantomConfigError(
            f"subjects_per_class must be >= 4 to populate every split, "
            f"got {cfg.subjects_per_class}"
        )

    split_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=_STREAM_SPLIT))
    )
    balance_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=_STREAM_BALANCE))
    )

    # global subject enumeration fixes every subject's generator stream
    subjects = []  # (subject_id, index, diseased, hu_offset, split or None)
    index = 0
    split_of = {}
    for diseased, prefix in ((True, LABEL_COPD), (False, LABEL_NO_COPD)):
        ids = [f"{prefix}_{i:03d}" for i in range(cfg.subjects_per_class)]
        for sid in ids:
            subjects.append((sid, index, diseased, 0.0))
            index += 1
        train, val, test = _split_subjects(ids, split_rng)
        split_of.update({sid: "train" for sid in train})
        split_of.update({sid: "validation" for sid in val})
        split_of.update({sid: "test" for sid in test})
        n_ood = len(test)
        for i in range(n_ood):
            sid = f"ood_{prefix}_{i:03d}"
            subjects.append((sid, index, diseased, float(cfg.ood_offset)))
            split_of[sid] = "ood_test"
            index += 1

    slice_dir = os.path.join(out_dir, "slices")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(slice_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    entries = []
    for sid, idx, diseased, offset in subjects:
        record = generate_subject(cfg, sid, idx, diseased, offset)
        for k, (img, mask) in enumerate(zip(record.slices, record.lung_masks)):
            rel = f"slices/{sid}_s{k:03d}.husl"
            write_husl(os.path.join(out_dir, rel), img)
            write_husl(os.path.join(mask_dir, f"{sid}_s{k:03d}.husl"), mask.astype(np.int16))
            entries.append(ManifestEntry(rel, sid, record.label, split_of[sid]))

    balanced = []
    for split in SPLITS:
        split_entries = [e for e in entries if e.split == split]
        balanced.extend(balance_classes(split_entries, balance_rng))

    order = {s: i for i, s in enumerate(SPLITS)}
    balanced.sort(key=lambda e: (order[e.split], e.subject, e.path))
    manifest = DatasetManifest(entries=balanced, root=os.path.abspath(out_dir))
    manifest.write_csv(os.path.join(out_dir, "manifest.csv"))
    return manifest


def segment_lung(img: np.ndarray) -> np.ndarray:
    """Threshold-based lung mask: HU < -500, drop border-touching components.

    Plumbing-grade segmentation; phantom datasets also carry exact analytic
    masks, and tests compare the two.
    """
    low = np.asarray(img) < -500.0
    labels, n = ndimage.label(low, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(low)
    border = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    keep = np.setdiff1d(np.arange(1, n + 1), border)
    return np.isin(labels, keep)


def load_mask_for(manifest: DatasetManifest, entry: ManifestEntry) -> np.ndarray:
    """Read the analytic lung mask stored alongside a slice."""
    name = os.path.basename(entry.path)
    return read_husl(os.path.join(manifest.root, "masks", name)).astype(bool)


def with_seed(cfg: PhantomConfig, seed: int) -> PhantomConfig:
    return replace(cfg, seed=seed)
