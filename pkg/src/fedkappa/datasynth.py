"""Synthetic multi-site dataset generation.

Each site is described by a SiteProfile (split counts, 4-class prior,
intensity statistics, patients-per-image rate, seed) and rendered into a
SiteDataset of blob-texture images whose bright-tissue fraction increases
with the ordinal class. Site-to-site heterogeneity covers sample counts,
class priors, and intensity distributions; splits are assigned at the
patient level. Generation is a pure function of the profile: all randomness
comes from a Philox stream keyed by (seed, site_id).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, InvalidLabel, InvalidProfile, InvalidShape, \
    TooFewPatients, Truncated, VersionMismatch
from .imageops import bilinear_resize
from .seeding import make_rng

SPLIT_NAMES = ("train", "val", "test")

# Reference moments of the renderer output; per-site intensity statistics are
# realized as an affine map relative to these.
_REF_MEAN = 0.5
_REF_STD = 0.25


@dataclass(frozen=True)
class SiteProfile:
    site_id: str
    n_train: int
    n_val: int
    n_test: int
    class_prior: tuple
    intensity_mean: float
    intensity_std: float
    images_per_patient: float = 2.5
    resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (4,) or (prior < 0).any():
            raise InvalidProfile("class_prior must be 4 nonnegative weights")
        if abs(prior.sum() - 1.0) > 1e-9:
            raise InvalidProfile(f"class_prior sums to {prior.sum()}, not 1")
        if self.n_train < 1 or self.n_val < 0 or self.n_test < 0:
            raise InvalidProfile("split counts must be nonnegative, train >= 1")
        if not 0.0 < self.intensity_mean < 1.0:
            raise InvalidProfile("intensity_mean must lie in (0, 1)")
        if self.intensity_std <= 0:
            raise InvalidProfile("intensity_std must be positive")
        if self.images_per_patient < 1.0:
            raise InvalidProfile("images_per_patient must be >= 1")
        if self.resolution < 4:
            raise InvalidProfile("resolution must be >= 4")

    def counts(self) -> tuple:
        return (self.n_train, self.n_val, self.n_test)


@dataclass(frozen=True)
class DensityRenderer:
    """Blob-texture generator: class index sets the bright-tissue fraction."""

    bright_fractions: tuple = (0.10, 0.35, 0.60, 0.85)
    texture_cells: int = 6          # low-res noise grid per image side
    fraction_jitter: float = 0.07   # per-image sigma; adjacent classes overlap
    edge_gain: float = 4.0          # softness of the tissue boundary
    noise_sigma: float = 0.04
    dark_level: float = 0.25
    bright_level: float = 0.75

    def __post_init__(self):
        fracs = self.bright_fractions
        if len(fracs) != 4 or any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise InvalidProfile("bright fractions must be strictly increasing")

    def render(self, label: int, resolution: int,
               rng: np.random.Generator) -> np.ndarray:
        grid = rng.random((self.texture_cells + 1, self.texture_cells + 1))
        field = bilinear_resize(grid, resolution, resolution)
        frac = self.bright_fractions[label] + rng.normal(0.0, self.fraction_jitter)
        frac = float(np.clip(frac, 0.02, 0.98))
        tau = float(np.quantile(field, 1.0 - frac))
        ramp = np.clip((field - tau) * self.edge_gain + 0.5, 0.0, 1.0)
        img = self.dark_level + (self.bright_level - self.dark_level) * ramp
        img = img + rng.normal(0.0, self.noise_sigma, size=img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class SiteDataset:
    """One site's images, ordinal labels, patient ids, and split assignment."""

    images: np.ndarray        # [N, H, W] float32 in [0, 1]
    labels: np.ndarray        # [N] int64, classes 0..3
    patient_ids: np.ndarray   # [N] uint32
    split: np.ndarray         # [N] uint8: 0 train, 1 val, 2 test
    site_id: str = ""

    def __post_init__(self):
        n = self.images.shape[0]
        if not (self.labels.shape == (n,) and self.patient_ids.shape == (n,)
                and self.split.shape == (n,)):
            raise InvalidShape("images, labels, patient_ids, split must align")
        if n and (self.labels.min() < 0 or self.labels.max() > 3):
            raise InvalidLabel("labels must lie in {0, 1, 2, 3}")
        # a patient's images must all live in one split
        for pid in np.unique(self.patient_ids):
            if np.unique(self.split[self.patient_ids == pid]).size != 1:
                raise InvalidShape(f"patient {pid} spans multiple splits")

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_NAMES.index(split))

    def resolution(self) -> int:
        return self.images.shape[1]


def generate_site(profile: SiteProfile,
                  renderer: DensityRenderer = DensityRenderer()) -> SiteDataset:
    """Render one site. Split counts match the profile exactly; patients are
    generated within a split so the patient-level separation holds by
    construction; all of a patient's images share one label."""
    prior = np.asarray(profile.class_prior, dtype=np.float64)
    if prior.sum() <= 0 and sum(profile.counts()) > 0:
        raise InvalidProfile("positive counts with zero prior mass")

    rng = make_rng("site", profile.seed, profile.site_id)
    alpha = profile.intensity_std / _REF_STD
    beta = profile.intensity_mean - alpha * _REF_MEAN

    images, labels, patient_ids, splits = [], [], [], []
    next_patient = 0
    for split_idx, count in enumerate(profile.counts()):
        remaining = count
        while remaining > 0:
            n_img = 1 + int(rng.poisson(profile.images_per_patient - 1.0))
            n_img = min(n_img, remaining)
            label = int(rng.choice(4, p=prior))
            for _ in range(n_img):
                img = renderer.render(label, profile.resolution, rng)
                img = np.clip(alpha * img + beta, 0.0, 1.0).astype(np.float32)
                images.append(img)
                labels.append(label)
                patient_ids.append(next_patient)
                splits.append(split_idx)
            next_patient += 1
            remaining -= n_img
    return SiteDataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        patient_ids=np.array(patient_ids, dtype=np.uint32),
        split=np.array(splits, dtype=np.uint8),
        site_id=profile.site_id,
    )


# Seven-site reference characteristics, loosely mirroring a real multi-site
# screening federation: wide sample-count spread, distinct class priors with
# a b/c-heavy tendency, site 7 nearly missing class b, distinct intensity
# statistics per site.
_SITE_TRAIN = (22933, 8365, 44115, 7219, 6023, 6874, 4021)
_SITE_VAL = (3366, 1216, 6336, 1030, 983, 853, 664)
_SITE_TEST = (6534, 2568, 12676, 2069, 1822, 1727, 1288)
_SITE_PRIORS = (
    (0.08, 0.45, 0.38, 0.09),
    (0.12, 0.40, 0.38, 0.10),
    (0.10, 0.48, 0.35, 0.07),
    (0.15, 0.35, 0.40, 0.10),
    (0.06, 0.38, 0.44, 0.12),
    (0.10, 0.30, 0.45, 0.15),
    (0.30, 0.01, 0.39, 0.30),
)
_SITE_INTENSITY = ((0.30, 0.12), (0.38, 0.16), (0.45, 0.14), (0.52, 0.18),
                   (0.58, 0.13), (0.42, 0.20), (0.62, 0.15))
_SITE_IMAGES_PER_PATIENT = (2.8, 2.2, 3.2, 2.0, 2.4, 2.6, 3.0)


def default_seven_site_profiles(scale: int, resolution: int = 32,
                                seed: int = 0) -> list:
    """The seven-site suite with counts divided by `scale` (rounded, min 40)."""
    if scale < 1:
        raise InvalidProfile("scale must be >= 1")

    def scaled(x: int) -> int:
        return max(40, int(x / scale + 0.5))

    profiles = []
    for i in range(7):
        profiles.append(SiteProfile(
            site_id=f"site{i + 1}",
            n_train=scaled(_SITE_TRAIN[i]),
            n_val=scaled(_SITE_VAL[i]),
            n_test=scaled(_SITE_TEST[i]),
            class_prior=_SITE_PRIORS[i],
            intensity_mean=_SITE_INTENSITY[i][0],
            intensity_std=_SITE_INTENSITY[i][1],
            images_per_patient=_SITE_IMAGES_PER_PATIENT[i],
            resolution=resolution,
            seed=seed,
        ))
    return profiles


def split_by_patient(patient_ids, fractions, seed: int) -> np.ndarray:
    """Partition patients (not images) into splits targeting image fractions.

    Returns a per-image uint8 split array. Patients are shuffled, then filled
    greedily toward each split's target image count, so realized fractions
    track the targets within sampling error.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise InvalidShape(f"fractions sum to {fractions.sum()}, not 1")
    patient_ids = np.asarray(patient_ids)
    n_images = patient_ids.shape[0]
    unique = np.unique(patient_ids)
    if unique.size < fractions.size:
        raise TooFewPatients(
            f"{unique.size} patients cannot fill {fractions.size} splits")
    rng = make_rng("split", seed)
    order = rng.permutation(unique)
    images_per = {pid: int((patient_ids == pid).sum()) for pid in unique}

    targets = fractions * n_images
    split = np.empty(n_images, dtype=np.uint8)
    current, filled = 0, 0
    for pid in order:
        # advance to the next split once this one has met its target
        while current < fractions.size - 1 and filled >= targets[current]:
            current += 1
            filled = 0
        split[patient_ids == pid] = current
        filled += images_per[pid]
    return split


def preprocess(image: np.ndarray, resolution: int) -> np.ndarray:
    """Min-max normalize to [0, 1] (constant images map to 0), then resample."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise InvalidShape(f"expected a nonempty 2-D image, got {image.shape}")
    lo = image.min()
    span = image.max() - lo
    if span == 0:
        norm = np.zeros_like(image)
    else:
        norm = (image - lo) / span
    if norm.shape != (resolution, resolution):
        norm = bilinear_resize(norm, resolution, resolution)
    return norm.astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------
# magic "FKDS", u16 version, u32 image count, u16 resolution, then per image
# [u32 patient_id][u8 label][u8 split][resolution^2 little-endian float32].

DATASET_MAGIC = b"FKDS"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sHIH")
_DS_RECORD = struct.Struct("<IBB")


def save_dataset(path, dataset: SiteDataset) -> None:
    n = dataset.images.shape[0]
    res = dataset.images.shape[1]
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, res))
        for i in range(n):
            fh.write(_DS_RECORD.pack(int(dataset.patient_ids[i]),
                                     int(dataset.labels[i]),
                                     int(dataset.split[i])))
            fh.write(dataset.images[i].astype("<f4").tobytes())


def load_dataset(path, site_id: str = "") -> SiteDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DS_HEADER.size:
        raise Truncated("dataset header incomplete")
    magic, version, n, res = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise BadMagic(f"expected {DATASET_MAGIC!r}, got {magic!r}")
    if version != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {version} unsupported")
    record_size = _DS_RECORD.size + 4 * res * res
    need = _DS_HEADER.size + n * record_size
    if len(raw) < need:
        raise Truncated(f"dataset needs {need} bytes, got {len(raw)}")
    images = np.empty((n, res, res), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    patient_ids = np.empty(n, dtype=np.uint32)
    split = np.empty(n, dtype=np.uint8)
    offset = _DS_HEADER.size
    for i in range(n):
        pid, label, spl = _DS_RECORD.unpack_from(raw, offset)
        if label > 3:
            raise InvalidLabel(f"label byte {label} outside {{0..3}} at record {i}")
        if spl > 2:
            raise InvalidLabel(f"split byte {spl} outside {{0..2}} at record {i}")
        offset += _DS_RECORD.size
        images[i] = np.frombuffer(raw, dtype="<f4", count=res * res,
                                  offset=offset).reshape(res, res)
        offset += 4 * res * res
        labels[i], patient_ids[i], split[i] = label, pid, spl
    if site_id == "":
        site_id = os.path.splitext(os.path.basename(path))[0]
    return SiteDataset(images, labels, patient_ids, split, site_id=site_id)
