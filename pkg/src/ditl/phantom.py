"""Seeded synthetic chest-CT phantoms with lung/lesion masks and clinical records.

Each sample carries a volume in Hounsfield-like units, a lung mask ``m1``, a
lesion mask ``m2`` nested inside it, a raw clinical record and a binary label.
The label is a thresholded latent score

    alpha_img * u_img + alpha_clin * u_clin + noise * eps

where ``u_img`` sets the lesion-to-lung intensity contrast and ``u_clin``
drives the informative clinical variables, so the two modalities carry
complementary evidence. The threshold is the Gaussian quantile that gives the
requested positive rate in expectation.

Preprocessing follows the usual lung-CT order: nearest-neighbour resampling,
lung windowing to [0, 1], then a dataset-wide bounding-box crop.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from . import tensorcore as tc

WINDOW_CENTER = -300.0
WINDOW_WIDTH = 1200.0
MAX_SHIFT = 3

# lesion HU = lung HU + LESION_CONTRAST + CONTRAST_GAIN * u_img
LESION_CONTRAST = 780.0
CONTRAST_GAIN = 150.0
LUNG_HU = -780.0
LUNG_HU_SPREAD = 100.0
TISSUE_HU = -360.0
VOXEL_NOISE_HU = 20.0


class PhantomError(ValueError):
    pass


# ---------------------------------------------------------------------------
# clinical schema


@dataclass(frozen=True)
class Field:
    name: str
    kind: str  # categorical | ordinal | numeric
    levels: tuple = ()


SCHEMA = (
    Field("histology", "categorical", ("adeno", "squamous", "large_cell")),
    Field("smoking", "categorical", ("never", "former", "current")),
    Field("chemo_scheme", "categorical", ("cis_pem", "carbo_pac", "cis_vin", "other")),
    Field("stage", "ordinal", ("IIA", "IIB", "IIIA", "IIIB")),
    Field("pain_nrs", "ordinal", ("none", "mild", "moderate", "severe")),
    Field("age", "numeric"),
    Field("pack_years", "numeric"),
    Field("rt_dose", "numeric"),
    Field("weight", "numeric"),
)


def encoded_names(schema=SCHEMA):
    names = []
    for f in schema:
        if f.kind == "categorical":
            names += [f"{f.name}={lv}" for lv in f.levels]
        else:
            names.append(f.name)
    return names


def feature_groups(schema=SCHEMA):
    """Encoded column indices belonging to each raw clinical variable."""
    groups, col = [], 0
    for f in schema:
        width = len(f.levels) if f.kind == "categorical" else 1
        groups.append(list(range(col, col + width)))
        col += width
    return groups


# ---------------------------------------------------------------------------
# data containers


@dataclass
class DatasetSpec:
    n_samples: int = 200
    extents: tuple = (32, 32, 16)
    positive_rate: float = 0.36
    alpha_img: float = 1.5
    alpha_clin: float = 1.2
    noise: float = 0.6
    seed: int = 42
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not 0.0 < self.positive_rate < 1.0:
            raise PhantomError("positive rate must lie strictly between 0 and 1")
        if min(self.alpha_img, self.alpha_clin, self.noise) < 0:
            raise PhantomError("signal strengths and noise must be nonnegative")
        if self.alpha_img == self.alpha_clin == self.noise == 0:
            raise PhantomError("label score has zero variance")
        if len(self.extents) != 3 or min(self.extents) < 8:
            raise PhantomError(f"extents must be three values >= 8, got {self.extents}")
        if min(self.spacing) <= 0:
            raise PhantomError("voxel spacing must be positive")
        if self.n_samples < 1:
            raise PhantomError("need at least one sample")

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Sample:
    volume: np.ndarray  # H x W x D
    m1: np.ndarray  # lung, {0, 1}
    m2: np.ndarray  # lesion, {0, 1}, inside m1
    clinical: dict
    label: int
    spacing: tuple = (1.0, 1.0, 1.0)
    latent: dict = field(default_factory=dict)
    sid: int = 0


# ---------------------------------------------------------------------------
# generation


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _latents(spec):
    rng = np.random.default_rng([spec.seed, 0])
    u_img = rng.standard_normal(spec.n_samples)
    u_clin = rng.standard_normal(spec.n_samples)
    eps = rng.standard_normal(spec.n_samples)
    score = spec.alpha_img * u_img + spec.alpha_clin * u_clin + spec.noise * eps
    scale = np.sqrt(spec.alpha_img ** 2 + spec.alpha_clin ** 2 + spec.noise ** 2)
    threshold = norm.ppf(1.0 - spec.positive_rate) * scale
    return u_img, u_clin, (score > threshold).astype(int)


def _clinical(rng, u):
    """Raw clinical record; histology, stage, pack_years and rt_dose track ``u``."""
    z = rng.standard_normal(8)
    logits = np.array([0.9 * u, -0.9 * u, 0.0])
    p = np.exp(logits - logits.max())
    histology = rng.choice(SCHEMA[0].levels, p=p / p.sum())
    smoking = rng.choice(SCHEMA[1].levels, p=[0.2, 0.45, 0.35])
    chemo = rng.choice(SCHEMA[2].levels, p=[0.4, 0.3, 0.2, 0.1])
    stage_score = -0.75 * u + 0.66 * z[0]
    stage = SCHEMA[3].levels[int(np.digitize(stage_score, [-0.8, 0.0, 0.8]))]
    pain = SCHEMA[4].levels[int(np.digitize(z[1], [-0.5, 0.5, 1.3]))]
    return {
        "histology": str(histology),
        "smoking": str(smoking),
        "chemo_scheme": str(chemo),
        "stage": stage,
        "pain_nrs": pain,
        "age": round(float(64.0 + 8.0 * z[2]), 1),
        "pack_years": round(float(max(0.0, 32.0 + 12.0 * (0.8 * u + 0.6 * z[3]))), 1),
        "rt_dose": round(float(60.0 + 3.0 * (0.7 * u + 0.71 * z[4])), 2),
        "weight": round(float(74.0 + 11.0 * z[5]), 1),
    }


def _volume(rng, extents, u_img):
    h, w, d = extents
    vol = np.full(extents, TISSUE_HU)
    lung_hu = LUNG_HU + LUNG_HU_SPREAD * rng.standard_normal()
    m1 = np.zeros(extents, dtype=bool)
    lungs = []
    for side in (-1, 1):
        center = (h / 2 - 0.5 + rng.uniform(-1, 1),
                  w / 2 - 0.5 + side * w * rng.uniform(0.19, 0.21),
                  d / 2 - 0.5 + rng.uniform(-0.5, 0.5))
        radii = (h * rng.uniform(0.27, 0.3), w * rng.uniform(0.15, 0.17), d * rng.uniform(0.28, 0.31))
        lungs.append((center, radii))
        m1 |= _ellipsoid(extents, center, radii)
    vol[m1] = lung_hu
    # lesion: a small ball kept well inside one lung
    center, radii = lungs[int(rng.integers(2))]
    r = rng.uniform(2.2, 2.8)
    inner = np.array(radii) - r - 0.5
    if np.any(inner <= 0):
        raise PhantomError(f"extents {extents} too small to fit a lesion inside the lung")
    for _ in range(100):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        offset = direction * inner * rng.uniform(0, 0.8)
        c2 = np.array(center) + offset
        m2 = _ellipsoid(extents, c2, (r, r, r))
        if m2.any() and not np.any(m2 & ~m1):
            break
    else:
        raise PhantomError("could not place the lesion inside the lung")
    vol[m2] = lung_hu + LESION_CONTRAST + CONTRAST_GAIN * u_img
    vol += VOXEL_NOISE_HU * rng.standard_normal(extents)
    return vol, m1.astype(np.uint8), m2.astype(np.uint8), lung_hu


def generate(spec):
    """Deterministic list of samples for ``spec``; sample i uses seed (seed, 1, i)."""
    if not isinstance(spec, DatasetSpec):
        raise PhantomError("generate expects a DatasetSpec")
    u_img, u_clin, labels = _latents(spec)
    samples = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, 1, i])
        vol, m1, m2, lung_hu = _volume(rng, spec.extents, u_img[i])
        clinical = _clinical(rng, u_clin[i])
        samples.append(Sample(vol, m1, m2, clinical, int(labels[i]), spec.spacing,
                              {"u_img": float(u_img[i]), "u_clin": float(u_clin[i]),
                               "lung_hu": float(lung_hu)}, sid=i))
    return samples


# ---------------------------------------------------------------------------
# preprocessing


def window_and_normalize(volume, center=WINDOW_CENTER, width=WINDOW_WIDTH):
    """Clip to [center - width/2, center + width/2] and map linearly onto [0, 1]."""
    if width <= 0:
        raise PhantomError("window width must be positive")
    lo = center - width / 2.0
    return (np.clip(np.asarray(volume, dtype=np.float64), lo, lo + width) - lo) / width


def _nn_index(n_in, src, dst):
    n_out = int(round(n_in * src / dst))
    if n_out < 1:
        raise PhantomError(f"resampling {n_in} voxels from {src} mm to {dst} mm leaves nothing")
    centres = (np.arange(n_out) + 0.5) * dst / src - 0.5
    return np.clip(np.floor(centres + 0.5).astype(int), 0, n_in - 1)


def resample_nn(volume, spacing, target_spacing, *masks):
    """Nearest-neighbour regridding; masks share the volume's index map.

    Returns the resampled volume followed by the resampled masks.
    """
    volume = np.asarray(volume)
    if target_spacing is None:
        return (volume,) + tuple(np.asarray(m) for m in masks)
    if min(target_spacing) <= 0:
        raise PhantomError("target spacing must be positive")
    idx = [_nn_index(n, s, t) for n, s, t in zip(volume.shape, spacing, target_spacing)]
    grid = np.ix_(*idx)
    return (volume[grid],) + tuple(np.asarray(m)[grid] for m in masks)


def bounding_box(masks, pad, shape):
    """Smallest box holding every mask's foreground, grown by ``pad`` and clamped."""
    lo = np.array(shape)
    hi = np.zeros(3, dtype=int)
    found = False
    for m in masks:
        nz = np.argwhere(np.asarray(m) > 0)
        if nz.size == 0:
            raise PhantomError("empty lung mask; cannot place a bounding box")
        found = True
        lo = np.minimum(lo, nz.min(axis=0))
        hi = np.maximum(hi, nz.max(axis=0))
    if not found:
        raise PhantomError("no masks given")
    lo = np.maximum(lo - pad, 0)
    hi = np.minimum(hi + pad + 1, shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def crop_bbox(volume, m1, m2, pad=2, box=None):
    """Crop volume and both masks to ``box`` (default: the box around ``m1``)."""
    if box is None:
        box = bounding_box([m1], pad, np.shape(volume))
    return np.asarray(volume)[box], np.asarray(m1)[box], np.asarray(m2)[box]


def shift_flip(arr, shift, flip):
    """Integer shift with zero fill on the last three axes, then optional flip of the first spatial axis."""
    out = np.zeros_like(arr)
    src, dst = [], []
    for s, n in zip(shift, arr.shape[-3:]):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[(Ellipsis,) + tuple(dst)] = arr[(Ellipsis,) + tuple(src)]
    if flip:
        out = np.flip(out, axis=arr.ndim - 3).copy()
    return out


def draw_augmentation(rng, max_shift=MAX_SHIFT, p_flip=0.5):
    shift = rng.integers(-max_shift, max_shift + 1, size=3)
    return tuple(int(s) for s in shift), bool(rng.random() < p_flip)


def augment(sample, rng, max_shift=MAX_SHIFT, p_flip=0.5):
    """Random shift in [-3, 3] per axis and a vertical flip, applied to volume and masks alike."""
    shift, flip = draw_augmentation(rng, max_shift, p_flip)
    return replace(sample,
                   volume=shift_flip(sample.volume, shift, flip),
                   m1=shift_flip(sample.m1, shift, flip),
                   m2=shift_flip(sample.m2, shift, flip))


@dataclass
class Prepared:
    """Model-ready arrays: images ``n x 1 x H x W x D`` in [0, 1] and masks ``n x H x W x D``."""

    images: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    labels: np.ndarray
    records: list
    box: tuple
    sids: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def extents(self):
        return self.images.shape[2:]


def preprocess(samples, target_spacing=(1.0, 1.0, 1.0), pad=2):
    """Resample, window, and crop every sample to one dataset-wide lung box."""
    vols, m1s, m2s = [], [], []
    for s in samples:
        v, a, b = resample_nn(s.volume, s.spacing, target_spacing, s.m1, s.m2)
        vols.append(window_and_normalize(v))
        m1s.append(a)
        m2s.append(b)
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise PhantomError(f"resampled volumes differ in extent: {sorted(shapes)}")
    box = bounding_box(m1s, pad, vols[0].shape)
    images = np.stack([v[box] for v in vols])[:, None]
    return Prepared(
        images=np.ascontiguousarray(images),
        m1=np.stack([m[box] for m in m1s]).astype(np.float64),
        m2=np.stack([m[box] for m in m2s]).astype(np.float64),
        labels=np.array([s.label for s in samples], dtype=int),
        records=[dict(s.clinical) for s in samples],
        box=tuple((sl.start, sl.stop) for sl in box),
        sids=np.array([s.sid for s in samples], dtype=int),
    )


# ---------------------------------------------------------------------------
# clinical encoding


@dataclass
class ClinicalStats:
    mean: dict
    std: dict


@dataclass
class EncodeReport:
    unseen: dict = field(default_factory=dict)

    @property
    def total_unseen(self):
        return sum(self.unseen.values())


def fit_clinical(records, schema=SCHEMA):
    """Numeric means and standard deviations from the training records only."""
    mean, std = {}, {}
    for f in schema:
        if f.kind != "numeric":
            continue
        vals = np.array([float(r[f.name]) for r in records])
        mean[f.name] = float(vals.mean())
        std[f.name] = float(vals.std())
    return ClinicalStats(mean, std)


def encode_clinical(records, stats, schema=SCHEMA, report=None):
    """One-hot categoricals, rank-coded ordinals, z-scored numerics.

    Unseen categorical levels encode as all zeros and are counted in ``report``.
    """
    rows = []
    for r in records:
        row = []
        for f in schema:
            v = r[f.name]
            if f.kind == "categorical":
                hot = [1.0 if v == lv else 0.0 for lv in f.levels]
                if not any(hot) and report is not None:
                    report.unseen[f.name] = report.unseen.get(f.name, 0) + 1
                row += hot
            elif f.kind == "ordinal":
                if v not in f.levels:
                    raise PhantomError(f"{f.name}: unknown ordinal level {v!r}")
                row.append(float(f.levels.index(v)))
            else:
                sd = stats.std[f.name]
                row.append(0.0 if sd == 0 else (float(v) - stats.mean[f.name]) / sd)
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(records), -1)


# ---------------------------------------------------------------------------
# dataset directory


def save_dataset(samples, spec, directory, splits=None):
    """Write tensors per sample, ``clinical.csv`` and ``manifest.json``."""
    os.makedirs(os.path.join(directory, "volumes"), exist_ok=True)
    for s in samples:
        stem = os.path.join(directory, "volumes", f"{s.sid:04d}")
        tc.save(stem + "_volume.tensor", s.volume)
        tc.save(stem + "_m1.tensor", s.m1)
        tc.save(stem + "_m2.tensor", s.m2)
    cols = ["sid"] + [f.name for f in SCHEMA] + ["label"]
    with open(os.path.join(directory, "clinical.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in samples:
            w.writerow([s.sid] + [s.clinical[f.name] for f in SCHEMA] + [s.label])
    manifest = {
        "spec": spec.to_dict(),
        "schema": [{"name": f.name, "kind": f.kind, "levels": list(f.levels)} for f in SCHEMA],
        "layout": "row-major float64, axes H x W x D",
        "latent": {str(s.sid): s.latent for s in samples},
        "splits": splits,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec = DatasetSpec.from_dict(manifest["spec"])
    names = [f["name"] for f in manifest["schema"]]
    if names != [f.name for f in SCHEMA]:
        raise PhantomError("dataset schema does not match this version's clinical schema")
    numeric = {f.name for f in SCHEMA if f.kind == "numeric"}
    samples = []
    with open(os.path.join(directory, "clinical.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["sid"])
            stem = os.path.join(directory, "volumes", f"{sid:04d}")
            clinical = {n: (float(row[n]) if n in numeric else row[n]) for n in names}
            samples.append(Sample(
                tc.load(stem + "_volume.tensor"),
                tc.load(stem + "_m1.tensor").astype(np.uint8),
                tc.load(stem + "_m2.tensor").astype(np.uint8),
                clinical, int(row["label"]), spec.spacing,
                manifest["latent"].get(str(sid), {}), sid))
    return spec, samples, manifest.get("splits")
