"""Patients, slices, pre-processing and a synthetic multi-institution phantom generator.

On-disk layout of one dataset::

    <root>/dataset.json
    <root>/<patient id>/slice_000_img.png    16-bit grayscale intensities
    <root>/<patient id>/slice_000_mask.png   8-bit labels: 0 background,
                                             1 whole gland only (PZ), 2 CG

``dataset.json`` holds ``tag``, ``pixel_spacing`` ([row, col] in mm),
``intensity_scale`` (stored value = round(intensity * scale)) and the ordered
``patients`` list with their slice counts.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

INTENSITY_SCALE = 65535
LABEL_BG, LABEL_PZ, LABEL_CG = 0, 1, 2


class MaskValidationError(ValueError):
    pass


@dataclass
class SliceRecord:
    image: np.ndarray
    wg_mask: np.ndarray
    cg_mask: np.ndarray
    spacing: tuple = (1.0, 1.0)
    index: int = 0
    excluded: bool = False

    def __post_init__(self):
        self.wg_mask = np.asarray(self.wg_mask, dtype=bool)
        self.cg_mask = np.asarray(self.cg_mask, dtype=bool)
        if not (self.image.shape == self.wg_mask.shape == self.cg_mask.shape):
            raise MaskValidationError(
                f"slice {self.index}: image {self.image.shape}, WG {self.wg_mask.shape} and CG {self.cg_mask.shape} differ"
            )
        bad = self.cg_mask & ~self.wg_mask
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise MaskValidationError(f"slice {self.index}: CG pixel outside WG at (row={r}, col={c})")

    @property
    def pz_mask(self):
        return self.wg_mask & ~self.cg_mask

    @property
    def shape(self):
        return self.image.shape

    def label_map(self):
        lab = np.zeros(self.shape, dtype=np.uint8)
        lab[self.wg_mask] = LABEL_PZ
        lab[self.cg_mask] = LABEL_CG
        return lab


@dataclass
class PatientCase:
    patient_id: str
    slices: list
    source: str = ""

    def __post_init__(self):
        if not self.slices:
            raise ValueError(f"patient {self.patient_id!r} has no slices")


@dataclass(frozen=True)
class InstitutionProfile:
    """Acquisition characteristics of one synthetic institution."""

    tag: str
    n_patients: int = 8
    native_shape: tuple = (72, 72)
    spacing: tuple = (0.5, 0.5)
    cg_level: float = 0.30
    pz_level: float = 0.70
    tissue_level: float = 0.45
    gain: float = 1.0
    noise_sigma: float = 0.03
    bias_strength: float = 0.1
    gland_scale: float = 1.0

    def __post_init__(self):
        if self.n_patients <= 0:
            raise ValueError(f"profile {self.tag}: patient count must be positive")
        if min(self.native_shape) < 8:
            raise ValueError(f"profile {self.tag}: native shape {self.native_shape} too small")
        if not (0 < self.cg_level < 1 and 0 < self.pz_level < 1):
            raise ValueError(f"profile {self.tag}: zone intensity levels must lie in (0, 1)")
        if self.noise_sigma < 0 or self.bias_strength < 0 or self.gain <= 0 or self.gland_scale <= 0:
            raise ValueError(f"profile {self.tag}: invalid noise, bias, gain or gland scale")

    @property
    def contrast_ratio(self):
        return self.pz_level / self.cg_level


# Dataset descriptor alias used by the CLI and manifests.
DatasetDescriptor = InstitutionProfile


def default_profiles(n_patients=8, canvas=72):
    """Three institutions with distinct contrast, gain, noise and bias field."""
    return (
        InstitutionProfile("A", n_patients, (canvas, canvas), (0.5, 0.5), 0.30, 0.70, 0.45, 1.00, 0.03, 0.10, 1.00),
        InstitutionProfile("B", n_patients, (canvas + 6, canvas - 4), (0.625, 0.625), 0.42, 0.62, 0.30, 0.65, 0.05, 0.30, 0.90),
        InstitutionProfile("C", n_patients, (canvas - 6, canvas + 4), (0.4, 0.4), 0.20, 0.85, 0.60, 1.20, 0.04, 0.20, 1.10),
    )


# --------------------------------------------------------------------------
# pre-processing


def _fit_axis(arr, axis, size):
    n = arr.shape[axis]
    if n == size:
        return arr
    if n > size:
        start = (n - size) // 2
        return np.take(arr, np.arange(start, start + size), axis=axis)
    before = (size - n) // 2
    after = size - n - before
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (before, after)
    return np.pad(arr, pad)


def fit_to_canvas(arr, canvas):
    """Center-crop or zero-pad each spatial axis of ``arr`` independently.

    When the crop or pad remainder is odd the extra pixel goes to the
    trailing side.
    """
    ch, cw = (canvas, canvas) if np.isscalar(canvas) else canvas
    return _fit_axis(_fit_axis(np.asarray(arr), -2, ch), -1, cw)


def to_canvas(slice_, canvas):
    return replace(
        slice_,
        image=fit_to_canvas(slice_.image, canvas),
        wg_mask=fit_to_canvas(slice_.wg_mask, canvas),
        cg_mask=fit_to_canvas(slice_.cg_mask, canvas),
    )


def mask_to_wg(slice_):
    """Zero intensities outside the whole gland.

    A slice with an empty gland is returned flagged ``excluded``.
    """
    if not slice_.wg_mask.any():
        return replace(slice_, image=np.zeros_like(slice_.image), excluded=True)
    return replace(slice_, image=np.where(slice_.wg_mask, slice_.image, 0.0))


def preprocess_patient(case, canvas):
    return PatientCase(case.patient_id, [mask_to_wg(to_canvas(s, canvas)) for s in case.slices], case.source)


# --------------------------------------------------------------------------
# phantoms


def _ellipse(shape, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _phantom_slice(profile, rng, geom, t, index):
    h, w = profile.native_shape
    # size follows apex -> mid-gland -> base
    size = 0.65 + 0.35 * np.sin(np.pi * (0.15 + 0.7 * t))
    ay = geom["wg_ay"] * size
    ax = geom["wg_ax"] * size
    cy = h / 2 + geom["dy"] + 1.5 * (t - 0.5)
    cx = w / 2 + geom["dx"]
    theta = geom["theta"] + 0.05 * (t - 0.5)
    wg = _ellipse((h, w), cy, cx, ay, ax, theta)

    ratio = geom["cg_ratio"] * (0.9 + 0.2 * t)
    cay, cax = ratio * ay, ratio * ax
    # anterior (upwards) shift keeps PZ thickest posteriorly
    shift = geom["cg_shift"] * (ay - cay)
    ccy = cy - shift * np.cos(theta)
    ccx = cx + shift * np.sin(theta)
    cg = _ellipse((h, w), ccy, ccx, cay, cax, theta) & wg

    base = np.full((h, w), profile.tissue_level)
    base += 0.05 * gaussian_filter(rng.standard_normal((h, w)), 2.0)
    base[wg] = profile.pz_level
    base[cg] = profile.cg_level
    base = gaussian_filter(base, 0.6)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    gy, gx = geom["bias_dir"]
    bias = 1.0 + profile.bias_strength * (gy * (yy / h - 0.5) + gx * (xx / w - 0.5))
    img = profile.gain * base * bias + profile.noise_sigma * rng.standard_normal((h, w))
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * INTENSITY_SCALE) / INTENSITY_SCALE
    return SliceRecord(img, wg, cg, tuple(profile.spacing), index)


def generate_patient(profile, patient_index, n_slices, rng):
    h, w = profile.native_shape
    base = min(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    geom = {
        "wg_ax": base * profile.gland_scale * rng.uniform(0.24, 0.30),
        "wg_ay": base * profile.gland_scale * rng.uniform(0.17, 0.22),
        "dy": rng.uniform(-2.0, 2.0),
        "dx": rng.uniform(-2.0, 2.0),
        "theta": rng.uniform(-0.15, 0.15),
        "cg_ratio": rng.uniform(0.45, 0.6),
        "cg_shift": rng.uniform(0.3, 0.7),
        "bias_dir": (np.cos(angle), np.sin(angle)),
    }
    slices = []
    for k in range(n_slices):
        t = k / (n_slices - 1) if n_slices > 1 else 0.5
        slices.append(_phantom_slice(profile, rng, geom, t, k))
    return PatientCase(f"{profile.tag}{patient_index + 1:03d}", slices, profile.tag)


def generate_phantoms(profiles, slices_per_patient=4, seed=0, patients=None):
    """Generate one dataset per institution profile.

    Returns a list (one per profile) of PatientCase lists in generation
    order. ``patients`` overrides every profile's patient count.
    """
    if slices_per_patient < 1:
        raise ValueError("slices_per_patient must be >= 1")
    tags = [p.tag for p in profiles]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate profile tags {tags}")
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(profiles))
    out = []
    for profile, ss in zip(profiles, children):
        n = patients if patients is not None else profile.n_patients
        if n <= 0:
            raise ValueError("patient count must be positive")
        pss = ss.spawn(n)
        out.append([generate_patient(profile, i, slices_per_patient, np.random.default_rng(pss[i])) for i in range(n)])
    return out


# --------------------------------------------------------------------------
# disk format


def save_dataset(cases, root, tag=None, spacing=None):
    os.makedirs(root, exist_ok=True)
    if cases:
        tag = tag if tag is not None else cases[0].source
        spacing = spacing if spacing is not None else cases[0].slices[0].spacing
    manifest = {
        "tag": tag or "",
        "pixel_spacing": [float(v) for v in (spacing or (1.0, 1.0))],
        "intensity_scale": INTENSITY_SCALE,
        "patients": [{"id": c.patient_id, "n_slices": len(c.slices)} for c in cases],
    }
    for case in cases:
        pdir = os.path.join(root, case.patient_id)
        os.makedirs(pdir, exist_ok=True)
        for k, s in enumerate(case.slices):
            img = np.round(np.clip(s.image, 0.0, 1.0) * INTENSITY_SCALE).astype(np.uint16)
            Image.fromarray(img).save(os.path.join(pdir, f"slice_{k:03d}_img.png"))
            Image.fromarray(s.label_map(), mode="L").save(os.path.join(pdir, f"slice_{k:03d}_mask.png"))
    with open(os.path.join(root, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_label_png(path):
    lab = np.array(Image.open(path))
    bad = (lab != LABEL_BG) & (lab != LABEL_PZ) & (lab != LABEL_CG)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MaskValidationError(f"{path}: invalid label {lab[r, c]} at (row={r}, col={c}); expected 0, 1 or 2")
    return lab


def labels_to_masks(lab):
    return lab >= LABEL_PZ, lab == LABEL_CG


def _read_image_png(path, scale):
    return np.array(Image.open(path)).astype(np.float64) / scale


def load_dataset(root, strict=True):
    """Load a dataset directory, validating every mask.

    With ``strict`` a malformed slice raises :class:`MaskValidationError`;
    otherwise it is skipped with a warning.
    """
    manifest_path = os.path.join(root, "dataset.json")
    if not os.path.exists(manifest_path):
        if os.path.isdir(root) and not os.listdir(root):
            log.warning("empty dataset directory %s", root)
            return []
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    scale = manifest.get("intensity_scale", INTENSITY_SCALE)
    spacing = tuple(manifest.get("pixel_spacing", (1.0, 1.0)))
    tag = manifest.get("tag", "")
    cases = []
    for entry in sorted(manifest["patients"], key=lambda e: e["id"]):
        pid = entry["id"]
        slices = []
        for k in range(entry["n_slices"]):
            img_path = os.path.join(root, pid, f"slice_{k:03d}_img.png")
            mask_path = os.path.join(root, pid, f"slice_{k:03d}_mask.png")
            for p in (img_path, mask_path):
                if not os.path.exists(p):
                    raise FileNotFoundError(f"missing file {p}")
            try:
                wg, cg = labels_to_masks(read_label_png(mask_path))
                slices.append(SliceRecord(_read_image_png(img_path, scale), wg, cg, spacing, k))
            except MaskValidationError as exc:
                if strict:
                    raise
                log.warning("skipping slice: %s", exc)
        if slices:
            cases.append(PatientCase(pid, slices, tag))
    return cases


def read_manifest(root):
    with open(os.path.join(root, "dataset.json")) as fh:
        return json.load(fh)
