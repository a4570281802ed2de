"""Synthetic chest phantoms, parametric abnormality styles, and mask propagation.

Normal phantoms have exactly known lung geometry. Abnormal variants only
corrupt pixel values, so the lung geometry of a variant is that of its source.
Pseudo masks come from running a segmentor on the normal image and are
attached unchanged to every abnormal variant of that image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import StateError
from .segnet import binarize

STYLES = ("opacity_blobs", "diffuse_haze", "basal_gradient", "border_occlusion")
NORMAL = "normal"


@dataclass
class Phantom:
    image: np.ndarray  # H×W, values in [0, 1]
    true_mask: np.ndarray  # H×W uint8
    lungs: List[np.ndarray]  # per-lung H×W boolean masks (left, right)
    seed: int
    params: Dict = field(default_factory=dict)


@dataclass(frozen=True)
class AbnormalityStyle:
    style_id: str
    intensity: float
    seed: int

    def __post_init__(self):
        if self.style_id not in STYLES:
            raise ValueError(f"unknown abnormality style {self.style_id!r}; expected one of {STYLES}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")


@dataclass
class AugmentedPair:
    image: np.ndarray
    pseudo_mask: np.ndarray
    source_id: str
    style: Union[AbnormalityStyle, str] = NORMAL

    @property
    def style_name(self) -> str:
        return self.style if isinstance(self.style, str) else self.style.style_id


# ------------------------------------------------------------------ phantom


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    """Normalised radius of every pixel centre w.r.t. a rotated ellipse."""
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = xx - cx, yy - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / ax) ** 2 + (v / ay) ** 2)


def generate_phantom(H: int, W: int, seed: int) -> Phantom:
    """Render a normal chest phantom of size H×W, deterministic in ``seed``.

    Layout: dark body background, a bright mediastinal column in the middle,
    two elliptical lung fields (darker interior, bright rim), horizontal rib
    bands inside the lungs, and Gaussian pixel noise.
    """
    if H < 32 or W < 32:
        raise ValueError(f"phantoms need H, W >= 32, got {H}x{W}")
    rng = np.random.default_rng(int(seed))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    cy = H * rng.uniform(0.46, 0.54)
    lungs, radii, geometry = [], [], []
    for side, cx_frac in (("left", 0.30), ("right", 0.70)):
        g = {
            "cx": W * (cx_frac + rng.uniform(-0.015, 0.015)),
            "cy": cy + H * rng.uniform(-0.02, 0.02),
            "ax": W * rng.uniform(0.12, 0.16),
            "ay": H * rng.uniform(0.28, 0.34),
            "theta": rng.uniform(-0.12, 0.12) * (1 if side == "left" else -1),
        }
        r = _ellipse(yy, xx, g["cy"], g["cx"], g["ay"], g["ax"], g["theta"])
        radii.append(r)
        lungs.append(r <= 1.0)
        geometry.append(g)

    rib_freq = rng.uniform(5.0, 8.0)  # bands per image height
    rib_phase = rng.uniform(0, 2 * np.pi)
    noise_sigma = rng.uniform(0.01, 0.04)
    background = rng.uniform(0.12, 0.2)

    img = background + 0.06 * (yy / H)
    mediastinum = np.exp(-0.5 * ((xx - W / 2) / (0.06 * W)) ** 2)
    img = img + 0.55 * mediastinum * (yy > 0.12 * H)

    ribs = 0.5 + 0.5 * np.sin(2 * np.pi * rib_freq * yy / H + rib_phase)
    for lung, r in zip(lungs, radii):
        inside = np.clip(r, 0.0, 1.0)
        field_val = 0.30 + 0.30 * inside**4 + 0.07 * ribs
        img = np.where(lung, field_val, img)

    img = img + rng.normal(0.0, noise_sigma, size=(H, W))
    img = np.clip(img, 0.0, 1.0)
    true_mask = (lungs[0] | lungs[1]).astype(np.uint8)
    params = {
        "lungs": geometry,
        "rib_frequency": rib_freq,
        "rib_phase": rib_phase,
        "noise_sigma": noise_sigma,
        "background": background,
    }
    return Phantom(img, true_mask, lungs, int(seed), params)


# ------------------------------------------------------------------- styles


def _gauss(yy, xx, cy, cx, sigma):
    return np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / sigma**2)


def _smooth_field(rng, H, W, cells=4):
    """Low-frequency random field in [0, 1] (bilinear upsampling of a coarse grid)."""
    coarse = rng.uniform(size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _opacity_blobs(ph, rng, yy, xx):
    H, W = ph.image.shape
    pts = np.argwhere(ph.true_mask > 0)
    out = np.zeros((H, W))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = pts[rng.integers(len(pts))]
        sigma = rng.uniform(0.05, 0.12) * min(H, W)
        out += rng.uniform(0.5, 0.8) * _gauss(yy, xx, cy, cx, sigma)
    return out


def _diffuse_haze(ph, rng, yy, xx):
    H, W = ph.image.shape
    field_val = _smooth_field(rng, H, W)
    lung_weight = 0.4 + 0.6 * ph.true_mask
    return (0.35 + 0.35 * field_val) * lung_weight


def _basal_gradient(ph, rng, yy, xx):
    H, W = ph.image.shape
    out = np.zeros((H, W))
    for lung in ph.lungs:
        rows = np.nonzero(lung.any(axis=1))[0]
        top, bottom = rows.min(), rows.max()
        level = bottom - rng.uniform(0.25, 0.6) * (bottom - top)
        ramp = np.clip((yy - level) / (0.15 * H), 0.0, 1.0)
        cols = np.nonzero(lung.any(axis=0))[0]
        band = ((xx >= cols.min() - 0.05 * W) & (xx <= cols.max() + 0.05 * W)).astype(float)
        out += rng.uniform(0.5, 0.7) * ramp * band
    return out


def _border_occlusion(ph, rng, yy, xx):
    H, W = ph.image.shape
    out = np.zeros((H, W))
    for _ in range(int(rng.integers(1, 3))):
        lung = ph.lungs[int(rng.integers(2))]
        interior = lung[1:-1, 1:-1]
        edge = lung.copy()
        edge[1:-1, 1:-1] = interior & ~(
            lung[:-2, 1:-1] & lung[2:, 1:-1] & lung[1:-1, :-2] & lung[1:-1, 2:]
        )
        pts = np.argwhere(edge)
        cy, cx = pts[rng.integers(len(pts))]
        sigma = rng.uniform(0.07, 0.12) * min(H, W)
        out += rng.uniform(0.6, 0.8) * _gauss(yy, xx, cy, cx, sigma)
    return out


_STYLE_FNS: Dict[str, Callable] = {
    "opacity_blobs": _opacity_blobs,
    "diffuse_haze": _diffuse_haze,
    "basal_gradient": _basal_gradient,
    "border_occlusion": _border_occlusion,
}


def synthesize_abnormal(phantom: Phantom, style: AbnormalityStyle) -> np.ndarray:
    """Corrupt a normal phantom image with an additive abnormality.

    The additive field is scaled by ``style.intensity`` and the result clamped
    to [0, 1]. Intensity 0 returns an exact copy of the source image.
    """
    if style.style_id not in _STYLE_FNS:
        raise ValueError(f"unknown abnormality style {style.style_id!r}")
    if style.intensity == 0.0:
        return phantom.image.copy()
    H, W = phantom.image.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rng = np.random.default_rng(int(style.seed))
    corruption = _STYLE_FNS[style.style_id](phantom, rng, yy, xx)
    return np.clip(phantom.image + style.intensity * corruption, 0.0, 1.0)


# -------------------------------------------------------------- propagation


def propagate_mask(segmentor, normal_image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary lung mask for a normal image, to be reused by its abnormal variants.

    ``segmentor`` is anything with ``predict(images) -> probabilities``; a
    :class:`~xlsor.segnet.Segmentor` must have been trained or loaded.
    """
    if segmentor is None or not getattr(segmentor, "trained", True):
        raise StateError("mask propagation needs a trained segmentor")
    prob = np.asarray(segmentor.predict(np.asarray(normal_image)[None]))
    return binarize(prob.reshape(normal_image.shape), threshold)


class OracleSegmentor:
    """Returns the true mask of known phantoms; a reference for propagation tests."""

    trained = True

    def __init__(self, phantoms: Sequence[Phantom]):
        self._by_image = {p.image.tobytes(): p.true_mask for p in phantoms}

    def predict(self, images):
        images = np.asarray(images)
        return np.stack([self._by_image[im.tobytes()].astype(np.float64) for im in images])


def augment_phantoms(
    segmentor,
    phantoms: Sequence[Phantom],
    ids: Sequence[str],
    per_normal: int = 5,
    seed: int = 0,
    intensity_range=(0.4, 1.0),
    style_offset: int = 0,
) -> List[AugmentedPair]:
    """One normal pair plus ``per_normal`` abnormal pairs for each phantom.

    Styles cycle through :data:`STYLES` in a global round-robin starting at
    ``style_offset``; intensities and style seeds are drawn from ``seed``.
    """
    if per_normal < 1:
        raise ValueError("per_normal must be >= 1")
    rng = np.random.default_rng(int(seed))
    pairs, k = [], style_offset
    for phantom, pid in zip(phantoms, ids):
        mask = propagate_mask(segmentor, phantom.image)
        pairs.append(AugmentedPair(phantom.image.copy(), mask, pid, NORMAL))
        for _ in range(per_normal):
            style = AbnormalityStyle(
                STYLES[k % len(STYLES)],
                float(rng.uniform(*intensity_range)),
                int(rng.integers(2**63)),
            )
            k += 1
            pairs.append(AugmentedPair(synthesize_abnormal(phantom, style), mask.copy(), pid, style))
    return pairs


def phantom_seed(seed: int, block: int, index: int) -> int:
    """Seed of the ``index``-th auxiliary phantom in construction block ``block``."""
    return int(np.random.default_rng([int(seed), block, index]).integers(2**63))


def build_augmented_set(
    n_normal: int,
    per_normal: int = 5,
    segmentor=None,
    seed: int = 0,
    size=(64, 64),
    block: int = 0,
) -> List[AugmentedPair]:
    """n_normal normal pairs plus n_normal * per_normal abnormal ones.

    Normal sources are fresh auxiliary phantoms; ``block`` selects a disjoint
    batch of them so that successive blocks can be stacked into nested sets.
    """
    if n_normal < 1 or per_normal < 1:
        raise ValueError("n_normal and per_normal must be >= 1")
    if segmentor is None:
        raise StateError("building an augmented set needs a trained segmentor")
    H, W = size
    seeds = [phantom_seed(seed, block, i) for i in range(n_normal)]
    phantoms = [generate_phantom(H, W, s) for s in seeds]
    ids = [f"aux{block:02d}_{i:04d}" for i in range(n_normal)]
    pair_seed = int(np.random.default_rng([int(seed), block, 2**31]).integers(2**63))
    return augment_phantoms(segmentor, phantoms, ids, per_normal, pair_seed)


def build_nested_sets(
    levels: int,
    n_normal: int,
    per_normal: int = 5,
    segmentor=None,
    seed: int = 0,
    size=(64, 64),
) -> List[List[AugmentedPair]]:
    """A^1..A^levels where A^i is A^(i-1) plus one new block of pairs."""
    sets, acc = [], []
    for block in range(levels):
        acc = acc + build_augmented_set(n_normal, per_normal, segmentor, seed, size, block)
        sets.append(list(acc))
    return sets


def to_mask_pairs(pairs: Sequence[AugmentedPair]):
    from .data import MaskPair

    return [
        MaskPair(p.image, p.pseudo_mask, {"source_id": p.source_id, "style": p.style_name})
        for p in pairs
    ]
