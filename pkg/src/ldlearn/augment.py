"""Data ingestion, augmentation and the synthetic desk-scale dataset.

Images are numpy float32 arrays of shape (H, W, 3) in [0, 1] throughout
this module; conversion to channel-first torch tensors happens only at
batch assembly.

View pairs share one geometric transform (so grid patch i of both views
always covers the same source region) and draw photometric transforms
independently per view.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from ldlearn.seeding import substream

FOV_THRESHOLD = 10.0 / 255.0


# ----------------------------------------------------------------------
# field-of-view cropping
# ----------------------------------------------------------------------

def content_bbox(image: np.ndarray, threshold: float = FOV_THRESHOLD):
    """Tight bbox (h0, h1, w0, w1), half-open, around above-threshold pixels.

    Returns None when nothing exceeds the threshold.
    """
    bright = image.max(axis=2) > threshold if image.ndim == 3 else image > threshold
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def fov_crop(image: np.ndarray, out_size: tuple[int, int] = (512, 512),
             threshold: float = FOV_THRESHOLD) -> np.ndarray:
    """Crop away the dark border around the imaged field and resize."""
    box = content_bbox(image, threshold)
    if box is None:
        warnings.warn("no pixel exceeds the field-of-view threshold; image left unchanged")
        return image
    h0, h1, w0, w1 = box
    crop = image[h0:h1, w0:w1]
    return cv2.resize(crop, (out_size[1], out_size[0]), interpolation=cv2.INTER_LINEAR)


# ----------------------------------------------------------------------
# paired views with shared geometry
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryParams:
    """One geometric transform, applied identically to both views."""

    crop_box: tuple[int, int, int, int]  # (h0, h1, w0, w1), half-open
    flip: bool
    rot_quarters: int

    def crop_area_fraction(self, height: int, width: int) -> float:
        h0, h1, w0, w1 = self.crop_box
        return (h1 - h0) * (w1 - w0) / (height * width)


@dataclass
class ViewPairConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    rot90: bool = True
    grayscale_prob: float = 0.2
    jitter: float = 0.2
    photometric_only: bool = False


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    geometry: GeometryParams


def _sample_crop_box(rng, height, width, scale_range, ratio_range):
    for _ in range(10):
        scale = rng.uniform(*scale_range)
        area = scale * height * width
        ratio = np.exp(rng.uniform(np.log(ratio_range[0]), np.log(ratio_range[1])))
        ch = int(round(np.sqrt(area / ratio)))
        cw = int(round(np.sqrt(area * ratio)))
        if 0 < ch <= height and 0 < cw <= width:
            h0 = int(rng.integers(0, height - ch + 1))
            w0 = int(rng.integers(0, width - cw + 1))
            return h0, h0 + ch, w0, w0 + cw
    return 0, height, 0, width


def _apply_geometry(image: np.ndarray, geom: GeometryParams, out_hw) -> np.ndarray:
    h0, h1, w0, w1 = geom.crop_box
    out = image[h0:h1, w0:w1]
    if out.shape[:2] != tuple(out_hw):
        out = cv2.resize(out, (out_hw[1], out_hw[0]), interpolation=cv2.INTER_LINEAR)
    if geom.flip:
        out = out[:, ::-1]
    if geom.rot_quarters:
        out = np.rot90(out, geom.rot_quarters)
    return np.ascontiguousarray(out)


def _apply_photometric(image, rng, cfg: ViewPairConfig):
    out = image.astype(np.float32, copy=True)
    if rng.uniform() < cfg.grayscale_prob:
        out[:] = out.mean(axis=2, keepdims=True)
    brightness = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    contrast = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    saturation = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    out *= brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * saturation + gray
    return np.clip(out, 0.0, 1.0)


def make_view_pair(image: np.ndarray, rng: np.random.Generator,
                   cfg: ViewPairConfig | None = None) -> ViewPair:
    """Two augmented views of one image with a shared geometric transform."""
    cfg = cfg or ViewPairConfig()
    height, width = image.shape[:2]
    if cfg.photometric_only:
        geom = GeometryParams(crop_box=(0, height, 0, width), flip=False, rot_quarters=0)
    else:
        box = _sample_crop_box(rng, height, width, cfg.crop_scale, cfg.crop_ratio)
        flip = bool(rng.uniform() < cfg.flip_prob)
        quarters = int(rng.integers(0, 4)) if cfg.rot90 else 0
        if quarters % 2 == 1 and height != width:
            quarters = 0  # quarter turns only keep shape on square images
        geom = GeometryParams(crop_box=box, flip=flip, rot_quarters=quarters)
    base = _apply_geometry(image, geom, (height, width))
    return ViewPair(
        view1=_apply_photometric(base, rng, cfg),
        view2=_apply_photometric(base, rng, cfg),
        geometry=geom,
    )


# ----------------------------------------------------------------------
# mixup
# ----------------------------------------------------------------------

@dataclass
class MixupSample:
    image: np.ndarray
    lam: float
    parents: tuple[int, int]


def make_mixup(x1: np.ndarray, x2: np.ndarray, n1: int, n2: int,
               rng: np.random.Generator, lam_range: tuple[float, float] = (0.2, 0.8),
               lam: float | None = None) -> MixupSample:
    """Exact pixelwise blend of two distinct batch images."""
    if n1 == n2:
        raise ValueError("mixup parents must be two distinct images")
    if x1.shape != x2.shape:
        raise ValueError("mixup parents must share one shape")
    if lam is None:
        lam = float(rng.uniform(*lam_range))
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    # blend in float32 so the image is bit-reproducible from the stored lam
    lam32 = np.float32(lam)
    blended = lam32 * x1 + (np.float32(1.0) - lam32) * x2
    return MixupSample(image=blended.astype(np.float32), lam=float(lam), parents=(n1, n2))


# ----------------------------------------------------------------------
# invertible test-time augmentation
# ----------------------------------------------------------------------

def _dihedral_forward(arr: np.ndarray, flip: bool, quarters: int) -> np.ndarray:
    out = arr[:, ::-1] if flip else arr
    if quarters:
        out = np.rot90(out, quarters)
    return np.ascontiguousarray(out)


def _dihedral_inverse(arr: np.ndarray, flip: bool, quarters: int) -> np.ndarray:
    out = np.rot90(arr, -quarters) if quarters else arr
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def invertible_tta(image: np.ndarray, e: int):
    """Transform ``image`` by ensemble member ``e``; return it with an
    inverse-warp that maps predictions back to source coordinates exactly.

    Members 0-7 are the pure dihedral transforms (e=0 is the identity);
    higher indices reuse the dihedral cycle with deterministic photometric
    jitter on top.  The inverse warps geometry only, so it is bit-exact on
    the pixel lattice for every member.
    """
    if e < 0:
        raise ValueError("ensemble index must be nonnegative")
    quarters = e % 4
    flip = (e // 4) % 2 == 1
    out = _dihedral_forward(image, flip, quarters)
    if e >= 8:
        rng = substream(e, "tta-photometric")
        out = out * np.float32(rng.uniform(0.85, 1.15))
        mean = out.mean()
        out = (out - mean) * np.float32(rng.uniform(0.85, 1.15)) + mean
        out = np.clip(out, 0.0, 1.0).astype(np.float32)

    def inverse(mask: np.ndarray) -> np.ndarray:
        return _dihedral_inverse(mask, flip, quarters)

    return out, inverse


# ----------------------------------------------------------------------
# synthetic curve / disc dataset
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    count: int = 10
    size: tuple[int, int] = (64, 64)
    kind: str = "curves"  # "curves" or "disc+curves"
    seed: int = 0
    curve_density: tuple[float, float] = (0.035, 0.10)
    curve_steps: tuple[int, int] = (30, 60)
    thickness: int = 1
    disc_radius: tuple[int, int] = (5, 8)

    def __post_init__(self):
        if self.kind not in ("curves", "disc+curves"):
            raise ValueError(f"unknown synthetic structure kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be positive")


@dataclass
class SynthSample:
    image: np.ndarray           # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray            # (H, W) uint8 in {0, 1}, curve pixels
    landmark: tuple[int, int] | None  # disc center (h, w) when present


def _textured_background(rng, h, w):
    base = np.array([0.62, 0.52, 0.42], dtype=np.float32) * rng.uniform(0.85, 1.15)
    coarse = rng.uniform(0.0, 1.0, size=(h // 8 + 1, w // 8 + 1, 3)).astype(np.float32)
    coarse = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)
    fine = rng.uniform(-1.0, 1.0, size=(h, w, 3)).astype(np.float32)
    img = base[None, None] + 0.10 * (coarse - 0.5) + 0.02 * fine
    return np.clip(img, 0.0, 1.0)


def _stamp_disk(mask, h, w, radius):
    hh, ww = mask.shape
    h0, h1 = max(0, h - radius), min(hh, h + radius + 1)
    w0, w1 = max(0, w - radius), min(ww, w + radius + 1)
    ys, xs = np.mgrid[h0:h1, w0:w1]
    mask[h0:h1, w0:w1] |= ((ys - h) ** 2 + (xs - w) ** 2) <= radius**2


def _draw_curves(rng, h, w, spec: SynthSpec):
    # Curves are appended until a sampled density target is met, which keeps
    # the curve pixel fraction inside a narrow band independent of how early
    # individual walks leave the frame.
    mask = np.zeros((h, w), dtype=bool)
    target = rng.uniform(*spec.curve_density)
    for _ in range(64):
        if mask.mean() >= target:
            break
        pos = np.array([rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w)])
        angle = rng.uniform(0, 2 * np.pi)
        steps = int(rng.integers(spec.curve_steps[0], spec.curve_steps[1] + 1))
        for _ in range(steps):
            angle += rng.normal(0.0, 0.25)
            pos += np.array([np.sin(angle), np.cos(angle)])
            if not (0 <= pos[0] < h and 0 <= pos[1] < w):
                break
            _stamp_disk(mask, int(pos[0]), int(pos[1]), spec.thickness)
    return mask


def _disk_mask(h, w, center, radius):
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys - center[0]) ** 2 + (xs - center[1]) ** 2 <= radius**2


def synth_sample(spec: SynthSpec, index: int) -> SynthSample:
    """Generate sample ``index`` of the dataset; deterministic in (seed, index)."""
    rng = substream(spec.seed, "synth", index=index)
    h, w = spec.size
    image = _textured_background(rng, h, w)

    curves = _draw_curves(rng, h, w, spec)
    shade = (0.85 + 0.15 * rng.uniform(size=(h, w, 1))).astype(np.float32)
    curve_color = np.array([0.45, 0.20, 0.15], dtype=np.float32)
    image = np.where(curves[..., None], curve_color[None, None] * shade, image)

    landmark = None
    if spec.kind == "disc+curves":
        # the disc is drawn over the curves, so the landmark neighborhood is
        # radially symmetric (mirroring how a bright structure occludes
        # thinner ones); curve masks keep the occluded pixels
        radius = int(rng.integers(spec.disc_radius[0], spec.disc_radius[1] + 1))
        margin = radius + 8
        center = (int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin)))
        disc = _disk_mask(h, w, center, radius)
        glow = np.exp(
            -((np.mgrid[0:h, 0:w][0] - center[0]) ** 2 + (np.mgrid[0:h, 0:w][1] - center[1]) ** 2)
            / (2.0 * (0.8 * radius) ** 2)
        ).astype(np.float32)
        disc_color = np.array([0.95, 0.82, 0.55], dtype=np.float32)
        image = np.where(disc[..., None], disc_color[None, None] * (0.7 + 0.3 * glow[..., None]), image)
        landmark = center

    return SynthSample(
        image=image.astype(np.float32),
        mask=curves.astype(np.uint8),
        landmark=landmark,
    )


def synth_dataset(spec: SynthSpec) -> list[SynthSample]:
    return [synth_sample(spec, i) for i in range(spec.count)]


# ----------------------------------------------------------------------
# manifests and image files
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path | None = None
    landmark: tuple[int, int] | None = None


def save_image(path, image: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"could not write image {path}")


def load_image(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise FileNotFoundError(f"could not read image {path}")
    return cv2.cvtColor(arr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def save_mask(path, mask: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), (mask > 0).astype(np.uint8) * 255):
        raise IOError(f"could not write mask {path}")


def load_mask(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if arr is None:
        raise FileNotFoundError(f"could not read mask {path}")
    return (arr > 127).astype(np.uint8)


def write_manifest(path, entries: list[ManifestEntry]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in entries:
        parts = [str(e.image_path)]
        if e.mask_path is not None:
            parts.append(str(e.mask_path))
        if e.landmark is not None:
            if e.mask_path is None:
                parts.append("")
            parts.append(f"{e.landmark[0]},{e.landmark[1]}")
        lines.append("\t".join(parts))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    root = path.parent
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        image_path = root / parts[0]
        mask_path = root / parts[1] if len(parts) > 1 and parts[1] else None
        landmark = None
        if len(parts) > 2 and parts[2]:
            hh, ww = parts[2].split(",")
            landmark = (int(hh), int(ww))
        entries.append(ManifestEntry(image_path=image_path, mask_path=mask_path, landmark=landmark))
    return entries


def save_synth_dataset(directory, spec: SynthSpec) -> Path:
    """Write a synthetic dataset plus manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(synth_dataset(spec)):
        img_name = f"img_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        save_image(directory / img_name, sample.image)
        save_mask(directory / mask_name, sample.mask)
        entries.append(ManifestEntry(Path(img_name), Path(mask_name), sample.landmark))
    manifest = directory / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


# ----------------------------------------------------------------------
# batch assembly
# ----------------------------------------------------------------------

@dataclass
class BatchSpec:
    groups: int = 4


@dataclass
class GroupBatch:
    """One training batch: two augmented views and one mixup per group."""

    view1: torch.Tensor      # (G, 3, H, W)
    view2: torch.Tensor      # (G, 3, H, W)
    mixed: torch.Tensor      # (G, 3, H, W)
    lams: torch.Tensor       # (G,)
    parents: list[tuple[int, int]]

    @property
    def tensor_count(self) -> int:
        return self.view1.shape[0] * 3


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())


class GroupBatchProducer:
    """Deterministic batch stream over an in-memory image list.

    Batch ``index`` depends only on (seed, index), so any worker assigned
    that batch reproduces it exactly.
    """

    def __init__(self, images: list[np.ndarray], seed: int,
                 spec: BatchSpec | None = None,
                 view_cfg: ViewPairConfig | None = None,
                 lam_range: tuple[float, float] = (0.2, 0.8)):
        if len(images) < 2:
            raise ValueError("need at least two images to assemble mixup groups")
        self.images = images
        self.seed = seed
        self.spec = spec or BatchSpec()
        self.view_cfg = view_cfg or ViewPairConfig()
        self.lam_range = lam_range

    def batch(self, index: int) -> GroupBatch:
        rng = substream(self.seed, "data", index=index)
        g = self.spec.groups
        replace = len(self.images) < g
        chosen = rng.choice(len(self.images), size=g, replace=replace)
        pairs = [make_view_pair(self.images[i], rng, self.view_cfg) for i in chosen]
        view1 = [p.view1 for p in pairs]
        view2 = [p.view2 for p in pairs]
        mixed, lams, parents = [], [], []
        for gi in range(g):
            partner = (gi + 1) % g
            sample = make_mixup(view1[gi], view1[partner], gi, partner, rng, self.lam_range)
            mixed.append(sample.image)
            lams.append(sample.lam)
            parents.append(sample.parents)
        return GroupBatch(
            view1=_to_tensor(view1),
            view2=_to_tensor(view2),
            mixed=_to_tensor(mixed),
            lams=torch.tensor(lams, dtype=torch.float32),
            parents=parents,
        )
