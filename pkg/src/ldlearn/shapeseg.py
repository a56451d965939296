"""Unsupervised shape-guided segmentation.

A discriminator over binary reference masks from a donor modality pushes
one designated cluster channel of the soft segmentation toward the
donor's shape distribution, while the region-discrimination losses keep
the clustered pixels pattern-consistent.  Predictions are then refined by
prototype clustering and by retraining a plain segmentation network on
TTA pseudo-labels weighted with per-pixel uncertainty.
"""

import copy
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from ldlearn import losses
from ldlearn.augment import (
    ManifestEntry,
    invertible_tta,
    load_mask,
    read_manifest,
    save_mask,
    write_manifest,
)
from ldlearn.losses import PROB_EPS
from ldlearn.nets import load_checkpoint, model_device, save_checkpoint
from ldlearn.pretrain import PretrainConfig, compute_losses, learning_rate
from ldlearn.seeding import substream

LN2 = math.log(2.0)


@dataclass
class ShapeGuidedConfig:
    epochs: int = 80
    iters_per_epoch: int = 1000
    target_channel: int = 0
    g_lr: float = 1e-3
    d_lr: float = 5e-5
    lr_halving_period: int = 10
    region_weight: float = 10.0
    entropy_weight: float = 0.1
    adv_weight: float = 1.0
    grid: tuple[int, int] = (8, 8)
    tau: float = 0.1
    augment_refs: bool = True
    # keep the epoch whose target-channel mask-density histogram is closest
    # (in KL) to the reference masks'; guards against adversarial seesaw
    # collapse at the arbitrary final epoch
    select_by_density_kl: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("epoch and iteration counts must be positive")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.target_channel < 0:
            raise ValueError("target channel must be nonnegative")


class ReferenceMaskSet:
    """Binary donor masks, resized to the training resolution on demand."""

    def __init__(self, masks: list[np.ndarray]):
        if not masks:
            raise ValueError("at least one reference mask is required")
        self.masks = [(m > 0).astype(np.float32) for m in masks]

    @classmethod
    def from_manifest(cls, path) -> "ReferenceMaskSet":
        entries = read_manifest(path)
        masks = []
        for e in entries:
            source = e.mask_path if e.mask_path is not None else e.image_path
            masks.append(load_mask(source))
        return cls(masks)

    def sample(self, rng: np.random.Generator, count: int, size: tuple[int, int],
               augment: bool = True) -> torch.Tensor:
        """(count, 1, H, W) float tensor of reference masks.

        Augmentation enriches the empirical shape distribution with flips,
        quarter rotations and modest random crops.
        """
        out = []
        for idx in rng.integers(0, len(self.masks), size=count):
            mask = self.masks[int(idx)]
            if augment:
                if rng.uniform() < 0.5:
                    mask = mask[:, ::-1]
                mask = np.rot90(mask, int(rng.integers(0, 4)))
                h, w = mask.shape
                scale = rng.uniform(0.8, 1.0)
                ch, cw = max(1, int(h * scale)), max(1, int(w * scale))
                h0 = int(rng.integers(0, h - ch + 1))
                w0 = int(rng.integers(0, w - cw + 1))
                mask = mask[h0 : h0 + ch, w0 : w0 + cw]
            if mask.shape != tuple(size):
                mask = cv2.resize(mask.astype(np.float32), (size[1], size[0]),
                                  interpolation=cv2.INTER_NEAREST)
            out.append(np.ascontiguousarray(mask, dtype=np.float32))
        return torch.from_numpy(np.stack(out)[:, None])


def _bce_to_constant(probs: torch.Tensor, target: float) -> torch.Tensor:
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(torch.log(p) if target == 1.0 else torch.log(1.0 - p)).mean()


_DENSITY_BINS = np.linspace(0.0, 0.4, 9)


def _density_histogram(densities, smoothing: float = 1e-3) -> np.ndarray:
    hist, _ = np.histogram(np.clip(densities, 0.0, _DENSITY_BINS[-1] - 1e-9), bins=_DENSITY_BINS)
    hist = hist.astype(np.float64) + smoothing
    return hist / hist.sum()


def density_kl_diagnostic(model, images, refs: "ReferenceMaskSet", target_channel: int) -> float:
    """KL between the target channel's mask-density histogram over a probe
    image set and the reference masks' density histogram (lower = closer)."""
    device = model_device(model)
    model.eval()
    model_densities = []
    with torch.no_grad():
        for image in images:
            x = torch.from_numpy(image.transpose(2, 0, 1)[None].copy()).to(device)
            _, r = model(x)
            model_densities.append(float((r[0, target_channel] > 0.5).float().mean()))
    model.train()
    ref_densities = [float(m.mean()) for m in refs.masks]
    return losses.kl_divergence(_density_histogram(model_densities), _density_histogram(ref_densities))


@dataclass
class ShapeGuidedResult:
    model: torch.nn.Module
    discriminator: torch.nn.Module
    trace: list[dict]
    checkpoint_path: Path | None = None
    kl_trace: list[float] = field(default_factory=list)
    selected_epoch: int | None = None


def train_shape_guided(model, discriminator, data, refs: ReferenceMaskSet,
                       cfg: ShapeGuidedConfig, resume_from=None, start_epoch: int = 0,
                       seed: int = 0, out_dir=None) -> ShapeGuidedResult:
    """Alternating discriminator/generator training on top of a warmed-up model.

    Per iteration the discriminator learns to separate reference masks from
    the target cluster channel (detached), then the backbone minimizes the
    full region objective plus the adversarial term.  ``resume_from``
    continues a warmup training checkpoint (model, optimizer moments, batch
    stream and epoch counter), so the halving schedule and data stream run
    through uninterrupted.
    """
    batch_index = 0
    if resume_from is not None:
        from ldlearn.pretrain import load_train_checkpoint

        model, g_opt, start_epoch, batch_index = load_train_checkpoint(resume_from)
    elif model is not None:
        g_opt = torch.optim.Adam(model.parameters(), lr=cfg.g_lr)
    else:
        raise ValueError("either a model or a checkpoint to resume from is required")
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=cfg.d_lr)
    ref_rng = substream(seed, "shape-refs")
    rows = []
    m = cfg.target_channel
    model.train()
    discriminator.train()
    with_region = cfg.region_weight > 0 or cfg.entropy_weight > 0
    probe_images = None
    if cfg.select_by_density_kl:
        probe_images = getattr(data, "images", None)
        if not probe_images:
            raise ValueError("density-KL selection needs a data producer exposing its images")
        probe_images = probe_images[:16]
    kl_trace: list[float] = []
    best_kl, best_state, best_epoch = float("inf"), None, None
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        g_lr = cfg.g_lr * 0.5 ** (epoch // cfg.lr_halving_period)
        for group in g_opt.param_groups:
            group["lr"] = g_lr
        d_hits = 0
        d_total = 0
        for _ in range(cfg.iters_per_epoch):
            batch = data.batch(batch_index)
            grid = losses.PatchGrid(cfg.grid[0], cfg.grid[1], batch.view1.shape[2], batch.view1.shape[3])
            bundle = compute_losses(model, batch, grid, cfg.tau, with_region=with_region)
            g = batch.view1.shape[0]
            if m >= bundle.r_views.shape[1]:
                raise ValueError(
                    f"target channel {m} out of range for {bundle.r_views.shape[1]} clusters"
                )
            r_m = bundle.r_views[:g, m : m + 1]

            loss_d = None
            loss_adv = None
            if cfg.adv_weight > 0:
                # discriminator step on detached generator output
                ref_masks = refs.sample(ref_rng, g, r_m.shape[2:], augment=cfg.augment_refs)
                ref_masks = ref_masks.to(r_m.device)
                d_real = discriminator(ref_masks)
                d_fake = discriminator(r_m.detach())
                loss_d = _bce_to_constant(d_real, 1.0) + _bce_to_constant(d_fake, 0.0)
                d_opt.zero_grad()
                loss_d.backward()
                d_opt.step()
                d_hits += int(((d_real > 0.5).all() and (d_fake < 0.5).all()))
                d_total += 1
                loss_adv = _bce_to_constant(discriminator(r_m), 1.0)

            total = bundle.weighted_total(cfg.region_weight, cfg.entropy_weight)
            if loss_adv is not None:
                total = total + cfg.adv_weight * loss_adv
            if not torch.isfinite(total):
                raise RuntimeError(f"non-finite loss at iteration {batch_index} (epoch {epoch})")
            g_opt.zero_grad()
            total.backward()
            g_opt.step()
            rows.append(
                {
                    "iteration": batch_index,
                    "epoch": epoch,
                    "loss_pd": bundle.loss_pd.item(),
                    "loss_hm": bundle.loss_hm.item(),
                    "loss_rd": bundle.loss_rd.item() if bundle.loss_rd is not None else 0.0,
                    "loss_entropy": bundle.loss_entropy.item() if bundle.loss_entropy is not None else 0.0,
                    "loss_d": loss_d.item() if loss_d is not None else 0.0,
                    "loss_adv": loss_adv.item() if loss_adv is not None else 0.0,
                    "total": total.item(),
                }
            )
            batch_index += 1
        if d_total and d_hits == d_total:
            warnings.warn(
                f"discriminator classified every sample correctly through epoch {epoch}; "
                "possible mode collapse"
            )
        if cfg.select_by_density_kl:
            kl = density_kl_diagnostic(model, probe_images, refs, m)
            kl_trace.append(kl)
            if kl < best_kl:
                best_kl, best_epoch = kl, epoch
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_path = out_dir / "checkpoints" / "shape_guided.npz"
        save_checkpoint(ckpt_path, model, kind="embed",
                        meta={"epoch": start_epoch + cfg.epochs, "target_channel": m})
        save_checkpoint(out_dir / "checkpoints" / "shape_discriminator.npz",
                        discriminator, kind="discriminator")
    return ShapeGuidedResult(model=model, discriminator=discriminator, trace=rows,
                             checkpoint_path=ckpt_path, kl_trace=kl_trace,
                             selected_epoch=best_epoch)


# ----------------------------------------------------------------------
# refinement by clustering
# ----------------------------------------------------------------------

def cluster_probabilities(v: torch.Tensor, r: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-pixel softmax over cosine(prototype_c, v) for one image.

    ``v`` is (K, H, W) unit embeddings, ``r`` (C, H, W); returns (C, H, W)
    summing to 1 over channels at every pixel.
    """
    bank = losses.region_prototypes(v[None], r[None])
    protos = bank.image_prototypes[0]  # (C, K)
    sims = torch.einsum("ck,khw->chw", protos, v)
    return torch.softmax(sims / tau, dim=0)


def cluster_refine(v: torch.Tensor, r: torch.Tensor, m: int, tau: float) -> torch.Tensor:
    """Probability of assigning each pixel to the m-th image prototype."""
    probs = cluster_probabilities(v, r, tau)
    if not 0 <= m < probs.shape[0]:
        raise ValueError(f"class index {m} out of range for {probs.shape[0]} prototypes")
    return probs[m]


# ----------------------------------------------------------------------
# pseudo-labels with uncertainty
# ----------------------------------------------------------------------

@dataclass
class UncertaintyBundle:
    pseudo_label: np.ndarray   # (H, W) uint8 in {0, 1}
    uncertainty: np.ndarray    # (H, W) float32 in [0, ln 2]
    ensemble_size: int


def pseudo_label_uncertainty(model, image: np.ndarray, m: int, ensemble: int = 30,
                             tau: float = 0.1) -> UncertaintyBundle:
    """Ensemble invertible-TTA cluster refinements into a pseudo-label and
    a mean binary-entropy uncertainty map, both in source coordinates.

    A pixel is labeled foreground only when the ensemble mean is strictly
    above one half.
    """
    if ensemble < 1:
        raise ValueError("ensemble size must be positive")
    model.eval()
    mean = np.zeros(image.shape[:2], dtype=np.float64)
    entropy = np.zeros(image.shape[:2], dtype=np.float64)
    for e in range(ensemble):
        warped, inverse = invertible_tta(image, e)
        x = torch.from_numpy(warped.transpose(2, 0, 1)[None].copy()).to(model_device(model))
        with torch.no_grad():
            v, r = model(x)
            probs = cluster_refine(v[0], r[0], m, tau).cpu().numpy().astype(np.float64)
        aligned = inverse(probs)
        clamped = np.clip(aligned, PROB_EPS, 1.0 - PROB_EPS)
        mean += aligned
        entropy += -clamped * np.log(clamped) - (1.0 - clamped) * np.log(1.0 - clamped)
    mean /= ensemble
    entropy /= ensemble
    return UncertaintyBundle(
        pseudo_label=(mean > 0.5).astype(np.uint8),
        uncertainty=entropy.astype(np.float32),
        ensemble_size=ensemble,
    )


def save_bundles(directory, names: list[str], bundles: list[UncertaintyBundle]) -> Path:
    """Persist bundles as label PNGs plus float32 uncertainty rasters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, bundle in zip(names, bundles):
        label_path = directory / f"{name}_label.png"
        uncert_path = directory / f"{name}_uncert.tiff"
        save_mask(label_path, bundle.pseudo_label)
        if not cv2.imwrite(str(uncert_path), bundle.uncertainty):
            raise IOError(f"could not write uncertainty raster {uncert_path}")
        entries.append(ManifestEntry(Path(label_path.name), Path(uncert_path.name)))
    manifest = directory / "bundles.txt"
    write_manifest(manifest, entries)
    return manifest


def load_bundles(manifest) -> list[UncertaintyBundle]:
    out = []
    for entry in read_manifest(manifest):
        label = load_mask(entry.image_path)
        uncert = cv2.imread(str(entry.mask_path), cv2.IMREAD_UNCHANGED)
        if uncert is None:
            raise FileNotFoundError(f"could not read uncertainty raster {entry.mask_path}")
        out.append(UncertaintyBundle(pseudo_label=label, uncertainty=uncert.astype(np.float32),
                                     ensemble_size=0))
    return out


# ----------------------------------------------------------------------
# refinement by retraining
# ----------------------------------------------------------------------

@dataclass
class RefineConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 4
    weight_mode: str = "uncertainty"  # or "certainty": weight = ln2 - u

    def __post_init__(self):
        if self.weight_mode not in ("uncertainty", "certainty"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid refinement configuration")


def retrain_refiner(seg_net, images: list[np.ndarray], bundles: list[UncertaintyBundle],
                    cfg: RefineConfig, seed: int = 0) -> list[dict]:
    """Train a plain segmentation network on pseudo-labels with per-pixel
    weights; returns the per-epoch loss trace."""
    if len(images) != len(bundles) or not images:
        raise ValueError("need one bundle per image")
    device = model_device(seg_net)
    xs = torch.from_numpy(np.stack([im.transpose(2, 0, 1) for im in images])).to(device)
    labels = torch.from_numpy(np.stack([b.pseudo_label for b in bundles])[:, None].astype(np.float32)).to(device)
    weights = torch.from_numpy(np.stack([b.uncertainty for b in bundles])[:, None]).to(device)
    if cfg.weight_mode == "certainty":
        weights = LN2 - weights
    rng = substream(seed, "refine")
    optimizer = torch.optim.Adam(seg_net.parameters(), lr=cfg.lr)
    rows = []
    seg_net.train()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            pred = seg_net(xs[idx])
            loss = losses.weighted_bce(pred, labels[idx], weights[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite refinement loss in epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            steps += 1
        rows.append({"epoch": epoch, "loss": epoch_loss / steps})
    return rows


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------

PREDICT_MODES = ("raw", "cluster", "refined")


def predict_segmentation(checkpoint_path, image: np.ndarray, mode: str,
                         target_channel: int = 0, tau: float = 0.1,
                         threshold: float = 0.5):
    """(binary mask, probability map) for one image under the given mode.

    ``raw`` reads the clustering branch's target channel, ``cluster``
    applies prototype refinement, ``refined`` runs a retrained
    segmentation network; the checkpoint kind must match the mode.
    """
    if mode not in PREDICT_MODES:
        raise ValueError(f"unknown prediction mode {mode!r}")
    ckpt = load_checkpoint(checkpoint_path)
    needed = "seg" if mode == "refined" else "embed"
    if ckpt.kind != needed:
        raise ValueError(f"mode {mode!r} needs a {needed!r} checkpoint, got {ckpt.kind!r}")
    model = ckpt.build()
    model.eval()
    x = torch.from_numpy(image.transpose(2, 0, 1)[None].copy()).to(model_device(model))
    with torch.no_grad():
        if mode == "refined":
            prob = model(x)[0, 0].cpu().numpy()
        else:
            v, r = model(x)
            if mode == "raw":
                prob = r[0, target_channel].cpu().numpy()
            else:
                prob = cluster_refine(v[0], r[0], target_channel, tau).cpu().numpy()
    return (prob > threshold).astype(np.uint8), prob
