"""Center-sensitive one-shot landmark localization.

A center-weighted window kernel replaces uniform patch averaging during
patch-discrimination training, and at test time a point is located by
matching the support image's dense center-sensitive embedding at the
labeled pixel against the query's dense embedding map.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ldlearn import losses
from ldlearn.augment import GroupBatch
from ldlearn.losses import _unit_direction
from ldlearn.pretrain import PretrainConfig, learning_rate


@dataclass(frozen=True)
class CenterKernel:
    """Window weights decaying with normalized distance from the center.

    weights(h, w) = exp(-(dis_h^2 + dis_w^2) / (2 sigma^2)) with
    dis = position / center - 1 and center at half the window, so the peak
    value 1 sits at the (possibly half-pixel offset) window center.
    """

    weights: np.ndarray
    sigma: float

    @property
    def window(self) -> tuple[int, int]:
        return self.weights.shape


def center_kernel(window, sigma: float = 0.5) -> CenterKernel:
    if isinstance(window, int):
        window = (window, window)
    wh, ww = window
    if wh < 1 or ww < 1:
        raise ValueError("window must be positive")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h_cen, w_cen = 0.5 * wh, 0.5 * ww
    hs = np.arange(wh, dtype=np.float64)[:, None] / h_cen - 1.0
    ws = np.arange(ww, dtype=np.float64)[None, :] / w_cen - 1.0
    weights = np.exp(-(hs**2 + ws**2) / (2.0 * sigma**2))
    return CenterKernel(weights=weights, sigma=float(sigma))


def uniform_kernel(window) -> CenterKernel:
    """All-ones window; reduces the pooling to plain averaging direction."""
    if isinstance(window, int):
        window = (window, window)
    return CenterKernel(weights=np.ones(window, dtype=np.float64), sigma=math.inf)


def window_grid(image_size, window) -> list[tuple[int, int, int, int]]:
    """Top-left anchored boxes of a given window size, floor-count per axis.

    Unlike :class:`~ldlearn.losses.PatchGrid` this does not require exact
    divisibility; remainder pixels on the bottom/right edges are dropped.
    """
    h, w = image_size
    if isinstance(window, int):
        window = (window, window)
    wh, ww = window
    rows, cols = max(1, h // wh), max(1, w // ww)
    if wh > h or ww > w:
        raise ValueError(f"window {window} exceeds image size {image_size}")
    return [
        (r * wh, (r + 1) * wh, c * ww, (c + 1) * ww)
        for r in range(rows)
        for c in range(cols)
    ]


def _kernel_tensor(kernel: CenterKernel, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(kernel.weights).to(dtype=like.dtype, device=like.device)


def pool_windows(v: torch.Tensor, kernel: CenterKernel,
                 boxes: list[tuple[int, int, int, int]]) -> torch.Tensor:
    """Kernel-weighted window sums of (N, K, H, W) embeddings, unit-normalized.

    Returns (N, len(boxes), K); boxes must match the kernel window.
    """
    weights = _kernel_tensor(kernel, v)
    pooled = []
    for hb, he, wb, we in boxes:
        if (he - hb, we - wb) != kernel.window:
            raise ValueError(f"box {(hb, he, wb, we)} does not match kernel window {kernel.window}")
        pooled.append(torch.einsum("nkhw,hw->nk", v[:, :, hb:he, wb:we], weights))
    stacked = torch.stack(pooled, dim=1)
    return _unit_direction(stacked, dim=-1, context="pool_windows")


def dense_pool(v: torch.Tensor, kernel: CenterKernel) -> torch.Tensor:
    """Sliding-window kernel filtering of (N, K, H, W), zero padded to the
    input size, followed by per-pixel L2 normalization.

    The value at pixel (h + pad_top, w + pad_left) equals the grid pooling
    of the window anchored at (h, w); boundary pixels pool attenuated sums
    because zeros enter the window.
    """
    wh, ww = kernel.window
    if wh > v.shape[2] or ww > v.shape[3]:
        raise ValueError(f"kernel window {kernel.window} exceeds embedding size {tuple(v.shape[2:])}")
    weights = _kernel_tensor(kernel, v).reshape(1, 1, wh, ww).expand(v.shape[1], 1, wh, ww)
    pad = ((ww - 1) // 2, ww // 2, (wh - 1) // 2, wh // 2)  # l, r, t, b
    filtered = F.conv2d(F.pad(v, pad), weights, groups=v.shape[1])
    return _unit_direction(filtered, dim=1, context="dense_pool")


def dense_anchor_offset(kernel: CenterKernel) -> tuple[int, int]:
    """Offset mapping a grid box anchor to its dense-map pixel."""
    wh, ww = kernel.window
    return (wh - 1) // 2, (ww - 1) // 2


# ----------------------------------------------------------------------
# training with multi-size center-sensitive pooling
# ----------------------------------------------------------------------

@dataclass
class OneshotTrainConfig:
    epochs: int = 100
    iters_per_epoch: int = 1000
    lr: float = 1e-3
    lr_halving_period: int = 10
    size_range: tuple[int, int] = (28, 112)
    sigma: float = 0.5
    tau: float = 0.1

    def __post_init__(self):
        if self.size_range[0] < 1 or self.size_range[0] > self.size_range[1]:
            raise ValueError("invalid pooling size range")


def sample_pooling_size(rng: np.random.Generator, size_range: tuple[int, int]) -> int:
    return int(rng.integers(size_range[0], size_range[1] + 1))


def oneshot_losses(model, batch: GroupBatch, kernel: CenterKernel, tau: float):
    """Patch-discrimination + mixup losses with center-sensitive pooling."""
    g = batch.view1.shape[0]
    x = torch.cat([batch.view1, batch.view2, batch.mixed], dim=0)
    v, _ = model(x)
    boxes = window_grid(v.shape[2:], kernel.window)
    s = pool_windows(v[:g], kernel, boxes)
    s_hat = pool_windows(v[g : 2 * g], kernel, boxes)
    loss_pd = losses.patch_discrimination_loss(s, s_hat, tau)
    targets = torch.stack(
        [
            losses.mixup_target(s[n1], s[n2], float(batch.lams[gi]))
            for gi, (n1, n2) in enumerate(batch.parents)
        ]
    )
    s_tilde = pool_windows(v[2 * g :], kernel, boxes)
    loss_hm = losses.hypersphere_mixup_loss(s_tilde, targets, tau)
    return loss_pd, loss_hm


def train_center_sensitive(model, data, cfg: OneshotTrainConfig, size_rng: np.random.Generator,
                           fixed_size: int | None = None) -> list[dict]:
    """Train with a per-iteration random pooling size; returns the trace.

    ``fixed_size`` pins the pooling size (used by reduction checks).
    """
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rows = []
    batch_index = 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(cfg.iters_per_epoch):
            size = fixed_size if fixed_size is not None else sample_pooling_size(size_rng, cfg.size_range)
            kernel = center_kernel(size, cfg.sigma)
            batch = data.batch(batch_index)
            loss_pd, loss_hm = oneshot_losses(model, batch, kernel, cfg.tau)
            total = loss_pd + loss_hm
            if not torch.isfinite(total):
                raise RuntimeError(f"non-finite loss at iteration {batch_index}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            rows.append(
                {
                    "iteration": batch_index,
                    "epoch": epoch,
                    "pool_size": size,
                    "loss_pd": loss_pd.item(),
                    "loss_hm": loss_hm.item(),
                    "total": total.item(),
                }
            )
            batch_index += 1
    return rows


# ----------------------------------------------------------------------
# test-stage localization
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SupportAnnotation:
    image: np.ndarray
    point: tuple[int, int]

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if not (0 <= self.point[0] < h and 0 <= self.point[1] < w):
            raise ValueError(f"labeled point {self.point} outside image bounds {(h, w)}")


@dataclass
class LocalizationResult:
    point: tuple[int, int]
    argmax: tuple[int, int]
    similarity: np.ndarray


def _embed(model, image: np.ndarray) -> torch.Tensor:
    from ldlearn.nets import model_device

    x = torch.from_numpy(image.transpose(2, 0, 1)[None].copy()).to(model_device(model))
    with torch.no_grad():
        v, _ = model(x)
    return v.cpu()


def dense_embedding(model, image: np.ndarray, kernel: CenterKernel) -> torch.Tensor:
    """Center-sensitive dense embedding map (K, H, W) of one image."""
    return dense_pool(_embed(model, image), kernel)[0]


def localize(support: SupportAnnotation, query: np.ndarray, pooling_size: int,
             model, sigma: float = 0.5, kernel: CenterKernel | None = None) -> LocalizationResult:
    """Match the support's labeled-pixel embedding inside the query image.

    The similarity map is thresholded at 95% of its maximum and the
    centroid of the 8-connected component containing the argmax is the
    final point (ties at the argmax break row-major).
    """
    h, w = query.shape[:2]
    if pooling_size > h or pooling_size > w:
        raise ValueError(f"pooling size {pooling_size} exceeds query size {(h, w)}")
    if kernel is None:
        kernel = center_kernel(pooling_size, sigma)
    model.eval()
    support_map = dense_embedding(model, support.image, kernel)
    target = support_map[:, support.point[0], support.point[1]]
    query_map = dense_embedding(model, query, kernel)
    sim = torch.einsum("k,khw->hw", target, query_map).numpy()

    flat_idx = int(np.argmax(sim))
    h_max, w_max = np.unravel_index(flat_idx, sim.shape)
    peak = sim[h_max, w_max]
    threshold = 0.95 * peak if peak > 0 else peak
    region = sim >= threshold
    labels, _ = ndimage.label(region, structure=np.ones((3, 3), dtype=int))
    component = labels == labels[h_max, w_max]
    ys, xs = np.nonzero(component)
    h_d = int(math.floor(ys.mean() + 0.5))
    w_d = int(math.floor(xs.mean() + 0.5))
    return LocalizationResult(point=(h_d, w_d), argmax=(int(h_max), int(w_max)), similarity=sim)


def localization_distance(pred: tuple[int, int], truth: tuple[int, int]) -> float:
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1])


DEFAULT_FRACTIONS = (0.05, 0.1, 0.15, 0.2, 0.25)


def accuracy_at_thresholds(predictions, truths, pooling_size: int,
                           fractions=DEFAULT_FRACTIONS) -> dict:
    """Fraction of predictions within f * pooling size of the truth (strict <),
    per threshold fraction, plus their arithmetic mean."""
    if len(predictions) == 0 or len(predictions) != len(truths):
        raise ValueError("prediction and truth lists must be nonempty and aligned")
    distances = [localization_distance(p, t) for p, t in zip(predictions, truths)]
    rates = {}
    for frac in fractions:
        limit = frac * pooling_size
        rates[frac] = sum(d < limit for d in distances) / len(distances)
    rates["mean"] = sum(rates[f] for f in fractions) / len(fractions)
    return rates


def write_localization_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("query", "h_d", "w_d", "distance"))
        writer.writeheader()
        writer.writerows(rows)
