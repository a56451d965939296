"""Contrastive losses over patch and region embeddings.

All losses operate on unit-norm embedding vectors and are differentiable
end to end, including through every normalization step.  The joint
recognition losses share one mechanism: softmax recognition probabilities
over a candidate set at temperature ``tau``, combined into the probability
of jointly recognizing the correct candidate *and* rejecting every wrong
one, whose negative log is minimized.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch

# Probabilities are clamped to this band before any logarithm.
PROB_EPS = 1e-7
# Pooled sums with a smaller norm than this carry no usable direction.
DEGENERATE_NORM = 1e-8


class DegenerateEmbeddingWarning(UserWarning):
    """A pooled embedding summed to (near) zero and was replaced by e1."""


def _unit_direction(total: torch.Tensor, dim: int, context: str) -> torch.Tensor:
    """L2-normalize ``total`` along ``dim``; near-zero sums become e1.

    Gradients flow through the normalization on the non-degenerate path;
    the e1 substitute is a constant.
    """
    norm = torch.linalg.vector_norm(total, dim=dim, keepdim=True)
    degenerate = norm < DEGENERATE_NORM
    if degenerate.any():
        warnings.warn(
            f"{context}: {int(degenerate.sum())} pooled vector(s) had norm < "
            f"{DEGENERATE_NORM}; substituting the first basis vector",
            DegenerateEmbeddingWarning,
            stacklevel=3,
        )
        safe = torch.where(degenerate, torch.ones_like(norm), norm)
        out = total / safe
        e1 = torch.zeros_like(out)
        e1.select(dim, 0).fill_(1.0)
        return torch.where(degenerate, e1, out)
    return total / norm


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return float(tau)


@dataclass(frozen=True)
class PatchGrid:
    """Even decomposition of an H x W image into rows x cols patches.

    Patch index i runs row-major: i = row * cols + col.  The boxes are
    half-open ``[h_b, h_e) x [w_b, w_e)`` and tile the image exactly.
    """

    rows: int
    cols: int
    height: int
    width: int

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("patch counts must be positive")
        if self.height % self.rows != 0 or self.width % self.cols != 0:
            raise ValueError(
                f"image size {self.height}x{self.width} is not divisible by "
                f"patch counts {self.rows}x{self.cols}"
            )

    @property
    def patch_height(self) -> int:
        return self.height // self.rows

    @property
    def patch_width(self) -> int:
        return self.width // self.cols

    def __len__(self) -> int:
        return self.rows * self.cols

    def bbox(self, i: int) -> tuple[int, int, int, int]:
        """(h_b, h_e, w_b, w_e) of patch i."""
        if not 0 <= i < len(self):
            raise IndexError(f"patch index {i} out of range for {len(self)} patches")
        row, col = divmod(i, self.cols)
        ph, pw = self.patch_height, self.patch_width
        return row * ph, (row + 1) * ph, col * pw, (col + 1) * pw


def patch_pool(v: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Pool pixel embeddings into unit patch embeddings.

    ``v`` is (N, K, H, W); the result is (N, rows*cols, K) where each patch
    vector is the L2-normalized sum of the pixel embeddings inside its box.
    """
    if v.ndim != 4:
        raise ValueError(f"expected (N, K, H, W) embeddings, got shape {tuple(v.shape)}")
    n, k, h, w = v.shape
    if (h, w) != (grid.height, grid.width):
        raise ValueError(f"grid is {grid.height}x{grid.width} but embeddings are {h}x{w}")
    sums = v.reshape(n, k, grid.rows, grid.patch_height, grid.cols, grid.patch_width).sum(dim=(3, 5))
    sums = sums.permute(0, 2, 3, 1).reshape(n, len(grid), k)
    return _unit_direction(sums, dim=-1, context="patch_pool")


def recognition_prob(query: torch.Tensor, candidates: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax recognition probabilities of ``query`` over unit ``candidates``.

    ``query`` is (K,), ``candidates`` is (M, K); both unit-norm, so cosine
    similarity reduces to a dot product.  Returns (M,) summing to 1.
    """
    tau = _check_tau(tau)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ValueError("candidate list must be a nonempty (M, K) array")
    return torch.softmax(candidates @ query / tau, dim=0)


def _joint_recognition_nll(sims: torch.Tensor, tau: float, match: torch.Tensor) -> torch.Tensor:
    """Sum over rows of -log P(match) - sum_{j != match} log(1 - P(j)).

    ``sims`` is a (Q, M) cosine-similarity matrix of Q queries against M
    candidates; ``match`` gives the correct candidate per row.
    """
    probs = torch.softmax(sims / tau, dim=1)
    probs = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    rows = torch.arange(sims.shape[0], device=sims.device)
    correct = probs[rows, match]
    log_reject = torch.log1p(-probs)
    wrong_sum = log_reject.sum(dim=1) - log_reject[rows, match]
    return (-torch.log(correct) - wrong_sum).sum()


def patch_discrimination_loss(s: torch.Tensor, s_hat: torch.Tensor, tau: float) -> torch.Tensor:
    """Joint patch-recognition loss between two views of a batch.

    ``s`` holds the original views' patch embeddings, ``s_hat`` the
    augmented views', both (N, I, K) and index-aligned.  Every patch of
    every other image (and every other patch of the same image) in the
    batch acts as a negative.
    """
    tau = _check_tau(tau)
    if s.shape != s_hat.shape:
        raise ValueError(f"misaligned patch embeddings: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if s.ndim != 3 or s.shape[0] == 0 or s.shape[1] == 0:
        raise ValueError("patch embeddings must be a nonempty (N, I, K) array")
    flat = s.reshape(-1, s.shape[-1])
    flat_hat = s_hat.reshape(-1, s.shape[-1])
    sims = flat_hat @ flat.T
    match = torch.arange(flat.shape[0], device=s.device)
    return _joint_recognition_nll(sims, tau, match)


@dataclass
class PrototypeBank:
    """Per-image region vectors and batch-level class prototypes.

    ``image_prototypes`` is (N, C, K), ``class_prototypes`` (C, K); all
    rows unit-norm.  Both carry gradients back to the embeddings and the
    soft segmentation that produced them.
    """

    image_prototypes: torch.Tensor
    class_prototypes: torch.Tensor

    @property
    def num_images(self) -> int:
        return self.image_prototypes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.image_prototypes.shape[1]


def region_prototypes(v: torch.Tensor, r: torch.Tensor) -> PrototypeBank:
    """Build region vectors t_nc and class prototypes from (v, r) batches.

    Each region vector is the soft-segmentation-weighted sum of pixel
    embeddings, normalized; each class prototype is the normalized sum of
    that class's region vectors over the batch.
    """
    if v.ndim != 4 or r.ndim != 4:
        raise ValueError("expected (N, K, H, W) embeddings and (N, C, H, W) segmentations")
    if v.shape[0] != r.shape[0] or v.shape[2:] != r.shape[2:]:
        raise ValueError(f"misaligned shapes: v {tuple(v.shape)}, r {tuple(r.shape)}")
    if v.shape[0] == 0:
        raise ValueError("batch must contain at least one image")
    weighted = torch.einsum("nchw,nkhw->nck", r, v)
    image_protos = _unit_direction(weighted, dim=-1, context="region_prototypes (per image)")
    class_protos = _unit_direction(image_protos.sum(dim=0), dim=-1, context="region_prototypes (per class)")
    return PrototypeBank(image_prototypes=image_protos, class_prototypes=class_protos)


def region_discrimination_loss(bank: PrototypeBank, tau: float) -> torch.Tensor:
    """Joint region-recognition loss of image region vectors vs prototypes.

    For each (image, class) the correct prototype must be recognized and
    every other class's prototype rejected.
    """
    tau = _check_tau(tau)
    t = bank.image_prototypes
    protos = bank.class_prototypes
    n, c, k = t.shape
    sims = (t.reshape(n * c, k) @ protos.T)
    match = torch.arange(c, device=t.device).repeat(n)
    return _joint_recognition_nll(sims, tau, match)


def mixup_target(s1: torch.Tensor, s2: torch.Tensor, lam: float) -> torch.Tensor:
    """Unit-norm interpolation target: normalize(lam*s1 + (1-lam)*s2)."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"mixing coefficient must lie in (0, 1), got {lam}")
    if s1.shape != s2.shape:
        raise ValueError(f"misaligned embeddings: {tuple(s1.shape)} vs {tuple(s2.shape)}")
    return _unit_direction(lam * s1 + (1.0 - lam) * s2, dim=-1, context="mixup_target")


def hypersphere_mixup_loss(s_tilde: torch.Tensor, s_bar: torch.Tensor, tau: float) -> torch.Tensor:
    """Joint recognition of mixed-image patch embeddings against their targets.

    ``s_tilde`` comes from the forward pass on blended images, ``s_bar``
    from :func:`mixup_target`; shapes (G, I, K), index-aligned.  All other
    target vectors in the batch are negatives.
    """
    tau = _check_tau(tau)
    if s_tilde.shape != s_bar.shape:
        raise ValueError(f"misaligned embeddings: {tuple(s_tilde.shape)} vs {tuple(s_bar.shape)}")
    if s_tilde.ndim != 3 or s_tilde.shape[0] == 0 or s_tilde.shape[1] == 0:
        raise ValueError("patch embeddings must be a nonempty (G, I, K) array")
    queries = s_tilde.reshape(-1, s_tilde.shape[-1])
    targets = s_bar.reshape(-1, s_bar.shape[-1])
    sims = queries @ targets.T
    match = torch.arange(targets.shape[0], device=targets.device)
    return _joint_recognition_nll(sims, tau, match)


def entropy_loss(r: torch.Tensor) -> torch.Tensor:
    """Mean per-element binary entropy of a soft segmentation, natural log."""
    rc = r.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return (-rc * torch.log(rc) - (1.0 - rc) * torch.log(1.0 - rc)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft dice loss 1 - 2(sum(pred*target)+eps) / (sum(pred)+sum(target)+eps).

    The smoothing term makes the loss well-defined on empty masks at the
    price of a slightly negative value on perfect agreement.
    """
    if pred.shape != target.shape:
        raise ValueError(f"misaligned masks: {tuple(pred.shape)} vs {tuple(target.shape)}")
    inter = (pred * target).sum()
    return 1.0 - 2.0 * (inter + eps) / (pred.sum() + target.sum() + eps)


def weighted_bce(pred: torch.Tensor, label: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Pixel-weighted binary cross entropy, averaged over all pixels."""
    if pred.shape != label.shape or pred.shape != weight.shape:
        raise ValueError("pred, label and weight must share one shape")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    terms = weight * (label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))
    return -terms.sum() / pred.numel()


def kl_divergence(p, q) -> float:
    """KL divergence sum(p * log(p/q)) of two discrete distributions.

    Returns ``inf`` where p puts mass on a zero-probability q bin.  This is
    a monitoring diagnostic (e.g. over mask-density histograms), not a
    training loss, hence plain floats.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share one support")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("distributions must sum to 1")
    support = p > 0
    if (q[support] == 0).any():
        return float("inf")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))
