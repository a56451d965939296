"""Downstream fine-tuning of pretrained encoders for supervised segmentation.

Two-phase schedule: the decoder trains alone against a frozen encoder
first, then everything trains jointly; the checkpoint with the lowest
validation dice loss is retained.
"""

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ldlearn.losses import dice_loss
from ldlearn.nets import NetworkConfig, build_seg_net, load_checkpoint, model_device
from ldlearn.seeding import substream


@dataclass
class FinetuneConfig:
    decoder_only_epochs: int = 100
    full_epochs: int = 100
    lr: float = 1e-3
    val_fraction: float = 0.2
    batch_size: int = 4
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.decoder_only_epochs < 1 or self.full_epochs < 0:
            raise ValueError("epoch counts must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")


@dataclass
class FinetuneResult:
    model: torch.nn.Module
    best_state: dict
    best_val_loss: float
    best_epoch: int
    trace: list[dict]
    train_indices: np.ndarray
    val_indices: np.ndarray


def _to_tensors(records):
    xs = torch.from_numpy(np.stack([im.transpose(2, 0, 1) for im, _ in records]))
    ys = torch.from_numpy(np.stack([mask for _, mask in records])[:, None].astype(np.float32))
    return xs, ys


def split_train_val(n: int, val_fraction: float, seed: int):
    """Deterministic disjoint split; at least one sample on each side."""
    order = substream(seed, "finetune-split").permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return order[n_val:], order[:n_val]


def _validation_loss(model, xs, ys, idx, batch_size):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            sel = torch.from_numpy(idx[start : start + batch_size].copy())
            total += dice_loss(model(xs[sel]), ys[sel]).item() * len(sel)
            count += len(sel)
    return total / count


def finetune(encoder_checkpoint, records, net_cfg: NetworkConfig,
             cfg: FinetuneConfig) -> FinetuneResult:
    """Fine-tune a segmentation network on (image, binary mask) pairs.

    ``encoder_checkpoint`` is a pretrained embed-net checkpoint path, or
    None for the from-scratch baseline.  Phase one freezes the encoder
    (parameters and running statistics); phase two trains everything.
    """
    if len(records) < 2:
        raise ValueError("need at least two labeled records to split train/val")
    torch.manual_seed(substream(cfg.seed, "finetune-init").integers(0, 2**63 - 1))
    model = build_seg_net(net_cfg, out_channels=1)
    if encoder_checkpoint is not None:
        ckpt = load_checkpoint(encoder_checkpoint)
        if ckpt.kind != "embed":
            raise ValueError(f"expected an embed checkpoint, got kind {ckpt.kind!r}")
        source = ckpt.build()
        model.encoder.load_state_dict(source.encoder.state_dict())

    xs, ys = _to_tensors(records)
    device = model_device(model)
    xs, ys = xs.to(device), ys.to(device)
    train_idx, val_idx = split_train_val(len(records), cfg.val_fraction, cfg.seed)
    rng = substream(cfg.seed, "finetune-batches")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    best_state, best_val, best_epoch = None, float("inf"), -1
    trace = []
    total_epochs = cfg.decoder_only_epochs + cfg.full_epochs
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    for epoch in range(total_epochs):
        if epoch == cfg.decoder_only_epochs:
            for p in model.encoder.parameters():
                p.requires_grad_(True)
        phase = "decoder" if epoch < cfg.decoder_only_epochs else "full"
        train_loss = _run_phase_epoch(model, xs, ys, train_idx, optimizer, cfg, rng, phase)
        val_loss = _validation_loss(model, xs, ys, val_idx, cfg.batch_size)
        trace.append({"epoch": epoch, "phase": phase, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return FinetuneResult(
        model=model, best_state=best_state, best_val_loss=best_val, best_epoch=best_epoch,
        trace=trace, train_indices=train_idx, val_indices=val_idx,
    )


def _run_phase_epoch(model, xs, ys, idx, optimizer, cfg, rng, phase):
    model.train()
    if phase == "decoder":
        # frozen encoder stays in eval mode so its running stats hold still
        model.encoder.eval()
    order = rng.permutation(len(idx))
    total, steps = 0.0, 0
    for start in range(0, len(idx), cfg.batch_size):
        sel = torch.from_numpy(idx[order[start : start + cfg.batch_size]].copy())
        loss = dice_loss(model(xs[sel]), ys[sel])
        if not torch.isfinite(loss):
            raise RuntimeError("non-finite fine-tuning loss")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item()
        steps += 1
    return total / steps


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity 2|Y ∩ Y'| / (|Y| + |Y'|); two empty masks score 1."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / denom)


def evaluate_dsc(model, records, threshold: float = 0.5, batch_size: int = 8):
    """Per-image DSC of thresholded predictions plus their mean."""
    model.eval()
    xs, _ = _to_tensors(records)
    xs = xs.to(model_device(model))
    scores = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            preds = model(xs[start : start + batch_size])
            for offset in range(preds.shape[0]):
                mask = (preds[offset, 0].cpu().numpy() > threshold).astype(np.uint8)
                scores.append(dsc(mask, records[start + offset][1]))
    return scores, float(np.mean(scores))


# ----------------------------------------------------------------------
# annotation-fraction sweeps
# ----------------------------------------------------------------------

def fraction_subsets(n: int, fractions, seed: int) -> dict[float, np.ndarray]:
    """Nested prefix subsets of one seeded permutation, per fraction.

    Indices are returned sorted, so fraction 1.0 is the dataset in its
    original order and smaller fractions are strict subsets of larger ones.
    """
    order = substream(seed, "fraction-sweep").permutation(n)
    subsets = {}
    for frac in fractions:
        count = int(round(frac * n))
        if count < 2:
            raise ValueError(f"fraction {frac} keeps {count} training images; need at least 2")
        subsets[frac] = np.sort(order[:count])
    return subsets


def fraction_sweep(pretrained_checkpoint, train_records, test_records,
                   net_cfg: NetworkConfig, cfg: FinetuneConfig,
                   fractions=(0.2, 0.4, 0.6, 0.8, 1.0)) -> list[dict]:
    """Fine-tune pretrained vs scratch on nested label subsets.

    Returns one row per (fraction, init) with the mean test DSC.
    """
    subsets = fraction_subsets(len(train_records), fractions, cfg.seed)
    rows = []
    for frac in fractions:
        subset = [train_records[i] for i in subsets[frac]]
        for init, ckpt in (("pretrained", pretrained_checkpoint), ("scratch", None)):
            result = finetune(ckpt, subset, net_cfg, cfg)
            _, mean = evaluate_dsc(result.model, test_records, cfg.threshold)
            rows.append({"fraction": frac, "init": init, "mean_dsc": mean,
                         "best_val_loss": result.best_val_loss})
    return rows
