"""Two-stage self-supervised schedule.

Stage one (warmup) minimizes the patch-discrimination and mixup losses;
stage two adds the weighted region-discrimination and entropy terms.  One
global epoch counter spans both stages so the halving learning-rate
schedule runs through uninterrupted.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ldlearn import losses
from ldlearn.augment import GroupBatch
from ldlearn.losses import PatchGrid
from ldlearn.nets import load_checkpoint, model_device, save_checkpoint

TRACE_COLUMNS = ("iteration", "epoch", "loss_pd", "loss_hm", "loss_rd", "loss_entropy", "total")


@dataclass
class PretrainConfig:
    warmup_epochs: int = 20
    region_epochs: int = 80
    iters_per_epoch: int = 1000
    lr: float = 1e-3
    lr_halving_period: int = 10
    region_weight: float = 10.0
    entropy_weight: float = 0.1
    grid: tuple[int, int] = (8, 8)
    tau: float = 0.1
    grad_clip: float | None = None

    def __post_init__(self):
        if min(self.warmup_epochs, self.region_epochs) < 0 or self.iters_per_epoch < 1:
            raise ValueError("epoch and iteration counts must be positive")
        if self.lr <= 0 or self.lr_halving_period < 1:
            raise ValueError("invalid learning-rate schedule")
        if self.region_weight < 0 or self.entropy_weight < 0:
            raise ValueError("loss weights must be nonnegative")


def learning_rate(cfg: PretrainConfig, epoch: int) -> float:
    """lr(epoch) = lr0 * 2^-(epoch // halving period)."""
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass
class LossBundle:
    """Per-iteration losses plus the forward outputs they came from."""

    loss_pd: torch.Tensor
    loss_hm: torch.Tensor
    loss_rd: torch.Tensor | None
    loss_entropy: torch.Tensor | None
    v_views: torch.Tensor  # embeddings of both augmented view sets (2G, K, H, W)
    r_views: torch.Tensor  # soft segmentations of both view sets (2G, C, H, W)

    def weighted_total(self, region_weight: float, entropy_weight: float) -> torch.Tensor:
        total = self.loss_pd + self.loss_hm
        if self.loss_rd is not None:
            total = total + region_weight * self.loss_rd
        if self.loss_entropy is not None:
            total = total + entropy_weight * self.loss_entropy
        return total


def compute_losses(model, batch: GroupBatch, grid: PatchGrid, tau: float,
                   with_region: bool) -> LossBundle:
    """One forward pass over all group tensors and the contrastive losses.

    Mixup targets interpolate the first views' patch embeddings with the
    batch's stored coefficients, so the targets stay consistent with the
    images that were blended.
    """
    g = batch.view1.shape[0]
    x = torch.cat([batch.view1, batch.view2, batch.mixed], dim=0)
    device = model_device(model)
    if x.device != device:
        x = x.to(device)
    v, r = model(x)
    v1, v2, vm = v[:g], v[g : 2 * g], v[2 * g :]

    s = losses.patch_pool(v1, grid)
    s_hat = losses.patch_pool(v2, grid)
    loss_pd = losses.patch_discrimination_loss(s, s_hat, tau)

    targets = torch.stack(
        [
            losses.mixup_target(s[n1], s[n2], float(batch.lams[gi]))
            for gi, (n1, n2) in enumerate(batch.parents)
        ]
    )
    s_tilde = losses.patch_pool(vm, grid)
    loss_hm = losses.hypersphere_mixup_loss(s_tilde, targets, tau)

    loss_rd = loss_entropy = None
    if with_region:
        bank = losses.region_prototypes(v[: 2 * g], r[: 2 * g])
        loss_rd = losses.region_discrimination_loss(bank, tau)
        loss_entropy = losses.entropy_loss(r[: 2 * g])
    return LossBundle(loss_pd, loss_hm, loss_rd, loss_entropy, v[: 2 * g], r[: 2 * g])


@dataclass
class StageResult:
    model: torch.nn.Module
    optimizer: torch.optim.Adam
    epoch: int          # next epoch to run
    batch_index: int    # next batch to consume
    trace: list[dict]
    checkpoint_path: Path | None = None


def _write_trace(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_trace(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [
            {k: (int(row[k]) if k in ("iteration", "epoch") else float(row[k])) for k in row}
            for row in csv.DictReader(fh)
        ]


# ----------------------------------------------------------------------
# optimizer state round trips through the checkpoint archive
# ----------------------------------------------------------------------

def _optimizer_arrays(optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            arrays[f"opt.{idx}.{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            )
    return arrays


def _restore_optimizer(optimizer, extras: dict[str, np.ndarray]):
    state: dict[int, dict] = {}
    for name, arr in extras.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        tensor = torch.from_numpy(arr.copy())
        entry[key] = tensor.to(torch.float32) if key == "step" else tensor
    loaded = optimizer.state_dict()
    loaded["state"] = state
    optimizer.load_state_dict(loaded)


def save_train_checkpoint(path, model, kind: str, optimizer, epoch: int, batch_index: int,
                          meta: dict | None = None):
    meta = dict(meta or {})
    meta.update({"epoch": epoch, "batch_index": batch_index})
    save_checkpoint(path, model, kind=kind, meta=meta, extra_arrays=_optimizer_arrays(optimizer))


def load_train_checkpoint(path):
    """Rebuild (model, optimizer, epoch, batch_index) from an archive."""
    ckpt = load_checkpoint(path)
    model = ckpt.build()
    optimizer = torch.optim.Adam(model.parameters())
    extras = ckpt.meta.get("__extras__", {})
    if extras:
        _restore_optimizer(optimizer, extras)
    return model, optimizer, int(ckpt.meta["epoch"]), int(ckpt.meta["batch_index"])


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

def _run_epochs(model, data, cfg: PretrainConfig, optimizer, start_epoch, end_epoch,
                batch_index, with_region, region_weight, entropy_weight) -> tuple[list[dict], int]:
    rows = []
    model.train()
    for epoch in range(start_epoch, end_epoch):
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(cfg.iters_per_epoch):
            batch = data.batch(batch_index)
            grid = PatchGrid(cfg.grid[0], cfg.grid[1], batch.view1.shape[2], batch.view1.shape[3])
            bundle = compute_losses(model, batch, grid, cfg.tau, with_region=with_region)
            total = bundle.weighted_total(region_weight, entropy_weight)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at iteration {batch_index} (epoch {epoch}): {total.item()}"
                )
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            rows.append(
                {
                    "iteration": batch_index,
                    "epoch": epoch,
                    "loss_pd": bundle.loss_pd.item(),
                    "loss_hm": bundle.loss_hm.item(),
                    "loss_rd": bundle.loss_rd.item() if bundle.loss_rd is not None else 0.0,
                    "loss_entropy": bundle.loss_entropy.item() if bundle.loss_entropy is not None else 0.0,
                    "total": total.item(),
                }
            )
            batch_index += 1
    return rows, batch_index


def _resolve_state(model, cfg, resume_from):
    if resume_from is not None:
        return load_train_checkpoint(resume_from)
    if model is None:
        raise ValueError("either a model or a checkpoint to resume from is required")
    return model, torch.optim.Adam(model.parameters(), lr=cfg.lr), 0, 0


def run_warmup(model, data, cfg: PretrainConfig, out_dir=None, resume_from=None) -> StageResult:
    """Patch discrimination with mixup for the first ``warmup_epochs``."""
    model, optimizer, epoch, batch_index = _resolve_state(model, cfg, resume_from)
    rows, batch_index = _run_epochs(
        model, data, cfg, optimizer, epoch, cfg.warmup_epochs, batch_index,
        with_region=False, region_weight=0.0, entropy_weight=0.0,
    )
    return _finish_stage(model, optimizer, cfg.warmup_epochs, batch_index, rows, out_dir, "warmup")


def run_region_stage(model, data, cfg: PretrainConfig, out_dir=None, resume_from=None) -> StageResult:
    """Joint patch + region training for the following ``region_epochs``.

    A region/entropy weight of zero skips the corresponding computation
    entirely, which makes the stage an exact continuation of the warmup.
    """
    model, optimizer, epoch, batch_index = _resolve_state(model, cfg, resume_from)
    epoch = max(epoch, cfg.warmup_epochs)
    end = cfg.warmup_epochs + cfg.region_epochs
    with_region = cfg.region_weight > 0 or cfg.entropy_weight > 0
    rows, batch_index = _run_epochs(
        model, data, cfg, optimizer, epoch, end, batch_index,
        with_region=with_region,
        region_weight=cfg.region_weight, entropy_weight=cfg.entropy_weight,
    )
    return _finish_stage(model, optimizer, end, batch_index, rows, out_dir, "region")


def _finish_stage(model, optimizer, epoch, batch_index, rows, out_dir, stage) -> StageResult:
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_path = out_dir / "checkpoints" / f"{stage}.npz"
        save_train_checkpoint(ckpt_path, model, "embed", optimizer, epoch, batch_index)
        _write_trace(out_dir / "traces" / f"{stage}.csv", rows)
    return StageResult(
        model=model, optimizer=optimizer, epoch=epoch, batch_index=batch_index,
        trace=rows, checkpoint_path=ckpt_path,
    )
