"""Command-line surface.

One YAML config file drives each command; the fully resolved configuration
(defaults filled in, device resolved) is snapshotted to
``<out_dir>/config.resolved`` so a run can be reproduced from its own
artifacts.  Artifacts live in a fixed layout under the run directory:
``checkpoints/``, ``traces/``, ``predictions/``, ``figures/``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

import argparse
import csv
import dataclasses
import os
import sys
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from ldlearn import augment, oneshot, shapeseg, transfer
from ldlearn.augment import (
    BatchSpec,
    GroupBatchProducer,
    SynthSpec,
    load_image,
    load_mask,
    read_manifest,
    save_image,
    save_mask,
    save_synth_dataset,
)
from ldlearn.nets import (
    DiscriminatorConfig,
    NetworkConfig,
    build_discriminator,
    build_embed_net,
    build_seg_net,
    load_checkpoint,
    save_checkpoint,
)
from ldlearn.oneshot import OneshotTrainConfig, SupportAnnotation
from ldlearn.pretrain import (
    PretrainConfig,
    learning_rate,
    run_region_stage,
    run_warmup,
)
from ldlearn.seeding import substream, substream_seed
from ldlearn.shapeseg import (
    RefineConfig,
    ReferenceMaskSet,
    ShapeGuidedConfig,
    predict_segmentation,
    pseudo_label_uncertainty,
    retrain_refiner,
    save_bundles,
    train_shape_guided,
)
from ldlearn.transfer import FinetuneConfig, dsc, evaluate_dsc, finetune, fraction_sweep

DEVICE_ENV_VAR = "LDLEARN_DEVICE"


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# config parsing: dataclass-backed sections with unknown-key rejection
# ----------------------------------------------------------------------

def _coerce_like(default, value):
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def parse_section(raw, cls, section: str):
    """Instantiate a dataclass section, rejecting unknown keys."""
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {k: _coerce_like(getattr(defaults, k), v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def load_config(path, sections: dict[str, type], scalars: dict[str, object]):
    """Read a YAML config with fixed scalar keys and dataclass sections."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    allowed = set(sections) | set(scalars)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    out = {}
    for key, default in scalars.items():
        value = raw.get(key, default)
        if value is None and default is None:
            raise ConfigError(f"missing required config key {key!r}")
        out[key] = _coerce_like(default, value)
    for key, cls in sections.items():
        out[key] = parse_section(raw.get(key), cls, key)
    return out


def resolve_device(requested: str) -> str:
    device = os.environ.get(DEVICE_ENV_VAR, "").strip() or requested
    try:
        torch.device(device)
    except RuntimeError as exc:
        raise ConfigError(f"invalid device {device!r}: {exc}") from exc
    return device


def _snapshot(out_dir: Path, config: dict):
    def plain(value):
        if dataclasses.is_dataclass(value):
            return {k: plain(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, tuple):
            return list(value)
        if isinstance(value, Path):
            return str(value)
        return value

    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = yaml.safe_dump({k: plain(v) for k, v in config.items()}, sort_keys=True)
    (out_dir / "config.resolved").write_text(rendered, encoding="utf-8")


def _run_dirs(out_dir: Path) -> dict[str, Path]:
    dirs = {name: out_dir / name for name in ("checkpoints", "traces", "predictions", "figures")}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def _load_images(manifest_path):
    entries = read_manifest(manifest_path)
    return entries, [load_image(e.image_path) for e in entries]


def _write_csv(path: Path, rows: list[dict], columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


# ----------------------------------------------------------------------
# per-command config sections
# ----------------------------------------------------------------------

@dataclass
class DataSection:
    manifest: str = ""
    test_manifest: str = ""
    groups: int = 4


@dataclass
class SynthSection:
    count: int = 200
    size: tuple[int, int] = (64, 64)
    kind: str = "curves"


@dataclass
class RefineSection:
    enabled: bool = True
    ensemble: int = 30
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 4
    weight_mode: str = "uncertainty"
    max_images: int = 0  # 0 = all training images


@dataclass
class LocalizeSection:
    mode: str = "queries"  # "queries" (one support vs the rest) or "self"
    support_index: int = 0
    pooling_size: int = 16
    sigma: float = 0.5
    uniform_kernel: bool = False
    save_similarity: bool = True
    fractions: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25)


@dataclass
class EvalSection:
    pred_dir: str = ""
    truth_dir: str = ""


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, {"synth": SynthSection}, {"seed": 0, "out_dir": None})
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    section = cfg["synth"]
    spec = SynthSpec(count=section.count, size=section.size, kind=section.kind, seed=cfg["seed"])
    manifest = save_synth_dataset(out_dir / "data", spec)
    print(f"wrote {section.count} synthetic images to {manifest.parent} (manifest {manifest})")
    return 0


def _pretrain_config(args):
    return load_config(
        args.config,
        {"network": NetworkConfig, "data": DataSection, "pretrain": PretrainConfig},
        {"seed": 0, "out_dir": None, "device": "cpu"},
    )


def cmd_pretrain(args) -> int:
    cfg = _pretrain_config(args)
    cfg["device"] = resolve_device(cfg["device"])
    pre: PretrainConfig = cfg["pretrain"]
    manifest = Path(cfg["data"].manifest)
    if not manifest.exists():
        raise ConfigError(f"manifest file not found: {manifest}")
    if args.dry_run:
        total = pre.warmup_epochs + pre.region_epochs
        print(f"pretrain schedule: {pre.warmup_epochs} warmup + {pre.region_epochs} region epochs, "
              f"{pre.iters_per_epoch} iterations each, {cfg['data'].groups} groups per batch")
        for epoch in range(0, total, pre.lr_halving_period):
            print(f"  epoch {epoch:4d}: lr = {learning_rate(pre, epoch):.6g}")
        print("dry run: no training performed")
        return 0
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    _run_dirs(out_dir)
    _, images = _load_images(manifest)
    data = GroupBatchProducer(images, seed=cfg["seed"], spec=BatchSpec(groups=cfg["data"].groups))
    torch.manual_seed(substream_seed(cfg["seed"], "init"))
    model = build_embed_net(cfg["network"]).to(cfg["device"])
    warm = run_warmup(model, data, pre, out_dir=out_dir)
    print(f"warmup done: {len(warm.trace)} iterations, checkpoint {warm.checkpoint_path}")
    if pre.region_epochs > 0:
        region = run_region_stage(None, data, pre, out_dir=out_dir,
                                  resume_from=warm.checkpoint_path)
        print(f"region stage done: {len(region.trace)} iterations, "
              f"checkpoint {region.checkpoint_path}")
    return 0


def cmd_shapeseg(args) -> int:
    cfg = load_config(
        args.config,
        {
            "network": NetworkConfig,
            "data": DataSection,
            "shapeseg": ShapeGuidedConfig,
            "discriminator": DiscriminatorConfig,
            "refine": RefineSection,
        },
        {
            "seed": 0,
            "out_dir": None,
            "device": "cpu",
            "warmup_checkpoint": None,
            "refs_manifest": None,
            "eval_manifest": "",
        },
    )
    cfg["device"] = resolve_device(cfg["device"])
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    dirs = _run_dirs(out_dir)
    scfg: ShapeGuidedConfig = cfg["shapeseg"]

    for key in ("warmup_checkpoint", "refs_manifest"):
        if not Path(cfg[key]).exists():
            raise ConfigError(f"{key} file not found: {cfg[key]}")
    entries, images = _load_images(cfg["data"].manifest)
    data = GroupBatchProducer(images, seed=cfg["seed"], spec=BatchSpec(groups=cfg["data"].groups))
    refs = ReferenceMaskSet.from_manifest(cfg["refs_manifest"])
    discriminator = build_discriminator(cfg["discriminator"]).to(cfg["device"])

    result = train_shape_guided(
        None, discriminator, data, refs, scfg,
        resume_from=cfg["warmup_checkpoint"], seed=cfg["seed"], out_dir=out_dir,
    )
    _write_csv(dirs["traces"] / "shapeseg.csv", result.trace, list(result.trace[0].keys()))
    print(f"shape-guided training done: checkpoint {result.checkpoint_path}")

    refined_ckpt = None
    refine: RefineSection = cfg["refine"]
    if refine.enabled:
        count = len(images) if refine.max_images == 0 else min(refine.max_images, len(images))
        bundles = [
            pseudo_label_uncertainty(result.model, images[i], scfg.target_channel,
                                     ensemble=refine.ensemble, tau=scfg.tau)
            for i in range(count)
        ]
        names = [Path(entries[i].image_path).stem for i in range(count)]
        save_bundles(dirs["predictions"] / "bundles", names, bundles)
        torch.manual_seed(substream_seed(cfg["seed"], "init", "refiner"))
        seg_net = build_seg_net(cfg["network"], out_channels=1).to(cfg["device"])
        rcfg = RefineConfig(epochs=refine.epochs, lr=refine.lr,
                            batch_size=refine.batch_size, weight_mode=refine.weight_mode)
        rows = retrain_refiner(seg_net, images[:count], bundles, rcfg, seed=cfg["seed"])
        _write_csv(dirs["traces"] / "refine.csv", rows, ("epoch", "loss"))
        refined_ckpt = dirs["checkpoints"] / "refined.npz"
        save_checkpoint(refined_ckpt, seg_net, kind="seg")
        print(f"refinement done: checkpoint {refined_ckpt}")

    if cfg["eval_manifest"]:
        _predict_and_score(cfg, dirs, result.checkpoint_path, refined_ckpt, scfg)
    return 0


def _predict_and_score(cfg, dirs, embed_ckpt, refined_ckpt, scfg: ShapeGuidedConfig):
    eval_entries = read_manifest(cfg["eval_manifest"])
    modes = [("raw", embed_ckpt), ("cluster", embed_ckpt)]
    if refined_ckpt is not None:
        modes.append(("refined", refined_ckpt))
    rows = []
    for mode, ckpt in modes:
        mode_dir = dirs["predictions"] / mode
        for entry in eval_entries:
            image = load_image(entry.image_path)
            mask, prob = predict_segmentation(ckpt, image, mode,
                                              target_channel=scfg.target_channel, tau=scfg.tau)
            name = (entry.mask_path or entry.image_path).name
            save_mask(mode_dir / name, mask)
            np.save(mode_dir / f"{Path(name).stem}_prob.npy", prob.astype(np.float32))
            if entry.mask_path is not None:
                rows.append({"mode": mode, "image": entry.image_path.name,
                             "dsc": dsc(mask, load_mask(entry.mask_path))})
    if rows:
        _write_csv(dirs["predictions"] / "dsc.csv", rows, ("mode", "image", "dsc"))
        for mode, _ in modes:
            vals = [r["dsc"] for r in rows if r["mode"] == mode]
            print(f"eval mean DSC ({mode}): {np.mean(vals):.4f} over {len(vals)} images")


def cmd_oneshot(args) -> int:
    cfg = load_config(
        args.config,
        {
            "network": NetworkConfig,
            "data": DataSection,
            "oneshot": OneshotTrainConfig,
            "localize": LocalizeSection,
        },
        {"seed": 0, "out_dir": None, "device": "cpu", "checkpoint": ""},
    )
    cfg["device"] = resolve_device(cfg["device"])
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    dirs = _run_dirs(out_dir)

    entries, images = _load_images(cfg["data"].manifest)
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"]).build().to(cfg["device"])
    else:
        data = GroupBatchProducer(images, seed=cfg["seed"], spec=BatchSpec(groups=cfg["data"].groups))
        torch.manual_seed(substream_seed(cfg["seed"], "init"))
        model = build_embed_net(cfg["network"]).to(cfg["device"])
        rows = oneshot.train_center_sensitive(
            model, data, cfg["oneshot"], substream(cfg["seed"], "pool-sizes")
        )
        _write_csv(dirs["traces"] / "oneshot.csv", rows, list(rows[0].keys()))
        save_checkpoint(dirs["checkpoints"] / "oneshot.npz", model, kind="embed")
        print(f"center-sensitive training done: {len(rows)} iterations")

    loc: LocalizeSection = cfg["localize"]
    labeled = [(i, e) for i, e in enumerate(entries) if e.landmark is not None]
    if not labeled:
        raise ConfigError("localization requires landmark annotations in the manifest")
    kernel = oneshot.uniform_kernel(loc.pooling_size) if loc.uniform_kernel else None

    if loc.mode == "self":
        pairs = [(i, i) for i, _ in labeled]
    elif loc.mode == "queries":
        support_idx = labeled[loc.support_index][0]
        pairs = [(support_idx, qi) for qi, _ in labeled if qi != support_idx]
    else:
        raise ConfigError(f"unknown localization mode {loc.mode!r}")

    model.eval()
    rows, preds, truths = [], [], []
    for support_idx, query_idx in pairs:
        support = SupportAnnotation(images[support_idx], entries[support_idx].landmark)
        result = oneshot.localize(support, images[query_idx], loc.pooling_size, model,
                                  sigma=loc.sigma, kernel=kernel)
        truth = entries[query_idx].landmark
        distance = oneshot.localization_distance(result.point, truth)
        rows.append({"query": query_idx, "h_d": result.point[0], "w_d": result.point[1],
                     "distance": distance})
        preds.append(result.point)
        truths.append(truth)
        if loc.save_similarity:
            np.save(dirs["predictions"] / f"similarity_{query_idx:04d}.npy",
                    result.similarity.astype(np.float32))
    oneshot.write_localization_csv(dirs["predictions"] / "localization.csv", rows)
    rates = oneshot.accuracy_at_thresholds(preds, truths, loc.pooling_size, loc.fractions)
    _write_csv(
        dirs["predictions"] / "accuracy.csv",
        [{"fraction": k, "rate": v} for k, v in rates.items()],
        ("fraction", "rate"),
    )
    shown = ", ".join(f"{k}: {v:.3f}" for k, v in rates.items())
    print(f"localization over {len(pairs)} queries ({loc.mode} mode): {shown}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(
        args.config,
        {"network": NetworkConfig, "data": DataSection, "finetune": FinetuneConfig},
        {"seed": 0, "out_dir": None, "device": "cpu", "init_checkpoint": "",
         "sweep_fractions": ()},
    )
    cfg["device"] = resolve_device(cfg["device"])
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    dirs = _run_dirs(out_dir)
    fcfg: FinetuneConfig = replace(cfg["finetune"], seed=cfg["seed"])
    init = cfg["init_checkpoint"] or None

    def records_from(manifest):
        entries = read_manifest(manifest)
        recs = []
        for e in entries:
            if e.mask_path is None:
                raise ConfigError(f"entry {e.image_path} has no mask; fine-tuning needs labels")
            recs.append((load_image(e.image_path), load_mask(e.mask_path)))
        return recs

    train_records = records_from(cfg["data"].manifest)
    test_records = records_from(cfg["data"].test_manifest) if cfg["data"].test_manifest else []

    if cfg["sweep_fractions"]:
        if init is None:
            raise ConfigError("a pretrained init_checkpoint is required for a fraction sweep")
        if not test_records:
            raise ConfigError("a test_manifest is required for a fraction sweep")
        rows = fraction_sweep(init, train_records, test_records, cfg["network"], fcfg,
                              fractions=tuple(cfg["sweep_fractions"]))
        _write_csv(dirs["predictions"] / "sweep.csv", rows,
                   ("fraction", "init", "mean_dsc", "best_val_loss"))
        for r in rows:
            print(f"fraction {r['fraction']:.2f} {r['init']:>10}: mean DSC {r['mean_dsc']:.4f}")
        return 0

    result = finetune(init, train_records, cfg["network"], fcfg)
    _write_csv(dirs["traces"] / "finetune.csv", result.trace,
               ("epoch", "phase", "train_loss", "val_loss"))
    ckpt = dirs["checkpoints"] / "finetuned.npz"
    save_checkpoint(ckpt, result.model, kind="seg",
                    meta={"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss})
    print(f"fine-tuning done: best epoch {result.best_epoch} "
          f"(val loss {result.best_val_loss:.4f}), checkpoint {ckpt}")
    if test_records:
        scores, mean = evaluate_dsc(result.model, test_records, fcfg.threshold)
        _write_csv(dirs["predictions"] / "test_dsc.csv",
                   [{"image": i, "dsc": s} for i, s in enumerate(scores)], ("image", "dsc"))
        print(f"test mean DSC: {mean:.4f} over {len(scores)} images")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, {"eval": EvalSection}, {"out_dir": None})
    out_dir = Path(cfg["out_dir"])
    _snapshot(out_dir, cfg)
    section: EvalSection = cfg["eval"]
    pred_dir, truth_dir = Path(section.pred_dir), Path(section.truth_dir)
    for d in (pred_dir, truth_dir):
        if not d.is_dir():
            raise ConfigError(f"directory not found: {d}")
    rows = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        truth_path = truth_dir / pred_path.name
        if not truth_path.exists():
            warnings.warn(f"no ground truth for {pred_path.name}; skipped")
            continue
        rows.append({"image": pred_path.name,
                     "dsc": dsc(load_mask(pred_path), load_mask(truth_path))})
    if not rows:
        raise ConfigError(f"no overlapping mask files between {pred_dir} and {truth_dir}")
    _write_csv(out_dir / "dsc.csv", rows, ("image", "dsc"))
    mean = float(np.mean([r["dsc"] for r in rows]))
    print(f"mean DSC: {mean:.4f} over {len(rows)} images")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    figures = run_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    produced = 0

    traces_dir = run_dir / "traces"
    if traces_dir.is_dir():
        for trace_path in sorted(traces_dir.glob("*.csv")):
            with trace_path.open(newline="") as fh:
                rows = list(csv.DictReader(fh))
            if not rows:
                warnings.warn(f"empty trace {trace_path.name}; skipped")
                continue
            x = np.arange(len(rows))
            fig, ax = plt.subplots(figsize=(7, 4))
            for column in rows[0]:
                if column in ("iteration", "epoch", "phase", "pool_size"):
                    continue
                try:
                    ys = [float(r[column]) for r in rows]
                except ValueError:
                    continue
                ax.plot(x, ys, label=column)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.legend(loc="upper right", fontsize=8)
            ax.set_title(trace_path.stem)
            fig.tight_layout()
            fig.savefig(figures / f"{trace_path.stem}_losses.png", dpi=110)
            plt.close(fig)
            produced += 1
    else:
        warnings.warn(f"no traces directory under {run_dir}")

    pred_dir = run_dir / "predictions"
    if pred_dir.is_dir():
        for sim_path in sorted(pred_dir.glob("similarity_*.npy")):
            sim = np.load(sim_path)
            fig, ax = plt.subplots(figsize=(4, 4))
            im = ax.imshow(sim, cmap="inferno")
            h, w = np.unravel_index(int(np.argmax(sim)), sim.shape)
            ax.plot(w, h, "c+", markersize=12, markeredgewidth=2)
            fig.colorbar(im, ax=ax, fraction=0.046)
            ax.set_title(sim_path.stem)
            fig.tight_layout()
            fig.savefig(figures / f"{sim_path.stem}.png", dpi=110)
            plt.close(fig)
            produced += 1
        for mode_dir in sorted(p for p in pred_dir.iterdir() if p.is_dir() and p.name != "bundles"):
            masks = sorted(mode_dir.glob("*.png"))[:8]
            if not masks:
                continue
            fig, axes = plt.subplots(1, len(masks), figsize=(2 * len(masks), 2.2))
            axes = np.atleast_1d(axes)
            for ax, mask_path in zip(axes, masks):
                ax.imshow(load_mask(mask_path), cmap="gray")
                ax.set_title(mask_path.stem, fontsize=6)
                ax.axis("off")
            fig.suptitle(f"predictions: {mode_dir.name}")
            fig.tight_layout()
            fig.savefig(figures / f"masks_{mode_dir.name}.png", dpi=110)
            plt.close(fig)
            produced += 1
    if produced == 0:
        warnings.warn(f"nothing to plot under {run_dir}")
    print(f"wrote {produced} figure(s) to {figures}")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="YAML config file")
        p.set_defaults(func=func)
        return p

    with_config("synth", cmd_synth, "generate a synthetic curve/disc dataset")
    pre = with_config("pretrain", cmd_pretrain, "two-stage self-supervised pretraining")
    pre.add_argument("--dry-run", action="store_true",
                     help="validate the config and print the schedule without training")
    with_config("shapeseg", cmd_shapeseg, "shape-guided segmentation training + refinement")
    with_config("oneshot", cmd_oneshot, "center-sensitive training and one-shot localization")
    with_config("finetune", cmd_finetune, "supervised fine-tuning of a pretrained encoder")
    with_config("eval", cmd_eval, "DSC between prediction and ground-truth mask directories")
    plot = sub.add_parser("plot", help="render loss curves, similarity maps and mask galleries")
    plot.add_argument("run_dir", help="run directory holding traces/ and predictions/")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic contract
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
