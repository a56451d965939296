"""Acceptance criteria.

Each test prints one `[PASS]`/`[FAIL]` line (run with ``pytest -s`` to see
them live).  Oracles are re-derived here with plain loops and stdlib math,
independent of the implementation under test.  The training-based criteria
run the bundled synthetic pipelines at desk scale on CPU.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from ldlearn import losses, oneshot, shapeseg, transfer
from ldlearn.augment import (
    GroupBatchProducer,
    SynthSpec,
    invertible_tta,
    synth_dataset,
)
from ldlearn.losses import PatchGrid
from ldlearn.nets import (
    DiscriminatorConfig,
    NetworkConfig,
    build_discriminator,
    build_embed_net,
    build_seg_net,
    save_checkpoint,
)
from ldlearn.pretrain import PretrainConfig, run_region_stage, run_warmup
from ldlearn.seeding import substream

REPO = Path(__file__).resolve().parent.parent
PROB_EPS = 1e-7


def report(name: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ----------------------------------------------------------------------
# independent oracles (loops + stdlib math only)
# ----------------------------------------------------------------------

def oracle_softmax(query, candidates, tau):
    exps = [math.exp(sum(a * b for a, b in zip(c, query)) / tau) for c in candidates]
    z = sum(exps)
    return [e / z for e in exps]


def oracle_joint_nll(queries, candidates, tau, matches):
    total = 0.0
    for q, m in zip(queries, matches):
        probs = [min(max(p, PROB_EPS), 1 - PROB_EPS) for p in oracle_softmax(q, candidates, tau)]
        term = -math.log(probs[m])
        for j, p in enumerate(probs):
            if j != m:
                term -= math.log(1.0 - p)
        total += term
    return total


def oracle_normalize(vec):
    norm = math.sqrt(sum(x * x for x in vec))
    return [x / norm for x in vec]


def oracle_patch_vectors(v, rows, cols):
    n, k, h, w = v.shape
    ph, pw = h // rows, w // cols
    out = []
    for img in range(n):
        vecs = []
        for i in range(rows * cols):
            r0, c0 = divmod(i, cols)
            acc = [0.0] * k
            for hh in range(r0 * ph, (r0 + 1) * ph):
                for ww in range(c0 * pw, (c0 + 1) * pw):
                    for kk in range(k):
                        acc[kk] += v[img, kk, hh, ww]
            vecs.append(oracle_normalize(acc))
        out.append(vecs)
    return out


def oracle_prototypes(v, r):
    n, k, h, w = v.shape
    c = r.shape[1]
    t = []
    for img in range(n):
        per_class = []
        for cls in range(c):
            acc = [0.0] * k
            for hh in range(h):
                for ww in range(w):
                    for kk in range(k):
                        acc[kk] += r[img, cls, hh, ww] * v[img, kk, hh, ww]
            per_class.append(oracle_normalize(acc))
        t.append(per_class)
    protos = []
    for cls in range(c):
        acc = [sum(t[img][cls][kk] for img in range(n)) for kk in range(k)]
        protos.append(oracle_normalize(acc))
    return t, protos


# ======================================================================
# criterion: loss-oracle equivalence
# ======================================================================

def test_loss_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(5):
        n, k, c = 4, 4, 4
        grid = PatchGrid(2, 2, 8, 8)
        v1 = rng.standard_normal((n, k, 8, 8))
        v2 = rng.standard_normal((n, k, 8, 8))
        tau = float(rng.uniform(0.2, 1.0))

        # patch discrimination
        s = losses.patch_pool(torch.from_numpy(v1), grid)
        s_hat = losses.patch_pool(torch.from_numpy(v2), grid)
        got = losses.patch_discrimination_loss(s, s_hat, tau).item()
        sv = oracle_patch_vectors(v1, 2, 2)
        shv = oracle_patch_vectors(v2, 2, 2)
        flat = [vec for img in sv for vec in img]
        flat_hat = [vec for img in shv for vec in img]
        want = oracle_joint_nll(flat_hat, flat, tau, list(range(len(flat))))
        worst = max(worst, abs(got - want))

        # hypersphere mixup: targets are normalized blends of patch vectors
        lam = 0.4
        targets = []
        for idx, vec in enumerate(flat):
            partner = flat[(idx + 4) % len(flat)]
            targets.append(oracle_normalize([lam * a + (1 - lam) * b for a, b in zip(vec, partner)]))
        t_torch = torch.tensor(targets).reshape(n, 4, k)
        got = losses.hypersphere_mixup_loss(s_hat, t_torch, tau).item()
        want = oracle_joint_nll(flat_hat, targets, tau, list(range(len(flat))))
        worst = max(worst, abs(got - want))

        # region discrimination
        r = rng.dirichlet(np.ones(c), size=(n, 8, 8)).transpose(0, 3, 1, 2).copy()
        bank = losses.region_prototypes(torch.from_numpy(v1), torch.from_numpy(r))
        got = losses.region_discrimination_loss(bank, tau).item()
        t_or, protos = oracle_prototypes(v1, r)
        want = sum(oracle_joint_nll(t_or[img], protos, tau, list(range(c))) for img in range(n))
        worst = max(worst, abs(got - want))

        # entropy
        probs = rng.uniform(0.05, 0.95, size=(n, c, 8, 8))
        got = losses.entropy_loss(torch.from_numpy(probs)).item()
        want = sum(-p * math.log(p) - (1 - p) * math.log(1 - p) for p in probs.ravel()) / probs.size
        worst = max(worst, abs(got - want))

        # dice
        pred = rng.uniform(size=(8, 8))
        target = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        got = losses.dice_loss(torch.from_numpy(pred), torch.from_numpy(target)).item()
        inter = sum(p * t for p, t in zip(pred.ravel(), target.ravel()))
        want = 1 - 2 * (inter + 1.0) / (pred.sum() + target.sum() + 1.0)
        worst = max(worst, abs(got - want))

        # weighted bce
        weight = rng.uniform(0, 2, size=(8, 8))
        got = losses.weighted_bce(
            torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(weight)
        ).item()
        want = -sum(
            w * (t * math.log(p) + (1 - t) * math.log(1 - p))
            for p, t, w in zip(pred.ravel(), target.ravel(), weight.ravel())
        ) / pred.size
        worst = max(worst, abs(got - want))

    elapsed = time.time() - t0
    report(
        "loss-oracle equivalence",
        worst < 1e-8 and elapsed < 10.0,
        f"max |loss - oracle| = {worst:.2e} (tol 1e-8), runtime {elapsed:.1f}s (< 10s)",
    )


# ======================================================================
# criterion: closed-form anchors
# ======================================================================

def test_closed_form_anchors():
    term = 2.0 * math.log1p(1.0 / math.e)  # -log(e/(e+1)) - log(1 - 1/(e+1))
    checks = []

    s = torch.eye(2, dtype=torch.float64)[None]
    pd_term = losses.patch_discrimination_loss(s, s, tau=1.0).item() / 2.0
    checks.append(("L_Pd orthogonal term", abs(pd_term - 0.6265) <= 1e-3, pd_term))

    bank = losses.PrototypeBank(
        image_prototypes=torch.eye(2, dtype=torch.float64).expand(1, 2, 2).clone(),
        class_prototypes=torch.eye(2, dtype=torch.float64),
    )
    rd_term = losses.region_discrimination_loss(bank, tau=1.0).item() / 2.0
    checks.append(("L_Rd orthogonal term", abs(rd_term - 0.6265) <= 1e-3, rd_term))

    ent = losses.entropy_loss(torch.full((4, 4), 0.5, dtype=torch.float64)).item()
    checks.append(("entropy(0.5) = ln 2", abs(ent - math.log(2)) <= 1e-9, ent))

    corner = oneshot.center_kernel(8, sigma=0.5).weights[0, 0]
    checks.append(("kernel corner = e^-4", abs(corner - math.exp(-4)) <= 1e-9, corner))

    kl = losses.kl_divergence([1.0, 0.0], [0.5, 0.5])
    checks.append(("KL((1,0),(.5,.5)) = ln 2", abs(kl - math.log(2)) <= 1e-12, kl))

    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{name}={value:.6f}{'' if good else ' (!)'} " for name, good, value in checks)
    report("closed-form anchors", ok, detail.strip())


# ======================================================================
# criterion: gradient verification
# ======================================================================

def _fd_vs_autograd(fn, arrays, step=1e-5):
    tensors = [torch.from_numpy(a.copy()).requires_grad_(True) for a in arrays]
    fn(*tensors).backward()
    analytic = [t.grad.numpy() for t in tensors]
    worst = 0.0
    for idx, base in enumerate(arrays):
        flat = base.ravel()
        grad = analytic[idx].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = fn(*[torch.from_numpy(a) for a in arrays]).item()
            flat[j] = orig - step
            down = fn(*[torch.from_numpy(a) for a in arrays]).item()
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(grad[j]), 1e-6)
            worst = max(worst, abs(grad[j] - numeric) / denom)
    return worst


def test_gradient_verification():
    t0 = time.time()
    grid = PatchGrid(2, 2, 4, 4)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(9000 + seed)
        v1 = rng.standard_normal((2, 3, 4, 4))
        v2 = rng.standard_normal((2, 3, 4, 4))
        logits = rng.standard_normal((2, 2, 4, 4))
        seg_logits = rng.standard_normal((1, 1, 4, 4))
        target = torch.from_numpy((rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float64))
        weight = torch.from_numpy(rng.uniform(0, 1, size=(1, 1, 4, 4)))

        worst = max(worst, _fd_vs_autograd(
            lambda a, b: losses.patch_discrimination_loss(
                losses.patch_pool(a, grid), losses.patch_pool(b, grid), 1.0), [v1, v2]))
        worst = max(worst, _fd_vs_autograd(
            lambda a, b: losses.hypersphere_mixup_loss(
                losses.patch_pool(b, grid),
                losses.mixup_target(losses.patch_pool(a, grid),
                                    torch.roll(losses.patch_pool(a, grid), 1, 0), 0.4), 1.0),
            [v1, v2]))
        worst = max(worst, _fd_vs_autograd(
            lambda a, b: losses.region_discrimination_loss(
                losses.region_prototypes(a, torch.softmax(b, dim=1)), 1.0), [v1, logits]))
        worst = max(worst, _fd_vs_autograd(
            lambda a: losses.entropy_loss(torch.softmax(a, dim=1)), [logits]))
        worst = max(worst, _fd_vs_autograd(
            lambda a: losses.dice_loss(torch.sigmoid(a), target), [seg_logits]))
        worst = max(worst, _fd_vs_autograd(
            lambda a: losses.weighted_bce(torch.sigmoid(a), target, weight), [seg_logits]))

    elapsed = time.time() - t0
    report(
        "gradient verification",
        worst < 1e-4 and elapsed < 120.0,
        f"max relative error {worst:.2e} (tol 1e-4) over 20 instances x 6 losses, "
        f"runtime {elapsed:.1f}s (< 120s)",
    )


# ======================================================================
# criterion: invariant suite (100 seeded trials each, zero failures)
# ======================================================================

def test_invariant_suite():
    failures = []

    # pixel-embedding unit norms + simplex sums: 5 inits x 20 inputs
    net_cfg = NetworkConfig(width_divisor=8, embed_dim=8, num_clusters=4, input_size=(64, 64))
    for init in range(5):
        torch.manual_seed(1000 + init)
        model = build_embed_net(net_cfg).eval()
        with torch.no_grad():
            v, r = model(torch.rand(20, 3, 64, 64))
        if (torch.linalg.vector_norm(v, dim=1) - 1).abs().max().item() > 1e-5:
            failures.append(f"unit norm (init {init})")
        if (r.sum(dim=1) - 1).abs().max().item() > 1e-5 or r.min().item() < 0:
            failures.append(f"simplex (init {init})")

    # recognition probability normalization
    rng = np.random.default_rng(77)
    for trial in range(100):
        m, k = int(rng.integers(1, 10)), int(rng.integers(2, 6))
        raw = rng.standard_normal((m, k))
        cands = torch.from_numpy(raw / np.linalg.norm(raw, axis=1, keepdims=True))
        q = rng.standard_normal(k)
        q = torch.from_numpy(q / np.linalg.norm(q))
        p = losses.recognition_prob(q, cands, float(rng.uniform(0.05, 2)))
        if abs(p.sum().item() - 1.0) > 1e-10:
            failures.append(f"recognition normalization (trial {trial})")

    # uncertainty bounds for arbitrary ensembles
    for trial in range(100):
        e = int(rng.integers(1, 8))
        maps = rng.uniform(0, 1, size=(e, 6, 6))
        clamped = np.clip(maps, PROB_EPS, 1 - PROB_EPS)
        u = np.mean(-clamped * np.log(clamped) - (1 - clamped) * np.log(1 - clamped), axis=0)
        if u.min() < 0 or u.max() > math.log(2) + 1e-9:
            failures.append(f"uncertainty bounds (trial {trial})")

    # TTA round trips, bit exact
    for trial in range(100):
        mask = (rng.uniform(size=(12, 12)) > 0.5).astype(np.float32)
        e = int(rng.integers(0, 30))
        warped, inverse = invertible_tta(mask, e % 8)
        if not np.array_equal(inverse(warped), mask):
            failures.append(f"tta roundtrip (trial {trial}, e={e % 8})")

    # DSC bounds and symmetry
    for trial in range(100):
        a = (rng.uniform(size=(10, 10)) > 0.5).astype(np.uint8)
        b = (rng.uniform(size=(10, 10)) > 0.5).astype(np.uint8)
        ab, ba = transfer.dsc(a, b), transfer.dsc(b, a)
        if ab != ba or not 0.0 <= ab <= 1.0:
            failures.append(f"dsc (trial {trial})")

    report(
        "invariant suite",
        not failures,
        "unit norms, simplex sums, recognition normalization, uncertainty bounds, "
        f"TTA round trips, DSC bounds/symmetry all clean" if not failures
        else f"failures: {failures[:5]}",
    )


# ======================================================================
# criterion: reductions
# ======================================================================

def test_reductions(tmp_path):
    images = [s.image for s in synth_dataset(SynthSpec(count=8, seed=21))]

    # region stage with zero weights continues the warmup exactly
    desk = PretrainConfig(warmup_epochs=1, region_epochs=1, iters_per_epoch=4,
                          grid=(4, 4), tau=0.1, region_weight=0.0, entropy_weight=0.0)
    torch.manual_seed(21)
    model = build_embed_net(NetworkConfig(width_divisor=8, embed_dim=8, num_clusters=4,
                                          input_size=(64, 64)))
    warm = run_warmup(model, GroupBatchProducer(images, seed=21), desk, out_dir=tmp_path)
    cont_cfg = PretrainConfig(warmup_epochs=2, region_epochs=0, iters_per_epoch=4,
                              grid=(4, 4), tau=0.1)
    continued = run_warmup(None, GroupBatchProducer(images, seed=21), cont_cfg,
                           resume_from=warm.checkpoint_path)
    zero = run_region_stage(None, GroupBatchProducer(images, seed=21), desk,
                            resume_from=warm.checkpoint_path)
    trace_gap = max(abs(a["total"] - b["total"]) for a, b in zip(zero.trace, continued.trace))

    # sigma -> infinity center-sensitive pooling equals uniform patch pooling
    rng = np.random.default_rng(22)
    v = torch.from_numpy(rng.standard_normal((2, 6, 16, 16)))
    wide = oneshot.pool_windows(v, oneshot.center_kernel(8, sigma=1e12),
                                oneshot.window_grid((16, 16), 8))
    uniform = losses.patch_pool(v, PatchGrid(2, 2, 16, 16))
    pool_gap = (wide - uniform).abs().max().item()

    # unit weights reduce weighted BCE to plain BCE
    pred = torch.from_numpy(rng.uniform(0.05, 0.95, size=(16, 16)))
    label = torch.from_numpy((rng.uniform(size=(16, 16)) > 0.5).astype(np.float64))
    wbce = losses.weighted_bce(pred, label, torch.ones_like(pred)).item()
    plain = -(label * torch.log(pred) + (1 - label) * torch.log(1 - pred)).mean().item()
    bce_gap = abs(wbce - plain)

    ok = trace_gap <= 1e-6 and pool_gap <= 1e-6 and bce_gap <= 1e-12
    report(
        "reductions",
        ok,
        f"zero-weight region trace gap {trace_gap:.2e} (<=1e-6), "
        f"sigma->inf pooling gap {pool_gap:.2e} (<=1e-6), "
        f"unit-weight BCE gap {bce_gap:.2e} (<=1e-12)",
    )


# ======================================================================
# criterion: synthetic pretraining benefit
# ======================================================================

BENEFIT_NET = NetworkConfig(width_divisor=4, embed_dim=16, num_clusters=4, input_size=(64, 64))


@pytest.fixture(scope="module")
def pretrained_encoder(tmp_path_factory):
    """5 + 15 desk-scale epochs of self-supervised pretraining on 200 curves."""
    out = tmp_path_factory.mktemp("pretrain")
    images = [s.image for s in synth_dataset(SynthSpec(count=200, size=(64, 64), seed=1000))]
    data = GroupBatchProducer(images, seed=1000)
    cfg = PretrainConfig(warmup_epochs=5, region_epochs=15, iters_per_epoch=25,
                         grid=(4, 4), tau=0.1)
    torch.manual_seed(1000)
    model = build_embed_net(BENEFIT_NET)
    t0 = time.time()
    warm = run_warmup(model, data, cfg, out_dir=out)
    run_region_stage(None, data, cfg, out_dir=out, resume_from=warm.checkpoint_path)
    return out / "checkpoints" / "region.npz", time.time() - t0


def test_synthetic_pretraining_benefit(pretrained_encoder):
    ckpt, pretrain_seconds = pretrained_encoder
    t0 = time.time()
    labeled = synth_dataset(SynthSpec(count=20, size=(64, 64), seed=1100))
    test = synth_dataset(SynthSpec(count=40, size=(64, 64), seed=1200))
    records = [(s.image, s.mask) for s in labeled]
    test_records = [(s.image, s.mask) for s in test]

    scores = {"pretrained": [], "scratch": []}
    for seed in (0, 1, 2):
        cfg = transfer.FinetuneConfig(decoder_only_epochs=12, full_epochs=12,
                                      batch_size=4, seed=seed)
        for init, source in (("pretrained", ckpt), ("scratch", None)):
            result = transfer.finetune(source, records, BENEFIT_NET, cfg)
            _, mean = transfer.evaluate_dsc(result.model, test_records)
            scores[init].append(mean)

    mean_pre = float(np.mean(scores["pretrained"]))
    mean_scr = float(np.mean(scores["scratch"]))
    total = pretrain_seconds + (time.time() - t0)
    ok = mean_pre >= mean_scr + 0.02 and total < 1800
    report(
        "synthetic pretraining benefit",
        ok,
        f"mean test DSC pretrained {mean_pre:.4f} vs scratch {mean_scr:.4f} "
        f"(needs margin >= 0.02; per-seed pretrained {np.round(scores['pretrained'], 3)}, "
        f"scratch {np.round(scores['scratch'], 3)}), total runtime {total / 60:.1f} min (< 30)",
    )


# ======================================================================
# criterion: shape-guided synthetic segmentation
# ======================================================================

SHAPE_SPEC = dict(size=(64, 64), kind="curves", thickness=2,
                  curve_steps=(20, 45), curve_density=(0.04, 0.10))
SHAPE_NET = NetworkConfig(width_divisor=4, embed_dim=16, num_clusters=8, input_size=(64, 64))


@pytest.fixture(scope="module")
def shape_guided_pipeline():
    train = synth_dataset(SynthSpec(count=200, seed=300, **SHAPE_SPEC))
    donor = synth_dataset(SynthSpec(count=10, seed=400, **SHAPE_SPEC))
    held = synth_dataset(SynthSpec(count=20, seed=500, **SHAPE_SPEC))

    torch.manual_seed(7)
    model = build_embed_net(SHAPE_NET)
    data = GroupBatchProducer([s.image for s in train], seed=7)
    warm_cfg = PretrainConfig(warmup_epochs=6, region_epochs=0, iters_per_epoch=30,
                              grid=(4, 4), tau=0.1)
    run_warmup(model, data, warm_cfg)

    disc = build_discriminator(DiscriminatorConfig(conv_channels=(16, 32, 32, 32, 32)))
    refs = shapeseg.ReferenceMaskSet([s.mask for s in donor])
    cfg = shapeseg.ShapeGuidedConfig(epochs=34, iters_per_epoch=30, target_channel=0,
                                     grid=(4, 4), tau=0.1, select_by_density_kl=True)
    result = shapeseg.train_shape_guided(model, disc, data, refs, cfg, start_epoch=6, seed=7)
    model = result.model
    model.eval()

    def eval_embed(fn):
        scores = []
        for s in held:
            with torch.no_grad():
                x = torch.from_numpy(s.image.transpose(2, 0, 1)[None].copy())
                v, r = model(x)
                prob = fn(v[0], r[0])
            scores.append(transfer.dsc((prob.numpy() > 0.5).astype(np.uint8), s.mask))
        return float(np.mean(scores))

    out_ori = eval_embed(lambda v, r: r[0])
    out_clu = eval_embed(lambda v, r: shapeseg.cluster_refine(v, r, 0, 0.1))

    refine_imgs = [s.image for s in train[:40]]
    bundles = [shapeseg.pseudo_label_uncertainty(model, im, 0, ensemble=30, tau=0.1)
               for im in refine_imgs]
    held_records = [(s.image, s.mask) for s in held]

    def train_refiner(mode):
        torch.manual_seed(17)
        seg = build_seg_net(SHAPE_NET, 1)
        if mode == "unit":
            unit = [shapeseg.UncertaintyBundle(pseudo_label=b.pseudo_label,
                                               uncertainty=np.ones_like(b.uncertainty),
                                               ensemble_size=b.ensemble_size)
                    for b in bundles]
            shapeseg.retrain_refiner(seg, refine_imgs, unit,
                                     shapeseg.RefineConfig(epochs=30, batch_size=8), seed=17)
        else:
            shapeseg.retrain_refiner(seg, refine_imgs, bundles,
                                     shapeseg.RefineConfig(epochs=30, batch_size=8,
                                                           weight_mode=mode), seed=17)
        _, mean = transfer.evaluate_dsc(seg, held_records)
        return mean

    refine = train_refiner("unit")
    refine_uncer = train_refiner("uncertainty")
    return {"model": model, "OutOri": out_ori, "OutClu": out_clu,
            "Refine": refine, "RefineUncer": refine_uncer,
            "selected_epoch": result.selected_epoch}


def test_shape_guided_segmentation(shape_guided_pipeline):
    p = shape_guided_pipeline
    band = 0.02
    ordering = (
        p["RefineUncer"] >= p["Refine"] - band
        and p["Refine"] >= p["OutClu"] - band
        and p["OutClu"] >= p["OutOri"] - band
    )
    ok = p["OutOri"] >= 0.5 and ordering
    report(
        "shape-guided synthetic segmentation",
        ok,
        f"target-channel DSC {p['OutOri']:.3f} (>= 0.5); ordering RefineUncer "
        f"{p['RefineUncer']:.3f} >= Refine {p['Refine']:.3f} >= OutClu {p['OutClu']:.3f} "
        f">= OutOri {p['OutOri']:.3f} within 0.02 bands "
        f"(selected epoch {p['selected_epoch']})",
    )


# ======================================================================
# criterion: one-shot localization
# ======================================================================

ONESHOT_NET = NetworkConfig(width_divisor=4, embed_dim=16, num_clusters=4, input_size=(64, 64))
POOLING = 16


@pytest.fixture(scope="module")
def oneshot_model(tmp_path_factory):
    train = synth_dataset(SynthSpec(count=120, size=(64, 64), kind="disc+curves", seed=100))
    torch.manual_seed(42)
    model = build_embed_net(ONESHOT_NET)
    cfg = oneshot.OneshotTrainConfig(epochs=10, iters_per_epoch=30, size_range=(8, 24),
                                     sigma=0.5, tau=0.1)
    data = GroupBatchProducer([s.image for s in train], seed=42)
    oneshot.train_center_sensitive(model, data, cfg, substream(42, "sizes"))
    model.eval()
    ckpt = tmp_path_factory.mktemp("oneshot") / "oneshot.npz"
    save_checkpoint(ckpt, model, kind="embed")
    return model, ckpt


def test_oneshot_localization(oneshot_model):
    model, _ = oneshot_model
    queries = synth_dataset(SynthSpec(count=41, size=(64, 64), kind="disc+curves", seed=200))
    support = oneshot.SupportAnnotation(queries[0].image, queries[0].landmark)

    self_distances = []
    preds_cs, preds_uni, truths = [], [], []
    for s in queries[1:41]:
        own = oneshot.localize(oneshot.SupportAnnotation(s.image, s.landmark),
                               s.image, POOLING, model)
        self_distances.append(oneshot.localization_distance(own.point, s.landmark))
        truths.append(s.landmark)
        preds_cs.append(oneshot.localize(support, s.image, POOLING, model).point)
        preds_uni.append(
            oneshot.localize(support, s.image, POOLING, model,
                             kernel=oneshot.uniform_kernel(POOLING)).point
        )

    acc_cs = oneshot.accuracy_at_thresholds(preds_cs, truths, POOLING)
    acc_uni = oneshot.accuracy_at_thresholds(preds_uni, truths, POOLING)
    self_ok = all(d == 0.0 for d in self_distances)
    ok = (
        acc_cs[0.25] >= 0.8
        and acc_cs[0.2] >= acc_uni[0.2]
        and acc_cs[0.25] >= acc_uni[0.25]
        and self_ok
    )
    report(
        "one-shot localization",
        ok,
        f"accuracy@0.25P {acc_cs[0.25]:.3f} (>= 0.8) over 40 queries; center-sensitive "
        f"vs uniform at 0.2/0.25: {acc_cs[0.2]:.3f}/{acc_cs[0.25]:.3f} vs "
        f"{acc_uni[0.2]:.3f}/{acc_uni[0.25]:.3f}; self-localization zeros "
        f"{sum(d == 0 for d in self_distances)}/40",
    )


# ======================================================================
# criterion: CLI smoke
# ======================================================================

def test_cli_smoke(tmp_path):
    steps = [
        ["synth", "-c", str(REPO / "configs/quickstart/synth_curves.yaml")],
        ["synth", "-c", str(REPO / "configs/quickstart/synth_discs.yaml")],
        ["pretrain", "-c", str(REPO / "configs/quickstart/pretrain.yaml"), "--dry-run"],
        ["pretrain", "-c", str(REPO / "configs/quickstart/pretrain.yaml")],
        ["shapeseg", "-c", str(REPO / "configs/quickstart/shapeseg.yaml")],
        ["oneshot", "-c", str(REPO / "configs/quickstart/oneshot.yaml")],
        ["finetune", "-c", str(REPO / "configs/quickstart/finetune.yaml")],
        ["eval", "-c", str(REPO / "configs/quickstart/eval.yaml")],
        ["plot", "runs/quickstart/pretrain"],
        ["plot", "runs/quickstart/shapeseg"],
        ["plot", "runs/quickstart/oneshot"],
    ]
    failures = []
    for step in steps:
        proc = subprocess.run([sys.executable, "-m", "ldlearn", *step],
                              cwd=tmp_path, capture_output=True, text=True, timeout=900)
        if proc.returncode != 0:
            failures.append(f"{step[0]} -> exit {proc.returncode}: {proc.stderr.strip()[:200]}")
    report(
        "CLI smoke",
        not failures,
        f"quickstart chain of {len(steps)} commands, zero nonzero exits"
        if not failures else f"failed steps: {failures}",
    )
