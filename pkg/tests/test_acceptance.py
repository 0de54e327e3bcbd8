"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The overfit and entanglement criteria share one cached training run
(stage 0 for 2k steps, 1a for 2k, 1b for 1k, stage 2 for 1k) which takes
roughly half an hour on one CPU core.
"""

import shutil
import time

import numpy as np
import pytest
import torch

from conftest import perturb_, record_criterion
from refcolor.checkpoint import Checkpoint, ProvenanceError, clone_checkpoint
from refcolor.cli import EXIT_OK, main
from refcolor.core_math import cfg_combine, diffusion_loss
from refcolor.datagen import TPSParams, generate_triples, merge_character_masks, tps_warp
from refcolor.evaluation import colorize_pairs, make_pairs, score
from refcolor.inference import InferenceRequest, colorize, colorize_batch
from refcolor.injection import BackgroundInjection, InjectionBundle, Thresholds, background_inject, mask_pyramid, style_modulate
from refcolor.metrics import ms_ssim, psnr
from refcolor.model import GROUP_NAMES
from refcolor.training import DropPolicy, drop_decisions, run_stage, select_trainable, stage_config

CLOSURE_TOL = 1e-5
GRAD_TOL = 1e-3
DROP_TOL = 0.02
DROP_DRAWS = 10_000
FREEZE_STEPS = 50
ROUNDTRIP_DB = 25.0
LOSS_RATIO = 0.30
PSNR_GAIN_DB = 5.0
HELD_OUT = 32
HELD_OUT_SEED = 10_000
SAMPLING_STEPS = 50


def _check(name, passed, detail):
    record_criterion(name, bool(passed), detail)
    assert passed, detail


# -- 1. exact semantics --------------------------------------------------------------


def test_exact_semantics():
    failures = []

    torch.manual_seed(0)
    block = BackgroundInjection(8, heads=2)
    perturb_(block, 1, scale=0.3)
    for seed in range(100):
        gen = torch.Generator().manual_seed(seed)
        z, zb = torch.randn(2, 2, 8, 6, 6, generator=gen)
        mask = torch.rand(2, 1, 6, 6, generator=gen)
        ts = float(torch.rand(1, generator=gen))
        with torch.no_grad():
            out, composed = background_inject(z, zb, mask, ts, block), block.compose(z, zb)
        upper = (mask > ts).expand_as(z)
        if not (torch.equal(out[upper], z[upper]) and torch.equal(out[~upper], composed[~upper])):
            failures.append(f"gate seed {seed}")

    z = torch.randn(2, 3, 4, 4)
    if not torch.equal(style_modulate(z, torch.zeros(2, 3), torch.zeros(2, 3)), z):
        failures.append("style identity")
    hand = style_modulate(torch.full((1, 2, 1, 1), 2.0), torch.tensor([[0.5, -1.0]]), torch.tensor([[1.0, 3.0]]))
    if hand.flatten().tolist() != [4.0, 3.0]:  # 2*(1+0.5)+1, 2*(1-1)+3
        failures.append("style substitution")

    u, c = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    if not (torch.equal(cfg_combine(u, c, 1.0), c) and torch.equal(cfg_combine(u, c, 0.0), u)):
        failures.append("guidance identities")

    img = np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32)
    if not np.array_equal(tps_warp(img, TPSParams.grid(64)), img):
        failures.append("tps identity")

    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.uniform(0, 1, (2, 1, 16, 16)).astype(np.float32)
        m = merge_character_masks(a, b)
        if not (np.all(m >= a) and np.all(m >= b)):
            failures.append("mask union monotonicity")
            break

    color = generate_triples(1, 3)[0].color
    self_score = ms_ssim(color, color)
    if abs(self_score - 1.0) > 1e-6:
        failures.append(f"ms-ssim self score {self_score}")
    offset = psnr(color * 0.5 + 0.1, color * 0.5)
    if abs(offset - 20.0) > 1e-6:
        failures.append(f"psnr offset {offset}")

    _check("exact semantics", not failures, "all identities hold" if not failures else "; ".join(failures))


# -- 2. zero-init closure ----------------------------------------------------------


def _stage1(cfg):
    ckpt = Checkpoint.fresh(cfg)
    perturb_(ckpt.model.unet, 1)
    perturb_(ckpt.model.sketch_encoder, 2)
    ckpt.stages = ["0", "1a", "1b"]
    return ckpt


def test_zero_init_closure(cfg, triples):
    s1 = _stage1(cfg)
    s2 = run_stage(stage_config("2", steps=0), triples, s1)
    m1, m2 = s1.model, s2.model
    worst = 0.0
    with torch.no_grad():
        for seed in range(10):
            gen = torch.Generator().manual_seed(seed)
            z = torch.randn(2, 4, 16, 16, generator=gen)
            t = torch.randint(0, 1000, (2,), generator=gen)
            sketch = torch.rand(2, 1, 64, 64, generator=gen)
            tokens = torch.randn(2, 16, 64, generator=gen)
            sketch_mask = (torch.rand(2, 1, 64, 64, generator=gen) > 0.5).float()
            ref = torch.rand(2, 3, 64, 64, generator=gen)
            eps1 = m1.denoise(z, t, m1.sketch_encode(sketch), tokens)
            bundle = InjectionBundle(
                z_bg=m2.encode_background(m2.vae.encode(ref), m2.embed_reference(ref)),
                sketch_masks=mask_pyramid(sketch_mask, cfg.level_shapes),
                ref_mask_token_flags=torch.ones(2, 16, dtype=torch.bool),
                lora_active=True,
            )
            eps2 = m2.denoise(z, t, m2.sketch_encode(sketch), tokens, bundle)
            worst = max(worst, (eps1 - eps2).abs().max().item())

    s = triples[0]
    ones = np.ones_like(s.mask)
    bg = colorize(InferenceRequest(s.sketch, triples[1].color, s.mask, ones, mode="background", steps=10), s2)
    van = colorize(InferenceRequest(s.sketch, triples[1].color, mode="vanilla", steps=10), s2)
    bitwise = np.array_equal(bg, van)
    _check("zero-init closure", worst < CLOSURE_TOL and bitwise,
           f"max|d eps| = {worst:.3e} (< {CLOSURE_TOL:g}); background == vanilla bitwise: {bitwise}")


# -- 3. freezing audit ---------------------------------------------------------------


def test_freezing_audit(triples):
    problems, ckpt = [], None
    reference = Checkpoint.fresh().model.checksums()
    for stage in ("0", "1a", "1b", "2", "3"):
        before = ckpt.model.checksums() if ckpt else reference
        ckpt = run_stage(stage_config(stage, steps=FREEZE_STEPS), triples, ckpt)
        after = ckpt.model.checksums()
        trainable = select_trainable(stage)
        frozen_diffs = [g for g in GROUP_NAMES if g not in trainable and before[g] != after[g]]
        unchanged = [g for g in trainable if before[g] == after[g]]
        if frozen_diffs:
            problems.append(f"stage {stage} changed frozen {frozen_diffs}")
        if unchanged:
            problems.append(f"stage {stage} left trainable {unchanged} untouched")

    gating = []
    only0 = run_stage(stage_config("0", steps=1), triples, None)
    cases = [("1a", None), ("1b", only0), ("2", only0), ("3", only0)]
    only1a = clone_checkpoint(only0)
    only1a.stages = ["0", "1a"]
    cases += [("2", only1a)]
    for stage, ck in cases:
        try:
            run_stage(stage_config(stage, steps=1), triples, ck)
            gating.append(stage)
        except ProvenanceError:
            pass
    if gating:
        problems.append(f"out-of-order stages accepted: {gating}")
    _check("freezing audit", not problems,
           f"{FREEZE_STEPS} steps x 5 stages, zero frozen diffs, {len(cases)} out-of-order runs rejected"
           if not problems else "; ".join(problems))


# -- 4. gradient check -------------------------------------------------------------------


def _central(f, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def test_gradient_check():
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(4, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(4, generator=gen, dtype=torch.float64, requires_grad=True)
    diffusion_loss(eps_hat, eps).backward()
    with torch.no_grad():
        probe = eps_hat.detach().clone()
        fd = _central(lambda: diffusion_loss(probe, eps).item(), probe)
    rel_loss = ((eps_hat.grad - fd).norm() / fd.norm()).item()

    torch.manual_seed(1)
    block = BackgroundInjection(8, heads=2).double()
    perturb_(block, 2, scale=0.3)  # nonzero to_out so to_q receives gradient
    z, zb = torch.randn(2, 1, 8, 5, 5, generator=gen, dtype=torch.float64)
    mask = torch.rand(1, 1, 5, 5, generator=gen, dtype=torch.float64)
    weight = torch.randn(1, 8, 5, 5, generator=gen, dtype=torch.float64)

    def objective():
        return (background_inject(z, zb, mask, 0.5, block) * weight).sum()

    block.zero_grad()
    objective().backward()
    analytic = block.to_q.weight.grad.clone()
    with torch.no_grad():
        fd_q = _central(lambda: objective().item(), block.to_q.weight.data)
    rel_inj = ((analytic - fd_q).norm() / fd_q.norm()).item()
    _check("gradient check", rel_loss < GRAD_TOL and rel_inj < GRAD_TOL and fd_q.norm() > 0,
           f"diffusion loss rel err {rel_loss:.2e}, background to_q rel err {rel_inj:.2e} (< {GRAD_TOL:g})")


# -- 5. drop-rate statistics -------------------------------------------------------------


def test_drop_rates():
    expected = {"1a": 0.8, "1b": 0.5, "2": 0.5, "3": 0.5}
    parts, ok = [], True
    for i, (stage, rate) in enumerate(expected.items()):
        policy = DropPolicy(stage_config(stage).reference_drop_rate)
        frac = drop_decisions(DROP_DRAWS, policy, torch.Generator().manual_seed(i)).double().mean().item()
        ok &= policy.rate == rate and abs(frac - rate) <= DROP_TOL
        parts.append(f"{stage}: {frac:.4f} (target {rate})")
    _check("drop-rate statistics", ok, ", ".join(parts))


# -- 6 and 7. training runs --------------------------------------------------------------


@pytest.fixture(scope="session")
def trained(triples):
    out, timings = {}, {}
    prev = None
    for stage, steps in (("0", 2000), ("1a", 2000), ("1b", 1000), ("2", 1000)):
        start = time.perf_counter()
        prev = run_stage(stage_config(stage, steps=steps), triples, prev)
        timings[stage] = time.perf_counter() - start
        out[stage] = prev
    out["timings"] = timings
    return out


def _own_reference_psnr(ckpt, triples):
    reqs = [InferenceRequest(t.sketch, t.color, steps=SAMPLING_STEPS, seed=i) for i, t in enumerate(triples)]
    return [psnr(o, t.color) for o, t in zip(colorize_batch(reqs, ckpt), triples)]


def test_overfit_smoke(trained, triples):
    vae = trained["0"].model.vae
    with torch.no_grad():
        x = torch.from_numpy(np.stack([t.color for t in triples]))
        recon = vae.decode(vae.encode(x)).numpy()
    roundtrip = [psnr(r, t.color) for r, t in zip(recon, triples)]

    early = float(np.mean(trained["1a"].history["losses"][40:60]))
    late = float(np.mean(trained["1b"].history["losses"][-100:]))

    untrained = _own_reference_psnr(trained["0"], triples)
    after = _own_reference_psnr(trained["1b"], triples)
    gain = float(np.mean(after) - np.mean(untrained))
    t = trained["timings"]
    _check(
        "overfit smoke",
        np.mean(roundtrip) > ROUNDTRIP_DB and late < LOSS_RATIO * early and gain >= PSNR_GAIN_DB,
        f"round-trip {np.mean(roundtrip):.2f} dB (min {min(roundtrip):.2f}, need > {ROUNDTRIP_DB:g}); "
        f"loss {late:.4f} vs step-50 {early:.4f} (ratio {late / early:.3f}, need < {LOSS_RATIO}); "
        f"colorize {np.mean(after):.2f} dB vs untrained {np.mean(untrained):.2f} dB "
        f"(gain {gain:.2f}, need >= {PSNR_GAIN_DB:g}); "
        f"train time {t['0'] + t['1a'] + t['1b']:.0f} s",
    )


def _describe(values):
    v = np.asarray(values)
    return (f"mean {v.mean():+.4f} std {v.std():.4f} "
            f"q25/50/75 {np.percentile(v, 25):+.3f}/{np.median(v):+.3f}/{np.percentile(v, 75):+.3f}")


def test_entanglement_trend(trained):
    held_out = generate_triples(HELD_OUT, HELD_OUT_SEED)
    pairs = make_pairs(held_out, tps=False, seed=0)
    scores = {}
    for mode in ("vanilla", "background"):
        results = colorize_pairs(pairs, trained["2"], mode, steps=SAMPLING_STEPS, guidance=3.0, seed=0,
                                 thresholds=Thresholds())
        vals = [score("entanglement", r, p) for r, p in zip(results, pairs)]
        scores[mode] = [v for v in vals if v is not None]
    van, bg = scores["vanilla"], scores["background"]
    _check(
        "entanglement trend",
        len(bg) > 0 and np.mean(bg) < np.mean(van),
        f"background [{_describe(bg)}] vs vanilla [{_describe(van)}] on {len(bg)} scored pairs; "
        f"stage-2 time {trained['timings']['2']:.0f} s",
    )


# -- 8. CLI determinism ------------------------------------------------------------------


def _cli_round(root):
    root.mkdir(parents=True)
    data, cfg = root / "data", root / "tiny.cfg"
    cfg.write_text("steps = 3\nbatch_size = 2\n")
    codes = [main(["gen-data", "--out", str(data), "--count", "3", "--seed", "5"])]
    for stage, prev in (("0", None), ("1a", "0")):
        argv = ["train", "--stage", stage, "--config", str(cfg), "--data", str(data),
                "--ckpt-out", str(root / f"{stage}.safetensors")]
        if prev:
            argv += ["--ckpt-in", str(root / f"{prev}.safetensors")]
        codes.append(main(argv))
    codes.append(main(["sample", "--ckpt", str(root / "1a.safetensors"), "--sketch", str(data / "00000_sketch.png"),
                       "--reference", str(data / "00001_color.png"), "--out", str(root / "sample.png"),
                       "--steps", "5"]))
    codes.append(main(["eval", "--ckpt", str(root / "1a.safetensors"), "--data", str(data), "--steps", "5",
                       "--metrics", "psnr,ms_ssim,embed_cosine,entanglement", "--save-images", str(root / "eval"),
                       "--out", str(root / "report.jsonl")]))
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


def test_cli_determinism(tmp_path):
    root = tmp_path / "run"
    codes_a, first = _cli_round(root)
    shutil.rmtree(root)
    codes_b, second = _cli_round(root)
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = codes_a == codes_b == [EXIT_OK] * 5 and not differing and set(first) == set(second)
    _check("CLI determinism", ok,
           f"{len(first)} artifacts byte-identical across reruns" if ok
           else f"exit codes {codes_a} / {codes_b}; differing {differing}")
