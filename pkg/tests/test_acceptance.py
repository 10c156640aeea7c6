"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The summary section at the end of the pytest run lists all ten outcomes.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conceptfuse import lora
from conceptfuse.checkpoint import directory_digest
from conceptfuse.cli import main
from conceptfuse.data import FACE_BOX, load_image
from conceptfuse.diffusion import forward_noise, tensor_digest, tweedie_estimate
from conceptfuse.errors import DomainError
from conceptfuse.evaluation import EvalReport, eval_csim, eval_style, evaluate
from conceptfuse.generation import GenerationRequest, generate, read_sidecar
from conceptfuse.losses import (
    composed_masked_loss, identity_loss, masked_reconstruction_loss, refocusing_map_loss, structure_style_losses,
)
from conceptfuse.plugins import ToyFaceEmbedder, ToyImageEmbedder, ToyPatchExtractor
from conceptfuse.project import file_sha256, load_config
from conceptfuse.toy import ToyBackend
from conceptfuse.trainer import Trainer, TrainingFailure

from . import oracles
from .conftest import run_toy
from .helpers import criterion, micro_mean, moving_average, pearson, small_config, toy_concepts

T = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)  # noqa: E731


# 1 ---------------------------------------------------------------------------------

def test_criterion_01_loss_math_oracles():
    with criterion(1, "loss-math oracle suite (tol 1e-6, < 10 s)") as c:
        start = time.perf_counter()
        worst, count = 0.0, 0

        def agree(got, want, what):
            nonlocal worst, count
            err = abs(float(got) - float(want))
            worst, count = max(worst, err), count + 1
            if err > 1e-6:
                c.check(False, f"{what}: {float(got)} vs oracle {float(want)}")

        eps = T([[[1.0, 0.0], [0.0, 0.0]]])
        agree(masked_reconstruction_loss(eps, torch.zeros_like(eps), T([[1, 0], [0, 1]])), 0.25, "masked hand case")
        amap, mask = [[0.8, 0.2], [0.4, 0.6]], [[1, 0], [0, 0]]
        agree(refocusing_map_loss(T(amap), T(mask), "penalized"), (0 + 1 / 9 + 4 / 9) / 3, "AR hand case (penalized)")
        agree(refocusing_map_loss(T(amap), T(mask), "grid"), (0 + 1 / 9 + 4 / 9) / 4, "AR hand case (grid)")
        agree(refocusing_map_loss(torch.full((2, 2), 0.3), T(mask)), 0.0, "AR constant map")

        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = rng.integers(1, 5, 2)
            a, b = rng.standard_normal((3, h, w)), rng.standard_normal((3, h, w))
            m = rng.integers(0, 2, (h, w))
            agree(masked_reconstruction_loss(T(a)[None], T(b)[None], T(m)), oracles.masked_mse(a, b, m), "masked")
            agree(composed_masked_loss(T(a)[None], T(b)[None], T(m)), oracles.masked_mse(a, b, m), "composed")
            amap = rng.random((h, w))
            for red in ("grid", "penalized"):
                agree(refocusing_map_loss(T(amap), T(m), red), oracles.refocus(amap.tolist(), m.tolist(), red), f"AR {red}")
            x, s = rng.random((3, 4, 4)), rng.random((3, 4, 4))
            want = 1 - oracles.cosine(oracles.pooled(x, 2), oracles.pooled(s, 2))
            agree(identity_loss(T(x), [T(s)], ToyFaceEmbedder(None, pool=2)), want, "identity")

        ext = ToyPatchExtractor(patch=2, dim=3, channels=1, seed=4)
        proj, cls = ext.key_proj.tolist(), ext.cls_proj.numpy()
        for _ in range(5):
            x, src, ref = (rng.standard_normal((1, 2, 4)) for _ in range(3))
            l_ssim, l_contra, l_style = structure_style_losses(T(x), T(src), T(ref), ext)
            kx, ks, kr = (oracles.patch_keys(v, 2, proj) for v in (x, src, ref))
            agree(l_ssim, oracles.mean_sq(oracles.self_sim(kx), oracles.self_sim(ks)), "structure self-similarity")
            agree(l_contra, oracles.info_nce(kx, ks, 0.07), "patch contrastive")
            agree(l_style, oracles.mean_sq(np.mean(kx, 0) @ cls, np.mean(kr, 0) @ cls), "style embedding")
        elapsed = time.perf_counter() - start
        c.check(elapsed < 10, f"runtime {elapsed:.2f}s")
        c.note(f"{count} comparisons, max abs error {worst:.2e}")


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_gradients():
    with criterion(2, "analytic vs central-difference gradients (rel < 1e-3, < 60 s)") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(1)
        errs = {}

        def grad_pair(f, x0, f_num=None):
            x = T(x0).requires_grad_(True)
            f(x).backward()
            num = oracles.central_difference(lambda v: float((f_num or f)(T(v))), x0)
            return oracles.rel_error(x.grad.numpy(), num)

        eps, m = T(rng.standard_normal((1, 2, 4, 4))), T(rng.integers(0, 2, (4, 4)))
        errs["masked"] = grad_pair(lambda p: masked_reconstruction_loss(eps, p, m), rng.standard_normal((1, 2, 4, 4)))
        a0 = rng.random((4, 4))
        stats = (T(a0.min()), T(a0.max()))
        errs["attention refocusing"] = grad_pair(lambda a: refocusing_map_loss(a, m), a0,
                                                 lambda a: refocusing_map_loss(a, m, stats=stats))
        src = T(rng.random((3, 8, 8)))
        errs["identity"] = grad_pair(lambda x: identity_loss(x, [src], ToyFaceEmbedder(None)), rng.random((3, 8, 8)))
        ext = ToyPatchExtractor(patch=2, dim=4)
        s, r = T(rng.random((3, 4, 4))), T(rng.random((3, 4, 4)))
        for i, name in enumerate(("structure", "contrastive", "style")):
            errs[name] = grad_pair(lambda x, i=i: structure_style_losses(x, s, r, ext)[i], rng.random((3, 4, 4)))
        for name, e in errs.items():
            c.check(e < 1e-3, f"{name} rel err {e:.1e}")
        elapsed = time.perf_counter() - start
        c.check(elapsed < 60, f"runtime {elapsed:.2f}s")


# 3 ---------------------------------------------------------------------------------

def test_criterion_03_ar_invariants():
    with criterion(3, "AR structural invariants over 50 seeds of 8x8 maps") as c:
        zero_ok = grad_ok = mono_ok = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            amap = rng.random((8, 8))
            mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
            mask[rng.integers(8), rng.integers(8)] = 1
            # vanishing outside: outside entries at the map minimum scale to 0
            refocused = np.where(mask == 1, amap + 0.1, 0.0)
            zero_ok += float(refocusing_map_loss(T(refocused), T(mask))) == 0.0
            a = T(amap).requires_grad_(True)
            refocusing_map_loss(a, T(mask)).backward()
            grad_ok += bool(torch.all(a.grad[T(mask) == 1] == 0))
            base = float(refocusing_map_loss(T(amap), T(mask)))
            grown = mask.copy()
            ok = True
            for idx in rng.permutation(64):
                grown.flat[idx] = 1
                cur = float(refocusing_map_loss(T(amap), T(grown)))
                ok &= cur <= base + 1e-15
                base = cur
            mono_ok += ok
        c.check(zero_ok == 50, f"zero loss when refocused {zero_ok}/50")
        c.check(grad_ok == 50, f"zero in-mask gradient {grad_ok}/50")
        c.check(mono_ok == 50, f"monotone under mask growth {mono_ok}/50")


# 4 ---------------------------------------------------------------------------------

def test_criterion_04_lora():
    with criterion(4, "LoRA zero-init, merge round-trip, rank bound, frozen base") as c:
        backend = ToyBackend()
        backend.add_concept("source", "<v1>", "person")
        p = backend.resolve_prompt("a photo of <v1> person")
        z = torch.randn(2, *backend.latent_shape((32, 32)), generator=torch.Generator().manual_seed(0))
        ctx = backend.encode_prompts([p]).expand(2, -1, -1)
        before = backend.predict(z, 400, ctx)[0]
        adapters = lora.attach(backend, rank=4)
        diff = float((backend.predict(z, 400, ctx)[0].detach() - before).abs().max())
        c.check(diff <= 1e-6, f"zero-init output diff {diff:.1e}")

        eps, _ = backend.predict(z, 400, ctx)
        eps.pow(2).mean().backward()
        base_grads = [p.grad for a in adapters for p in a.module.base.parameters()]
        c.check(all(g is None or float(g.abs().max()) == 0 for g in base_grads), "no gradient on frozen base weights")
        c.check(all(a.U.grad is not None for a in adapters), "gradient reaches U")

        worst_w = worst_rank = 0.0
        with torch.no_grad():
            for a in adapters:
                a.U.normal_()
        out_adapted = backend.predict(z, 400, ctx)[0].detach()
        for a in adapters:
            w0 = a.module.base.weight.detach().clone()
            s = torch.linalg.svdvals(a.delta().detach())
            worst_rank = max(worst_rank, float(s[a.rank:].max() / s[0]))
            a.merge()
        merged = float((backend.predict(z, 400, ctx)[0].detach() - out_adapted).abs().max())
        for a in adapters:
            a.unmerge()
        fresh = ToyBackend()
        for a in adapters:
            ref_w = fresh.get_submodule(a.target).weight
            worst_w = max(worst_w, float((a.module.base.weight - ref_w).abs().max()))
        c.check(worst_w <= 1e-6, f"unmerge restores W (max diff {worst_w:.1e})")
        c.check(merged <= 1e-5, f"merged forward diff {merged:.1e}")
        c.check(worst_rank < 1e-6, f"singular values beyond rank / max {worst_rank:.1e}")


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_tweedie_round_trip():
    with criterion(5, "noising / Tweedie round trip over every timestep (tol 1e-4)") as c:
        sched = ToyBackend(pretrained=False).schedule
        g = torch.Generator().manual_seed(0)
        t = torch.arange(1, sched.T + 1)
        x0 = torch.randn(sched.T, 48, 8, 8, generator=g)
        eps = torch.randn(sched.T, 48, 8, 8, generator=g)
        state = forward_noise(x0, t, eps, sched)
        err = float((tweedie_estimate(state, eps, sched) - x0).abs().max())
        c.check(err < 1e-4, f"max abs error {err:.1e} over t = 1..{sched.T}")


# 6 ---------------------------------------------------------------------------------

def test_criterion_06_two_phase_contract():
    with criterion(6, "phase 1 trains embedding rows only; phase 2 adds only adapters") as c:
        tr = Trainer(small_config(phase1_steps=20, phase2_steps=20), toy_concepts(), ToyBackend(),
                     embedder=ToyFaceEmbedder(FACE_BOX))
        be = tr.backend

        def groups():
            named = dict(be.named_parameters())
            emb = {n: p for n, p in named.items() if n.startswith("concept_embeddings.")}
            ada = {n: p for n, p in named.items() if ".lora_" in n}
            rest = be.backbone_parameters()
            c.check(len(emb) + len(ada) + len(rest) == len(named), "parameter groups partition the model")
            return tensor_digest(emb), tensor_digest(ada), tensor_digest(rest)

        e0, _, r0 = groups()
        tr.run_phase1()
        e1, _, r1 = groups()
        c.check(r1 == r0, "phase 1 frozen-parameter hash unchanged")
        c.check(e1 != e0, "phase 1 embedding rows changed")
        tr.attach_adapters()
        e1b, a1, r1b = groups()
        tr.run_phase2()
        e2, a2, r2 = groups()
        c.check(r2 == r1b == r0, "phase 2 frozen-parameter hash unchanged")
        c.check(e2 != e1 and a2 != a1, "phase 2 embeddings and adapters changed")


# 7 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def timed_run():
    start = time.perf_counter()
    run = run_toy()
    raw, _ = generate(run["backend"], GenerationRequest(num_images=4, seed=0))
    run["images"] = raw
    run["seconds"] = time.perf_counter() - start
    return run


def test_criterion_07_toy_end_to_end(timed_run):
    with criterion(7, "toy end-to-end 300 + 300 steps, seed 0") as c:
        h = timed_run["trainer"].history
        src1 = micro_mean(h, 1, "mask", task="source")
        src_all = src1 + micro_mean(h, 2, "mask", task="source")
        for name, trace in (("whole run", src_all), ("phase 1", src1)):
            ma = moving_average(trace, 20)
            drop = 1 - ma[-1] / ma[0]
            c.check(drop >= 0.5, f"(a) source masked loss 20-step MA drop over {name} {drop:.3f} (>= 0.5)")
        ar = micro_mean(h, 2, "attn")
        first, last = float(np.mean(ar[:50])), float(np.mean(ar[-50:]))
        c.check(last < first, f"(b) AR first 50 {first:.4f} -> last 50 {last:.4f}")
        ref = timed_run["trainer"].concepts["reference"]
        corr = [pearson(img[:, m.bitmap == 1].numpy(), x[:, m.bitmap == 1].numpy())
                for img in timed_run["images"] for x, m in zip(ref.images, ref.masks)]
        c.check(len(timed_run["images"]) == 4 and min(corr) > 0.5,
                f"(c) min non-face Pearson vs reference {min(corr):.3f} (> 0.5)")
        c.check(timed_run["seconds"] < 300, f"runtime {timed_run['seconds']:.1f}s")


# 8 ---------------------------------------------------------------------------------

def test_criterion_08_determinism(timed_run, trained_run, tmp_path):
    with criterion(8, "two seeded toy runs are bit-identical") as c:
        a, b = timed_run, trained_run
        c.check(a["trainer"].history == b["trainer"].history,
                f"loss traces identical ({len(a['trainer'].history)} records)")
        for key in ("ck1", "ck2"):
            a[key].save(tmp_path / f"a_{key}")
            b[key].save(tmp_path / f"b_{key}")
            same = all((tmp_path / f"a_{key}" / f).read_bytes() == (tmp_path / f"b_{key}" / f).read_bytes()
                       for f in ("manifest.json", "embeddings.safetensors"))
            if key == "ck2":
                same &= (tmp_path / "a_ck2/lora.safetensors").read_bytes() == (tmp_path / "b_ck2/lora.safetensors").read_bytes()
            c.check(same and a[key].digest() == b[key].digest(), f"{key} files and digest identical")


# 9 ---------------------------------------------------------------------------------

def test_criterion_09_metric_sanity():
    with criterion(9, "metric self-evaluation, ranges and skip accounting") as c:
        src = list(toy_concepts()[0].images)
        ref = list(toy_concepts()[1].images)
        face = np.zeros((32, 32), dtype=np.uint8)
        face[8:24, 8:24] = 1
        emb = ToyFaceEmbedder(FACE_BOX)
        cs = eval_csim(src, src, emb).value
        st = eval_style(ref, ref, ToyImageEmbedder(), [face] * 2, [face] * 2).value
        c.check(abs(cs - 1) <= 1e-5, f"CSIM self {cs:.8f}")
        c.check(abs(st - 1) <= 1e-5, f"style self {st:.8f}")

        rng = np.random.default_rng(0)
        noisy = [torch.from_numpy(rng.uniform(-1, 1, (3, 32, 32))) for _ in range(6)]
        rep = evaluate(noisy, src, ref, identity_embedder=emb, image_embedder=ToyImageEmbedder(),
                       generated_face_masks=[face] * 6, reference_face_masks=[face] * 2)
        values = [rep.csim, rep.style] + [r[k] for r in rep.per_image for k in ("csim", "style")]
        c.check(all(-1 <= v <= 1 for v in values), "csim / style within [-1, 1]")
        try:
            EvalReport(csim=1.2)
            c.check(False, "out-of-range report rejected")
        except DomainError:
            c.check(True, "out-of-range report rejected")

        blank = [torch.zeros(3, 32, 32)] * 2
        partial = eval_csim(src + blank, src, emb)
        none = evaluate(blank, src, ref, identity_embedder=emb, image_embedder=ToyImageEmbedder(),
                        generated_face_masks=[face] * 2, reference_face_masks=[face] * 2)
        c.check(partial.coverage == 0.5, f"CSIM coverage {partial.coverage} with 2 of 4 faceless")
        c.check(none.csim is None and any("csim absent" in n for n in none.notices),
                "no detectable face: CSIM absent with notice")
        c.check(all(r["face_detected"] is False for r in none.per_image), "per-image detection recorded")

        class Never:
            def detect(self, image):
                return None

            def embed(self, crop):
                raise AssertionError

        tr = Trainer(small_config(phase2_steps=1, task_mix=(0, 0, 1), id_max_skip_rate=1.0), toy_concepts(),
                     ToyBackend(), embedder=Never())
        tr.run_phase2()
        c.check(tr.id_skips == tr.id_attempts == 4 and all(r["id_skipped"] for r in tr.history if r["kind"] == "micro"),
                "identity skips counted in trainer and trace")
        tr2 = Trainer(small_config(phase2_steps=10, task_mix=(0, 0, 1)), toy_concepts(), ToyBackend(), embedder=Never())
        try:
            tr2.run_phase2()
            c.check(False, "skip rate above bound fails the run")
        except TrainingFailure as exc:
            c.check("20/20" in str(exc), "skip rate above bound fails the run")


# 10 --------------------------------------------------------------------------------

def test_criterion_10_cli_contract(cli_projects, tmp_path, monkeypatch):
    with criterion(10, "CLI split vs whole, exit codes, provenance round trip") as c:
        whole, split = cli_projects["whole"], cli_projects["split"]
        c.check(cli_projects["codes"] == [0] * 5, f"training exit codes {cli_projects['codes']}")
        d_whole = directory_digest(whole / "checkpoints/phase2")
        c.check(d_whole == directory_digest(split / "checkpoints/phase2"), f"phase-2 digest {d_whole[:12]} identical")

        def fresh(name):
            main(["init-toy", str(tmp_path / name)])
            return str(tmp_path / name)

        fast = ["--set", "train.phase1_steps=1", "--set", "train.phase2_steps=1"]
        codes = {}
        codes[0] = main(["generate", "--config", str(whole), "--steps", "5", "--count", "1", "--out", "outputs/c10"])
        p = fresh("missing")
        for sub in Path(p, "source").iterdir():
            sub.unlink()
        codes[2] = main(["train", "--config", p, *fast])
        codes[3] = main(["train", "--config", str(whole)])
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        (plugin_dir / "broken.py").write_text("raise RuntimeError('weights missing')\n")
        monkeypatch.setenv("CONCEPTFUSE_PLUGIN_PATH", str(plugin_dir))
        codes[4] = main(["train", "--config", fresh("plugin"), *fast])
        monkeypatch.delenv("CONCEPTFUSE_PLUGIN_PATH")
        codes[5] = main(["train", "--config", fresh("invariant"), "--set", "train.phase1_steps=0",
                         "--set", "train.phase2_steps=8", "--set", "train.task_mix=[0,0,1]",
                         "--set", 'plugins.identity_options={"min_std": 100}'])
        c.check(all(code == want for want, code in codes.items()), f"exit codes {codes}")

        ck = whole / "checkpoints/phase2"
        prov = json.loads((ck / "provenance.json").read_text())
        c.check(prov["digest"] == directory_digest(ck) and prov["config"] == load_config(whole / "config.toml")
                and all(file_sha256(k) == v for k, v in prov["inputs"].items()), "checkpoint provenance matches")
        out = whole / "outputs/c10"
        side = read_sidecar(out / "img_000.png")
        gprov = json.loads((out / "provenance.json").read_text())
        argv = list(gprov["command"][1:])
        argv[argv.index("--out") + 1] = "outputs/c10_rerun"
        rerun = main(argv)
        same = np.array_equal(np.asarray(load_image(out / "img_000.png")),
                              np.asarray(load_image(whole / "outputs/c10_rerun/img_000.png")))
        c.check(rerun == 0 and same and side["checkpoint_digest"] == d_whole,
                "generation re-run from provenance reproduces the image")
