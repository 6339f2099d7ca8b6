"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured numbers.

Run with `pytest tests/test_acceptance.py -v -s`. The two model-quality
criteria train real (toy-scale) models and dominate the runtime; everything
else finishes in seconds.
"""

import json
import subprocess
import sys
import time
import urllib.request

import numpy as np
import pytest
from scipy.stats import ortho_group

from partcascade import denoiser as dn
from partcascade import sampler as sp
from partcascade import tensor as tk
from partcascade import trainer as tr
from partcascade.formats import load_checkpoint, load_shapes, save_checkpoint, save_shapes
from partcascade.metrics import chamfer, cov_mmd_nna, emd
from partcascade.parts import (PartMask, PartSet, denormalize_extrinsics,
                               mask_for_label, project_O3, transfer_labels)
from partcascade.schedule import make_linear_schedule
from partcascade.tensor import RandomSource, Tensor
from partcascade.toyworld import (LABELS, ToySpec, generate_dataset,
                                  sample_labeled_points, sample_points)

from oracles import chamfer_brute, emd_brute, fd_check

SLOW = pytest.mark.slow


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- trained toy models (shared, slow) -----------------------------------------


@pytest.fixture(scope="module")
def e2e_table():
    """512 training tables + 64 held out, both phases trained at the pinned
    budget (d_s=32, embed 64, T=200, 20k steps, batch 32)."""
    ds = generate_dataset(ToySpec(family="table", rng_seed=101, d_s=32), 576)
    train, held = ds.split(64, seed=202)
    tc = tr.TrainConfig(batch=32, total_steps=20000, T=200, beta_end=0.25,
                        seed=11)
    t0 = time.monotonic()
    res1 = tr.train_phase1(train, tr.toy_denoiser_config(16), tc)
    res2 = tr.train_phase2(train, tr.toy_denoiser_config(32, phase2=True), tc)
    minutes = (time.monotonic() - t0) / 60.0
    return {
        "train": train, "held": held, "sched": tc.schedule(),
        "params1": res1.params, "params2": res2.params,
        "loss1": res1.final_loss(), "loss2": res2.final_loss(),
        "train_minutes": minutes,
    }


@pytest.fixture(scope="module")
def chair_model():
    """Chair-world cascade used by the completion criterion."""
    ds = generate_dataset(ToySpec(family="chair", rng_seed=303, d_s=32), 256)
    tc = tr.TrainConfig(batch=32, total_steps=12000, T=200, beta_end=0.25,
                        seed=21)
    res1 = tr.train_phase1(ds, tr.toy_denoiser_config(16), tc)
    res2 = tr.train_phase2(ds, tr.toy_denoiser_config(32, phase2=True), tc)
    return {"ds": ds, "sched": tc.schedule(),
            "params1": res1.params, "params2": res2.params}


# -- criterion: autodiff gradient check ------------------------------------------


def test_autodiff_gradient_check():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    total_checked = total_ok = 0

    with tk.using_dtype(np.float64):
        # every layer type, all coordinates
        probes = []
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        probes.append(([a, b], lambda: tk.tsum(tk.silu(tk.matmul(a, b)))))
        c = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
        c_probe = Tensor(rng.standard_normal((2, 3, 6)))
        probes.append(([c], lambda: tk.tsum(tk.mul(
            tk.layernorm(c, -1), c_probe))))
        d = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        probes.append(([d], lambda: tk.tsum(tk.mul(
            tk.softmax(d, -1), Tensor(np.arange(10.0).reshape(2, 5))))))
        e = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        f = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        probes.append(([e, f], lambda: tk.mse(tk.silu(e), f)))
        g = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        probes.append(([g], lambda: tk.tsum(
            tk.silu(tk.concat([g[0:2], g[2:4]], axis=0)))))
        tab = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        probes.append(([tab], lambda: tk.tsum(
            tk.silu(tk.gather_rows(tab, np.array([0, 2, 2, 4]))))))
        for tensors, build in probes:
            checked, ok = fd_check(build, tensors, rng)
            total_checked += checked
            total_ok += ok

        # full small denoiser: random coordinate subset across all tensors
        cfg = dn.DenoiserConfig(token_dim=16, embed_dim=32, depth=2, heads=4,
                                gamma_dim=8, mlp_ratio=2)
        params = dn.init_params(cfg, RandomSource(2))
        r2 = RandomSource(3)
        for t in params.tensors.values():
            t.data = (r2.normal(t.shape) * 0.08).astype(t.data.dtype)
        x = rng.standard_normal((2, 3, 16))
        target = Tensor(rng.standard_normal((2, 3, 16)))

        def build():
            return tk.mse(dn.predict_eps_phase1(params, x, 7), target)

        checked, ok = fd_check(build, list(params.tensors.values()), rng,
                               max_coords_per_tensor=6)
        total_checked += checked
        total_ok += ok

    frac = total_ok / total_checked
    secs = time.monotonic() - t0
    _report("autodiff-gradient-check",
            frac >= 0.99 and secs < 60,
            f"{total_ok}/{total_checked} coords within 1e-4 "
            f"({100*frac:.2f}%), {secs:.1f}s")


# -- criterion: forward-process equivalence ----------------------------------------


def test_forward_process_equivalence():
    t0 = time.monotonic()
    sched = make_linear_schedule(50)
    n = 10_000
    x0 = 1.3
    rng = np.random.default_rng(42)
    x = np.full(n, x0)
    ok = True
    details = []
    for t in range(1, 51):
        x = (np.sqrt(1.0 - sched.beta[t]) * x
             + np.sqrt(sched.beta[t]) * rng.standard_normal(n))
        if t in (1, 25, 50):
            want_mean = np.sqrt(sched.alpha_bar[t]) * x0
            want_var = 1.0 - sched.alpha_bar[t]
            z_mean = abs(x.mean() - want_mean) / np.sqrt(want_var / n)
            z_var = abs(x.var() - want_var) / (want_var * np.sqrt(2 / (n - 1)))
            ok = ok and z_mean < 3 and z_var < 3
            details.append(f"t={t}: z_mean={z_mean:.2f} z_var={z_var:.2f}")
    secs = time.monotonic() - t0
    _report("forward-process-equivalence", ok and secs < 60,
            "; ".join(details) + f", {secs:.1f}s")


# -- criterion: permutation equivariance -------------------------------------------


def test_permutation_equivariance():
    t0 = time.monotonic()
    worst = 0.0
    count = 0
    rng = np.random.default_rng(5)
    for trial in range(10):
        emb = int(rng.choice([16, 32, 64]))
        n = int(rng.integers(2, 9))
        cfg1 = dn.DenoiserConfig(token_dim=16, embed_dim=emb, heads=4,
                                 depth=int(rng.integers(1, 3)), gamma_dim=8,
                                 mlp_ratio=2)
        p1 = dn.init_params(cfg1, RandomSource(100 + trial))
        r = RandomSource(200 + trial)
        for t in p1.tensors.values():
            t.data = (r.normal(t.shape) * 0.1).astype(np.float32)
        cfg2 = dn.DenoiserConfig(token_dim=12, embed_dim=emb, heads=4,
                                 depth=1, gamma_dim=8, mlp_ratio=2,
                                 with_extrinsic_cond=True, enc_depth=1)
        p2 = dn.init_params(cfg2, RandomSource(300 + trial))
        for t in p2.tensors.values():
            t.data = (r.normal(t.shape) * 0.1).astype(np.float32)

        x = rng.standard_normal((2, n, 16)).astype(np.float32)
        s = rng.standard_normal((2, n, 12)).astype(np.float32)
        e0 = rng.standard_normal((2, n, 16)).astype(np.float32)
        out1 = dn.predict_eps_phase1(p1, x, 3).data
        out2 = dn.predict_eps_phase2(p2, s, 3, e0).data
        for _ in range(5):
            perm = rng.permutation(n)
            d1 = np.abs(dn.predict_eps_phase1(p1, x[:, perm], 3).data
                        - out1[:, perm]).max()
            d2 = np.abs(dn.predict_eps_phase2(p2, s[:, perm], 3,
                                              e0[:, perm]).data
                        - out2[:, perm]).max()
            worst = max(worst, float(d1), float(d2))
            count += 2
    secs = time.monotonic() - t0
    _report("permutation-equivariance", worst < 1e-5 and secs < 30,
            f"{count} permutation checks, max |dev| = {worst:.2e}, {secs:.1f}s")


# -- criterion: preservation guarantee ----------------------------------------------


def test_preservation_guarantee():
    t0 = time.monotonic()
    sched = make_linear_schedule(25, 1e-4, 0.2)
    cfg = dn.DenoiserConfig(token_dim=16, embed_dim=32, depth=1, heads=4,
                            gamma_dim=8, mlp_ratio=2)
    params = dn.init_params(cfg, RandomSource(6))
    r = RandomSource(7)
    for t in params.tensors.values():
        t.data = (r.normal(t.shape) * 0.1).astype(np.float32)

    def eps_fn(x, t):
        return dn.predict_eps_phase1(params, x, t).data

    rng = np.random.default_rng(8)
    exact = 0
    for trial in range(100):
        x0 = rng.standard_normal((1, 6, 16)).astype(np.float32)
        mask = (rng.random(6) < rng.uniform(0.2, 0.8)).astype(np.int64)
        out = sp.guided_reverse(eps_fn, x0, mask, sched,
                                RandomSource(9000 + trial))
        keep = mask == 1
        exact += int(np.array_equal(out[0, keep], x0[0, keep]))

    zeros = np.zeros(6, np.int64)
    x0 = np.zeros((1, 6, 16), np.float32)
    guided = sp.guided_reverse(eps_fn, x0, zeros, sched, RandomSource(77))
    plain = sp.ancestral_sample(eps_fn, (1, 6, 16), sched, RandomSource(77))
    reduction_ok = np.array_equal(guided, plain)

    secs = time.monotonic() - t0
    _report("preservation-guarantee",
            exact == 100 and reduction_ok and secs < 60,
            f"bit-exact on {exact}/100 masked runs, "
            f"all-zeros==unconditional: {reduction_ok}, {secs:.1f}s")


# -- criterion: Procrustes suite ------------------------------------------------------


def test_procrustes_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(9)
    candidates = ortho_group.rvs(3, size=10_000, random_state=13)
    worst_orth = worst_idem = 0.0
    optimal = True
    for _ in range(100):
        U = rng.standard_normal((3, 3)) * rng.uniform(0.2, 3.0)
        P = project_O3(U)
        worst_orth = max(worst_orth, float(np.abs(P.T @ P - np.eye(3)).max()))
        worst_idem = max(worst_idem, float(np.abs(project_O3(P) - P).max()))
        d_proj = np.linalg.norm(U - P)
        traces = np.einsum("ij,kij->k", U, candidates)
        d_cand = np.sqrt(np.sum(U * U) + 3.0 - 2.0 * traces).min()
        optimal = optimal and d_proj <= d_cand + 1e-9
    secs = time.monotonic() - t0
    _report("procrustes-suite",
            worst_orth <= 1e-9 and worst_idem <= 1e-8 and optimal
            and secs < 30,
            f"orthogonality {worst_orth:.1e}, idempotence {worst_idem:.1e}, "
            f"optimal vs 10^4 candidates x100: {optimal}, {secs:.1f}s")


# -- criterion: CFG reduction ----------------------------------------------------------


def test_cfg_reduction():
    t0 = time.monotonic()
    cfg = dn.DenoiserConfig(token_dim=16, embed_dim=32, depth=1, heads=4,
                            gamma_dim=8, mlp_ratio=2, text_dim=6,
                            vocab_size=12)
    params = dn.init_params(cfg, RandomSource(10))
    r = RandomSource(11)
    for t in params.tensors.values():
        t.data = (r.normal(t.shape) * 0.1).astype(np.float32)
    x = RandomSource(12).normal((2, 4, 16))
    texts = [(1, 3), (2,)]
    w0 = sp.cfg_predict(params, x, 5, texts, w=0.0)
    cond = dn.predict_eps_phase1(params, x, 5, texts=texts).data
    wm1 = sp.cfg_predict(params, x, 5, texts, w=-1.0)
    null = dn.predict_eps_phase1(params, x, 5, texts=[None, None]).data
    ok = np.array_equal(w0, cond) and np.array_equal(wm1, null)
    secs = time.monotonic() - t0
    _report("cfg-reduction", ok and secs < 10,
            f"w=0 bit-equals conditional and w=-1 bit-equals unconditional: "
            f"{ok}, {secs:.1f}s")


# -- criterion: EMD/chamfer exactness ----------------------------------------------------


def test_emd_and_chamfer_exactness():
    t0 = time.monotonic()
    rng = np.random.default_rng(14)
    emd_ok = 0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        a = rng.standard_normal((n, 3))
        b = rng.standard_normal((n, 3))
        if abs(emd(a, b) - emd_brute(a, b)) < 1e-10:
            emd_ok += 1
    cham_ok = 0
    for _ in range(20):
        a = rng.standard_normal((32, 3))
        b = rng.standard_normal((32, 3))
        if abs(chamfer(a, b) - chamfer_brute(a, b)) < 1e-10:
            cham_ok += 1
    secs = time.monotonic() - t0
    _report("emd-chamfer-exactness",
            emd_ok == 200 and cham_ok == 20 and secs < 60,
            f"emd {emd_ok}/200 vs factorial oracle, "
            f"chamfer {cham_ok}/20 vs O(n^2) oracle, {secs:.1f}s")


# -- criterion: toy end-to-end generation ------------------------------------------------


@SLOW
def test_toy_end_to_end_generation(e2e_table):
    d = e2e_table
    losses_ok = d["loss1"] < 0.35 and d["loss2"] < 0.35
    time_ok = d["train_minutes"] < 45

    samples = sp.sample_cascade(d["params1"], d["params2"], 200, 5,
                                d["sched"], RandomSource(33))
    nonempty = 0
    for i, s in enumerate(samples):
        try:
            if len(sample_points(s, 16, seed=1000 + i)) == 16:
                nonempty += 1
        except Exception:
            pass

    stats = d["params1"].stats
    rng = RandomSource(44)
    prior = []
    for _ in range(200):
        ext = sp.fix_extrinsics(denormalize_extrinsics(rng.normal((5, 16)),
                                                       stats))
        prior.append(PartSet(ext, rng.normal((5, 32))))

    children = RandomSource(55).spawn(600)
    seeds = [int(c.integers(0, 2**31)) for c in children]
    gen_clouds = [sample_points(s, 512, seeds[i])
                  for i, s in enumerate(samples)]
    ref_clouds = [sample_points(s, 512, seeds[200 + i])
                  for i, s in enumerate(d["held"].shapes)]
    prior_clouds = [sample_points(s, 512, seeds[264 + i])
                    for i, s in enumerate(prior)]

    rep = cov_mmd_nna(gen_clouds, ref_clouds, dist="cd")
    rep_prior = cov_mmd_nna(prior_clouds, ref_clouds, dist="cd")
    nna_ok = 0.50 <= rep.nna <= 0.85
    mmd_ok = rep.mmd * 2.0 <= rep_prior.mmd

    _report("toy-end-to-end-generation",
            losses_ok and time_ok and nna_ok and mmd_ok and nonempty >= 190,
            f"L_e={d['loss1']:.3f} L_s={d['loss2']:.3f} (<0.35), "
            f"train={d['train_minutes']:.1f}min (<45), "
            f"1-NNA(CD)={rep.nna:.3f} in [0.50,0.85], "
            f"MMD(CD)={rep.mmd:.4f} vs prior {rep_prior.mmd:.4f} "
            f"({rep_prior.mmd/rep.mmd:.1f}x), nonempty {nonempty}/200")


# -- criterion: toy completion -----------------------------------------------------------


@SLOW
def test_toy_completion(chair_model):
    d = chair_model
    t0 = time.monotonic()
    total = leg_hits = preserved_ok = 0
    for i in range(50):
        src = d["ds"].shapes[i]
        mask, found = mask_for_label(src.labels, LABELS["leg"])
        assert found
        out = sp.complete_part(d["params1"], d["params2"], src, mask,
                               d["sched"], RandomSource(7000 + i))
        keep = mask.values == 1
        preserved_ok += int(
            np.array_equal(out.extrinsics[keep], src.extrinsics[keep])
            and np.array_equal(out.intrinsics[keep], src.intrinsics[keep]))
        pts, pls = sample_labeled_points(src, 2048, seed=8000 + i)
        got = transfer_labels(out, pts, pls)
        regen = mask.values == 0
        total += int(regen.sum())
        leg_hits += int((got[regen] == LABELS["leg"]).sum())
    minutes = (time.monotonic() - t0) / 60.0
    frac = leg_hits / total
    _report("toy-completion",
            frac >= 0.60 and preserved_ok == 50 and minutes < 10,
            f"leg label transfer {leg_hits}/{total} ({100*frac:.0f}% >= 60%), "
            f"preserved bit-exact {preserved_ok}/50, {minutes:.1f}min (<10)")


# -- criterion: mix-and-refine locality -----------------------------------------------------


@SLOW
def test_mix_and_refine_locality(e2e_table):
    d = e2e_table
    rng = RandomSource(66)
    refined_d = []
    fresh_d = []
    for k in range(20):
        a = d["held"].shapes[2 * k]
        b = d["held"].shapes[2 * k + 1]
        naive = sp.mix_and_refine(d["params1"], d["params2"], a, b,
                                  LABELS["top"], d["sched"],
                                  RandomSource(500 + k), t_start=0)
        refined = sp.mix_and_refine(d["params1"], d["params2"], a, b,
                                    LABELS["top"], d["sched"],
                                    RandomSource(500 + k), t_start=10)
        fresh = sp.sample_cascade(d["params1"], d["params2"], 1, 5,
                                  d["sched"], RandomSource(600 + k))[0]
        pn = sample_points(naive, 512, seed=700 + k)
        pr = sample_points(refined, 512, seed=800 + k)
        pf = sample_points(fresh, 512, seed=900 + k)
        refined_d.append(chamfer(pr, pn))
        fresh_d.append(chamfer(pf, pn))
    med_r = float(np.median(refined_d))
    med_f = float(np.median(fresh_d))
    _report("mix-and-refine-locality", med_r < med_f,
            f"median CD(refined, naive)={med_r:.4f} < "
            f"median CD(fresh, naive)={med_f:.4f} over 20 pairs")


# -- criterion: formats + CLI smoke ------------------------------------------------------------


@SLOW
def test_formats_and_cli_smoke(tmp_path):
    t0 = time.monotonic()

    # byte-exact roundtrips
    ds = generate_dataset(ToySpec(family="chair", rng_seed=15, d_s=8), 4)
    spath = tmp_path / "shapes.bin"
    save_shapes(spath, ds.shapes, ds.caption_ids)
    shapes, caps = load_shapes(spath)
    shapes_ok = caps == ds.caption_ids and all(
        np.array_equal(a.extrinsics, b.extrinsics)
        and np.array_equal(a.intrinsics, b.intrinsics)
        for a, b in zip(shapes, ds.shapes))

    cfg = dn.DenoiserConfig(token_dim=16, embed_dim=32, depth=1, heads=4,
                            gamma_dim=8)
    params = dn.init_params(cfg, RandomSource(16))
    cpath = tmp_path / "m.ckpt"
    save_checkpoint(cpath, params, {"schedule": make_linear_schedule(10).header()})
    loaded, _ = load_checkpoint(cpath)
    ckpt_ok = all(np.array_equal(loaded[n].data, params[n].data)
                  for n in params.names())

    # every CLI subcommand, tiny budget
    def cli(*args):
        return subprocess.run([sys.executable, "-m", "partcascade.cli",
                               *args], capture_output=True, text=True)

    data = tmp_path / "tables.bin"
    ckpt = tmp_path / "ckpt"
    steps = [
        ("gendata", ["gendata", "--family", "table", "--count", "16",
                     "--d-s", "8", "--seed", "3", "--out", str(data)]),
        ("train", ["train", "--dataset", str(data), "--out", str(ckpt),
                   "--steps", "60", "--batch", "8", "--t", "50",
                   "--seed", "1"]),
        ("sample", ["sample", "--ckpt", str(ckpt), "--n-samples", "2",
                    "--seed", "5", "--out", str(tmp_path / "s.bin")]),
        ("complete", ["complete", "--ckpt", str(ckpt), "--dataset", str(data),
                      "--index", "0", "--mask-label", "1", "--seed", "2",
                      "--out", str(tmp_path / "c.bin")]),
        ("mix", ["mix", "--ckpt", str(ckpt), "--dataset", str(data),
                 "--index-a", "0", "--index-b", "1", "--mask-label", "4",
                 "--t-start", "5", "--seed", "2",
                 "--out", str(tmp_path / "x.bin")]),
        ("eval", ["eval", "--generated", str(data), "--reference", str(data),
                  "--points", "32", "--seed", "4",
                  "--out", str(tmp_path / "rep")]),
    ]
    cli_ok = True
    failed = []
    for name, args in steps:
        proc = cli(*args)
        if proc.returncode != 0:
            cli_ok = False
            failed.append(f"{name}: {proc.stderr.strip()[:200]}")

    # serve: start, health-check, kill
    proc = subprocess.Popen(
        [sys.executable, "-m", "partcascade.cli", "serve", "--ckpt",
         str(ckpt), "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    try:
        line = proc.stdout.readline().strip()
        port = int(line.rsplit(":", 1)[-1])
        with urllib.request.urlopen(f"http://127.0.0.1:{port}/health",
                                    timeout=10) as resp:
            serve_ok = json.loads(resp.read()) == {"status": "ok"}
    finally:
        proc.terminate()
        proc.wait(timeout=10)

    minutes = (time.monotonic() - t0) / 60.0
    _report("formats-and-cli-smoke",
            shapes_ok and ckpt_ok and cli_ok and serve_ok and minutes < 5,
            f"roundtrips bit-exact: {shapes_ok and ckpt_ok}, "
            f"subcommands ok: {cli_ok} {failed}, serve: {serve_ok}, "
            f"{minutes:.1f}min (<5)")
