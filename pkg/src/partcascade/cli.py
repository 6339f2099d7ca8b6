"""Command-line interface.

Subcommands: gendata, train, sample, complete, mix, eval, serve. Outputs
are deterministic given identical flags and seed. On failure a single
machine-readable line ``{"error": "..."}`` goes to stderr and the exit code
is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import denoiser as dn
from . import trainer as tr
from .formats import load_checkpoint, load_shapes, save_checkpoint, save_shapes
from .metrics import cov_mmd_nna
from .parts import PartMask, mask_for_label
from .sampler import complete_part, mix_and_refine, sample_cascade
from .schedule import NoiseSchedule
from .server import http_serve, text_part_selector
from .tensor import RandomSource
from .toyworld import (ToyDataset, ToySpec, generate_dataset,
                       label_parts_by_height, sample_points, tokenize)

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partcascade",
        description="Cascaded part-level diffusion over toy 3D shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate a procedural dataset")
    p.add_argument("--family", choices=("chair", "table"), default="table")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--d-s", type=int, default=32)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train the cascade on a dataset")
    p.add_argument("--phase", choices=("1", "2", "both"), default="both")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--t", type=int, default=200, dest="T")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.25)
    p.add_argument("--text", action="store_true",
                   help="train with text conditioning and CFG dropout")
    p.add_argument("--ckpt-every", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("sample", help="generate shapes from checkpoints")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--n-samples", type=int, default=16)
    p.add_argument("--n-parts", type=int, default=0,
                   help="0 = use the training-time part count")
    p.add_argument("--text", default=None)
    p.add_argument("--w", type=float, default=2.0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("complete", help="regenerate masked parts of shapes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="source shape file")
    p.add_argument("--index", type=int, default=0, help="shape index")
    p.add_argument("--mask-label", type=int, default=None)
    p.add_argument("--text", default=None,
                   help="caption; selects parts when no --mask-label")
    p.add_argument("--w", type=float, default=2.0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("mix", help="swap a labeled part between two shapes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index-a", type=int, required=True)
    p.add_argument("--index-b", type=int, required=True)
    p.add_argument("--mask-label", type=int, required=True)
    p.add_argument("--t-start", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="set metrics between two shape files")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--dist", choices=("cd", "emd"), default="cd")
    p.add_argument("--completion-mode", action="store_true")
    p.add_argument("--out", required=True, help="report prefix (.json, .csv)")
    _add_common(p)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8765)

    return parser


# -- helpers -------------------------------------------------------------------


def _ckpt_paths(ckpt_dir: str) -> tuple[str, str]:
    p1 = os.path.join(ckpt_dir, "phase1.ckpt")
    p2 = os.path.join(ckpt_dir, "phase2.ckpt")
    for p in (p1, p2):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing checkpoint {p}")
    return p1, p2


def _load_pair(ckpt_dir: str):
    p1path, p2path = _ckpt_paths(ckpt_dir)
    params1, h1 = load_checkpoint(p1path)
    params2, h2 = load_checkpoint(p2path)
    sched = NoiseSchedule.from_header(h1["schedule"])
    return params1, params2, sched, h1


def _dataset_from_file(path: str) -> ToyDataset:
    shapes, captions = load_shapes(path)
    family = "chair" if shapes[0].n_parts == 6 else "table"
    ds = ToyDataset(ToySpec(family=family, d_s=shapes[0].d_s))
    for s, c in zip(shapes, captions):
        ds.shapes.append(s)
        ds.caption_ids.append(c)
        ds.caption_texts.append("")
    return ds


# -- subcommands ----------------------------------------------------------------


def cmd_gendata(args) -> int:
    spec = ToySpec(family=args.family, rng_seed=args.seed, d_s=args.d_s)
    ds = generate_dataset(spec, args.count)
    save_shapes(args.out, ds.shapes, ds.caption_ids)
    print(json.dumps({"written": args.out, "count": len(ds)}))
    return 0


def cmd_train(args) -> int:
    ds = _dataset_from_file(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    tc = tr.TrainConfig(batch=args.batch, lr=args.lr, total_steps=args.steps,
                        T=args.T, beta_start=args.beta_start,
                        beta_end=args.beta_end, seed=args.seed)
    n_parts = ds.shapes[0].n_parts
    header = {
        "schedule": tc.schedule().header(),
        "train": tc.to_json(),
        "n_parts": n_parts,
        "seed": args.seed,
    }

    def ckpt_cb_for(path):
        def cb(step, params):
            save_checkpoint(path, params, {**header, "step": step})
        return cb

    if args.phase in ("1", "both"):
        dconf = tr.toy_denoiser_config(16, text=args.text)
        path = os.path.join(args.out, "phase1.ckpt")
        res = tr.train_phase1(ds, dconf, tc, ckpt_cb_for(path),
                              args.ckpt_every)
        save_checkpoint(path, res.params, {**header, "step": args.steps})
        res.write_curve(os.path.join(args.out, "curve_phase1.csv"))
        print(json.dumps({"phase": 1, "final_loss": res.final_loss(),
                          "skipped_steps": res.skipped_steps}))
    if args.phase in ("2", "both"):
        dconf = tr.toy_denoiser_config(ds.shapes[0].d_s, phase2=True,
                                       text=args.text)
        path = os.path.join(args.out, "phase2.ckpt")
        res = tr.train_phase2(ds, dconf, tc, ckpt_cb_for(path),
                              args.ckpt_every)
        save_checkpoint(path, res.params, {**header, "step": args.steps})
        res.write_curve(os.path.join(args.out, "curve_phase2.csv"))
        print(json.dumps({"phase": 2, "final_loss": res.final_loss(),
                          "skipped_steps": res.skipped_steps}))
    return 0


def cmd_sample(args) -> int:
    params1, params2, sched, h1 = _load_pair(args.ckpt)
    n_parts = args.n_parts or int(h1.get("n_parts", 5))
    text = None
    if args.text:
        text = tuple(tokenize(args.text))
    texts = None if text is None else [text] * args.n_samples
    shapes = sample_cascade(params1, params2, args.n_samples, n_parts,
                            sched, RandomSource(args.seed),
                            texts=texts, w=args.w if text else 0.0)
    save_shapes(args.out, shapes)
    print(json.dumps({"written": args.out, "count": len(shapes)}))
    return 0


def cmd_complete(args) -> int:
    params1, params2, sched, _ = _load_pair(args.ckpt)
    shapes, _ = load_shapes(args.dataset)
    if not 0 <= args.index < len(shapes):
        raise IndexError(f"shape index {args.index} out of range")
    src = shapes[args.index]
    if src.labels is None:
        src.labels = label_parts_by_height(src)

    text_ids = tuple(tokenize(args.text)) if args.text else None
    if args.mask_label is not None:
        mask, found = mask_for_label(src.labels, args.mask_label)
    elif text_ids is not None:
        mask, found = text_part_selector(text_ids, src.labels)
    else:
        raise ValueError("complete needs --mask-label or --text")
    if not found:
        print(json.dumps({"warning": "no part matched; preserving all"}),
              file=sys.stderr)

    texts = [text_ids] if (text_ids and params1.config.text_dim) else None
    out = complete_part(params1, params2, src, mask, sched,
                        RandomSource(args.seed), texts=texts,
                        w=args.w if texts else 0.0)
    save_shapes(args.out, [out])
    print(json.dumps({"written": args.out,
                      "regenerated": int((mask.values == 0).sum())}))
    return 0


def cmd_mix(args) -> int:
    params1, params2, sched, _ = _load_pair(args.ckpt)
    shapes, _ = load_shapes(args.dataset)
    a, b = shapes[args.index_a], shapes[args.index_b]
    for s in (a, b):
        if s.labels is None:
            s.labels = label_parts_by_height(s)
    out = mix_and_refine(params1, params2, a, b, args.mask_label, sched,
                         RandomSource(args.seed), t_start=args.t_start)
    save_shapes(args.out, [out])
    print(json.dumps({"written": args.out, "t_start": args.t_start}))
    return 0


def cmd_eval(args) -> int:
    gen_shapes, _ = load_shapes(args.generated)
    ref_shapes, _ = load_shapes(args.reference)
    # index-aligned cloud seeds: identical shape lists give identical clouds
    children = RandomSource(args.seed).spawn(max(len(gen_shapes),
                                                 len(ref_shapes)))
    seeds = [int(c.integers(0, 2**31)) for c in children]
    gen = [sample_points(s, args.points, seeds[i])
           for i, s in enumerate(gen_shapes)]
    ref = [sample_points(s, args.points, seeds[i])
           for i, s in enumerate(ref_shapes)]
    report = cov_mmd_nna(gen, ref, dist=args.dist,
                         completion_mode=args.completion_mode,
                         seed=args.seed)
    with open(args.out + ".json", "w") as f:
        f.write(report.to_json())
    with open(args.out + ".csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["cov", report.cov])
        w.writerow(["mmd", report.mmd])
        w.writerow(["nna", report.nna])
    print(report.to_json())
    return 0


def cmd_serve(args) -> int:
    p1, p2 = _ckpt_paths(args.ckpt)
    http_serve(p1, p2, args.port)
    return 0


_COMMANDS = {
    "gendata": cmd_gendata,
    "train": cmd_train,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "mix": cmd_mix,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
