"""Inference-time processes: ancestral sampling, the two-phase cascade,
guided masked reverse for part completion, mix-and-refine, and
classifier-free guidance.

Every operation consumes noise from one explicit ``RandomSource`` in a fixed
draw order, so equal seeds give equal outputs. All reverse chains share one
step rule: x_{t-1} = mu + sqrt(beta_t) z for t > 1 and x_0 = mu (the final
step adds no noise), with mu = c_xt (x_t - c_eps eps_hat).

The guided reverse blends, per step t,

    x_unmasked ~ N(sqrt(abar_t) x0, (1 - abar_t) I)
    x_masked   ~ N(mu(x_t, t), beta_t I)
    x_{t-1}    = m * x_unmasked + (1 - m) * x_masked

and finally overwrites mask-1 tokens with x0 bit-exactly, which realizes the
preservation guarantee at output time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import tensor as tk
from .parts import (EXT_DIM, LAM_SLICE, U_SLICE, PartMask, PartSet,
                    clip_eigvals, denormalize_extrinsics,
                    normalize_extrinsics, project_O3)
from .schedule import NoiseSchedule, posterior_mean_coeffs, q_sample
from .tensor import RandomSource

__all__ = [
    "SampleRequest",
    "reverse_step",
    "cfg_predict",
    "cfg_predict_phase2",
    "ancestral_sample",
    "guided_reverse",
    "sample_cascade",
    "complete_part",
    "mix_and_refine",
    "refine_shape",
    "fix_extrinsics",
]


@dataclass
class SampleRequest:
    """Validated request for one inference operation."""

    mode: str = "generate"
    n: int = 1
    n_parts: int | None = None
    text: tuple | None = None
    source: PartSet | None = None
    source_b: PartSet | None = None
    mask: PartMask | None = None
    mix_label: int | None = None
    t_start: int | None = None
    w: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("generate", "complete", "mix", "refine"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "complete" and (self.source is None or self.mask is None):
            raise ValueError("complete needs a source shape and a mask")
        if self.mode == "mix" and (
                self.source is None or self.source_b is None
                or self.mix_label is None):
            raise ValueError("mix needs two sources and a part label")
        if self.mode == "refine" and (self.source is None or self.t_start is None):
            raise ValueError("refine needs a source shape and t_start")


def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                 sched: NoiseSchedule, rng: RandomSource) -> np.ndarray:
    """One ancestral reverse step. Deterministic at t=1 (no noise added)."""
    t = sched.check_t(t)
    x_t = np.asarray(x_t)
    c_xt, c_eps = posterior_mean_coeffs(t, sched)
    dt = x_t.dtype.type
    mu = dt(c_xt) * (x_t - dt(c_eps) * np.asarray(eps_hat, dtype=x_t.dtype))
    if t == 1:
        return mu
    sigma = dt(np.sqrt(sched.beta[t]))
    return mu + sigma * rng.normal(x_t.shape).astype(x_t.dtype)


# -- classifier-free guidance -------------------------------------------------


def _extrapolate(cond: np.ndarray, null: np.ndarray, w: float) -> np.ndarray:
    if w == 0.0:
        return cond
    if w == -1.0:
        return null
    dt = cond.dtype.type
    return dt(1.0 + w) * cond - dt(w) * null


def cfg_predict(params: dn.ModelParams, x_t, t, texts, w: float) -> np.ndarray:
    """(1+w) eps(x,t,c) - w eps(x,t,null) over phase-1 tokens."""
    if params.config.text_dim == 0:
        raise tk.ContractError("classifier-free guidance needs a text model")
    B = np.asarray(x_t).shape[0]
    cond = dn.predict_eps_phase1(params, x_t, t, texts=texts).data
    if w == 0.0:
        return cond
    null = dn.predict_eps_phase1(params, x_t, t, texts=[None] * B).data
    return _extrapolate(cond, null, w)


def cfg_predict_phase2(params: dn.ModelParams, s_t, t, e0, texts,
                       w: float) -> np.ndarray:
    """Guided phase-2 prediction; the null branch also zeroes the extrinsic
    features, matching the training-time condition dropout."""
    if params.config.text_dim == 0:
        raise tk.ContractError("classifier-free guidance needs a text model")
    B = np.asarray(s_t).shape[0]
    cond = dn.predict_eps_phase2(params, s_t, t, e0, texts=texts).data
    if w == 0.0:
        return cond
    null = dn.predict_eps_phase2(
        params, s_t, t, e0, texts=[None] * B,
        feat_mask=np.zeros(B, dtype=np.float32)).data
    return _extrapolate(cond, null, w)


def _make_eps_fn(params: dn.ModelParams, texts, w: float, e0=None):
    """Bind a model (+ condition) into an eps(x_t, t) closure."""
    phase2 = params.config.with_extrinsic_cond
    text_on = params.config.text_dim > 0
    if text_on and texts is not None:
        if phase2:
            return lambda x, t: cfg_predict_phase2(params, x, t, e0, texts, w)
        return lambda x, t: cfg_predict(params, x, t, texts, w)
    if phase2:
        return lambda x, t: dn.predict_eps_phase2(
            params, x, t, e0,
            texts=None if not text_on else [None] * np.asarray(x).shape[0]).data
    if text_on:
        return lambda x, t: dn.predict_eps_phase1(
            params, x, t, texts=[None] * np.asarray(x).shape[0]).data
    return lambda x, t: dn.predict_eps_phase1(params, x, t).data


# -- reverse chains -----------------------------------------------------------


def ancestral_sample(eps_fn, shape: tuple, sched: NoiseSchedule,
                     rng: RandomSource, t_start: int | None = None,
                     x_init: np.ndarray | None = None) -> np.ndarray:
    """Plain reverse chain from t_start down to 0."""
    t_start = sched.T if t_start is None else int(t_start)
    if x_init is None:
        x = rng.normal(shape)
    else:
        x = np.array(x_init, dtype=np.float32, copy=True)
    with tk.no_grad():
        for t in range(t_start, 0, -1):
            x = reverse_step(x, t, eps_fn(x, t), sched, rng)
    return x


def guided_reverse(eps_fn, x0: np.ndarray, mask, sched: NoiseSchedule,
                   rng: RandomSource, t_start: int | None = None,
                   x_init: np.ndarray | None = None) -> np.ndarray:
    """Masked reverse chain: mask-1 tokens track the forward marginal of x0,
    mask-0 tokens are generated; mask-1 tokens are overwritten with x0 at the
    end so preservation is bit-exact.

    With an all-zero mask the rng draw order matches ``ancestral_sample``
    exactly, so both produce identical outputs from a shared stream.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    m = np.asarray(mask.values if isinstance(mask, PartMask) else mask,
                   dtype=np.int64)
    if m.ndim != 1 or m.shape[0] != x0.shape[-2]:
        raise ValueError(
            f"mask length {m.shape} does not match token count {x0.shape[-2]}")
    mf = m.astype(np.float32).reshape((1,) * (x0.ndim - 2) + (-1, 1))
    any_preserved = bool(m.any())

    t_start = sched.T if t_start is None else int(t_start)
    if x_init is None:
        x = rng.normal(x0.shape)
    else:
        x = np.array(x_init, dtype=np.float32, copy=True)

    with tk.no_grad():
        for t in range(t_start, 0, -1):
            x_masked = reverse_step(x, t, eps_fn(x, t), sched, rng)
            if any_preserved:
                ab = sched.alpha_bar[t]
                noise = rng.normal(x0.shape)
                x_unmasked = (np.float32(np.sqrt(ab)) * x0
                              + np.float32(np.sqrt(1.0 - ab)) * noise)
                x = mf * x_unmasked + (1.0 - mf) * x_masked
            else:
                x = x_masked

    out = np.where(mf > 0, x0, x)
    return out.astype(np.float32)


# -- cascaded pipeline --------------------------------------------------------


def fix_extrinsics(flat: np.ndarray, which=None) -> np.ndarray:
    """Test-time validity fixes on raw (denormalized) extrinsics: project the
    eigenvector matrix to the nearest orthogonal matrix and floor the
    eigenvalues. ``which`` optionally restricts the fix to selected parts."""
    out = np.array(flat, dtype=np.float32, copy=True)
    tokens = out.reshape(-1, EXT_DIM)
    idx = range(tokens.shape[0]) if which is None else which
    for i in idx:
        U = tokens[i, U_SLICE].reshape(3, 3).T
        tokens[i, U_SLICE] = project_O3(U).T.reshape(9).astype(np.float32)
        tokens[i, LAM_SLICE] = clip_eigvals(tokens[i, LAM_SLICE])
    return out


def sample_cascade(params1: dn.ModelParams, params2: dn.ModelParams,
                   n_samples: int, n_parts: int, sched: NoiseSchedule,
                   rng: RandomSource, texts=None, w: float = 0.0,
                   d_s: int | None = None) -> list[PartSet]:
    """Full two-phase generation: extrinsic sets first, then intrinsics
    conditioned on them. Outputs carry orthogonal eigenvector frames and
    floored eigenvalues (fixed at test time, after denormalization)."""
    stats = params1.stats
    if stats is None:
        raise ValueError("phase-1 params carry no extrinsic stats")
    d_s = params2.config.token_dim if d_s is None else d_s

    eps1 = _make_eps_fn(params1, texts, w)
    ext_norm = ancestral_sample(eps1, (n_samples, n_parts, EXT_DIM),
                                sched, rng)
    ext_raw = denormalize_extrinsics(ext_norm, stats)
    ext_raw = np.stack([fix_extrinsics(e) for e in ext_raw])
    e0n = normalize_extrinsics(ext_raw, stats)

    eps2 = _make_eps_fn(params2, texts, w, e0=e0n)
    intr = ancestral_sample(eps2, (n_samples, n_parts, d_s), sched, rng)

    return [PartSet(ext_raw[i], intr[i]) for i in range(n_samples)]


def complete_part(params1: dn.ModelParams, params2: dn.ModelParams,
                  source: PartSet, mask: PartMask, sched: NoiseSchedule,
                  rng: RandomSource, texts=None, w: float = 0.0) -> PartSet:
    """Regenerate the mask-0 parts of a shape; mask-1 parts are preserved
    bit-exactly (extrinsics and intrinsics copied from the source)."""
    if len(mask) != source.n_parts:
        raise ValueError("mask length does not match the shape's part count")
    stats = params1.stats
    if stats is None:
        raise ValueError("phase-1 params carry no extrinsic stats")

    m = mask.values
    regen = np.where(m == 0)[0]

    x0 = normalize_extrinsics(source.extrinsics, stats)[None]
    eps1 = _make_eps_fn(params1, texts, w)
    ext_norm = guided_reverse(eps1, x0, m, sched, rng)[0]

    ext_raw = denormalize_extrinsics(ext_norm, stats)
    ext_raw = fix_extrinsics(ext_raw, which=regen)
    ext_raw[m == 1] = source.extrinsics[m == 1]          # bit-exact preserve

    e0n = normalize_extrinsics(ext_raw, stats)[None]
    eps2 = _make_eps_fn(params2, texts, w, e0=e0n)
    s0 = source.intrinsics[None]
    intr = guided_reverse(eps2, s0, m, sched, rng)[0]
    intr[m == 1] = source.intrinsics[m == 1]

    labels = None if source.labels is None else source.labels.copy()
    return PartSet(ext_raw, intr, labels)


def _swap_label_parts(a: PartSet, b: PartSet, label: int) -> PartSet:
    ia = np.where(a.labels == label)[0]
    ib = np.where(b.labels == label)[0]
    if len(ia) == 0 or len(ib) == 0:
        raise ValueError(f"label {label} missing from one of the shapes")
    k = min(len(ia), len(ib))
    mixed = a.copy()
    mixed.extrinsics[ia[:k]] = b.extrinsics[ib[:k]]
    mixed.intrinsics[ia[:k]] = b.intrinsics[ib[:k]]
    return mixed


def _refine(params1, params2, mixed: PartSet, t_start: int,
            sched: NoiseSchedule, rng: RandomSource,
            preserve: PartMask | None = None) -> PartSet:
    """Forward-noise every token to t_start, then reverse both phases."""
    stats = params1.stats
    t_start = int(t_start)
    if t_start == 0:
        return mixed.copy()
    if t_start > sched.T:
        raise ValueError("t_start beyond the schedule length")

    x0 = normalize_extrinsics(mixed.extrinsics, stats)[None]
    x_init = q_sample(x0, t_start, rng.normal(x0.shape), sched)
    eps1 = _make_eps_fn(params1, None, 0.0)
    if preserve is None:
        ext_norm = ancestral_sample(eps1, x0.shape, sched, rng,
                                    t_start=t_start, x_init=x_init)[0]
    else:
        ext_norm = guided_reverse(eps1, x0, preserve, sched, rng,
                                  t_start=t_start, x_init=x_init)[0]
    ext_raw = fix_extrinsics(denormalize_extrinsics(ext_norm, stats))
    if preserve is not None:
        keep = preserve.values == 1
        ext_raw[keep] = mixed.extrinsics[keep]

    e0n = normalize_extrinsics(ext_raw, stats)[None]
    s0 = mixed.intrinsics[None]
    s_init = q_sample(s0, t_start, rng.normal(s0.shape), sched)
    eps2 = _make_eps_fn(params2, None, 0.0, e0=e0n)
    if preserve is None:
        intr = ancestral_sample(eps2, s0.shape, sched, rng,
                                t_start=t_start, x_init=s_init)[0]
    else:
        intr = guided_reverse(eps2, s0, preserve, sched, rng,
                              t_start=t_start, x_init=s_init)[0]
        intr[preserve.values == 1] = mixed.intrinsics[preserve.values == 1]

    labels = None if mixed.labels is None else mixed.labels.copy()
    return PartSet(ext_raw, intr, labels)


def mix_and_refine(params1: dn.ModelParams, params2: dn.ModelParams,
                   a: PartSet, b: PartSet, take_from_b: int,
                   sched: NoiseSchedule, rng: RandomSource,
                   t_start: int = 10,
                   preserve: PartMask | None = None) -> PartSet:
    """Swap the parts carrying a label from shape b into shape a, then
    harmonize by noising all tokens to t_start and reversing both phases.

    When the label counts differ the swap replaces min-count tokens and
    leaves the remainder. t_start=0 returns the naive mix unchanged. By
    default every token is refined; pass ``preserve`` to pin parts instead.
    """
    if a.labels is None or b.labels is None:
        raise ValueError("mixing needs labeled shapes")
    mixed = _swap_label_parts(a, b, take_from_b)
    return _refine(params1, params2, mixed, t_start, sched, rng, preserve)


def refine_shape(params1: dn.ModelParams, params2: dn.ModelParams,
                 source: PartSet, t_start: int, sched: NoiseSchedule,
                 rng: RandomSource) -> PartSet:
    """Noise-and-denoise harmonization of a single shape (no swap)."""
    return _refine(params1, params2, source, t_start, sched, rng)
