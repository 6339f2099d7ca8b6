"""Two-phase training of the cascade, plus ablation baselines.

Phase 1 learns noise prediction over sets of normalized extrinsic tokens;
phase 2 over intrinsic tokens conditioned on the clean extrinsics. Both
minimize the plain noise-matching objective

    E_{t, x0, eps} || eps - net(x_t, t, cond) ||^2,   x_t = q_sample(x0, t, eps)

with t drawn uniformly per batch element. Text-conditioned variants drop
the condition to the null condition with a fixed probability so the same
weights serve classifier-free guidance at sampling time.

The optimizer is Adam with a polynomially decaying learning rate
lr0 * (1 - step/total)^power. Runs are bit-reproducible given
(seed, config, dataset).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import denoiser as dn
from . import tensor as tk
from .parts import compute_stats, normalize_extrinsics, ExtrinsicStats
from .schedule import NoiseSchedule, make_linear_schedule, q_sample_batch
from .tensor import RandomSource, Tensor, backward, mse
from .toyworld import ToyDataset, VOCAB

__all__ = [
    "TrainConfig",
    "Condition",
    "NULL_CONDITION",
    "Adam",
    "apply_cfg_dropout",
    "loss_phase1",
    "loss_phase2",
    "train_phase1",
    "train_phase2",
    "train_baseline_z",
    "train_baseline_p",
    "MlpConfig",
    "init_mlp_params",
    "predict_eps_mlp",
    "toy_denoiser_config",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 64
    lr: float = 1e-4
    decay_power: float = 0.999
    total_steps: int = 20000
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.05
    cfg_dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must be in [0, 1]")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Condition:
    """Sampling/training condition for one batch element."""

    text_ids: tuple | None = None
    use_extrinsics: bool = True


NULL_CONDITION = Condition(text_ids=None, use_extrinsics=False)


def apply_cfg_dropout(cond: Condition, rng: RandomSource,
                      p: float = 0.2) -> Condition:
    """With probability p replace the condition by the null condition
    (empty text, zeroed extrinsic features)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    if float(rng.uniform(())) < p:
        return NULL_CONDITION
    return cond


class Adam:
    """Adam (0.9, 0.999, 1e-8) with polynomial lr decay, floored at zero.

    Steps with non-finite gradients are skipped and counted."""

    def __init__(self, lr0: float, total_steps: int, power: float = 0.999,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr0 = lr0
        self.total_steps = total_steps
        self.power = power
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.applied = 0
        self.skipped = 0

    def lr_at(self, step: int) -> float:
        frac = max(0.0, 1.0 - step / self.total_steps)
        return self.lr0 * frac ** self.power

    def step(self, params: dn.ModelParams, step_idx: int) -> bool:
        grads = {}
        for name, t in params.tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("skipping step %d: non-finite gradient in %s",
                            step_idx, name)
                return False
            grads[name] = g

        self.applied += 1
        k = self.applied
        lr = self.lr_at(step_idx)
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for name, t in params.tensors.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            t.data = (t.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                t.data.dtype)
        return True


# -- losses ---------------------------------------------------------------


def loss_phase1(params: dn.ModelParams, x0: np.ndarray, sched: NoiseSchedule,
                rng: RandomSource, texts=None) -> Tensor:
    """Noise-matching loss over extrinsic tokens (x0 already normalized).

    Draw order per call: timesteps, then noise. Call ``backward`` on the
    returned scalar to populate parameter gradients.
    """
    B = x0.shape[0]
    ts = rng.integers(1, sched.T + 1, (B,))
    eps = rng.normal(x0.shape)
    x_t = q_sample_batch(x0, ts, eps, sched)
    pred = dn.predict_eps_phase1(params, x_t, ts, texts=texts)
    return mse(pred, Tensor(eps))


def loss_phase2(params: dn.ModelParams, s0: np.ndarray, e0: np.ndarray,
                sched: NoiseSchedule, rng: RandomSource, texts=None,
                feat_mask=None) -> Tensor:
    """Noise-matching loss over intrinsic tokens given clean extrinsics."""
    B = s0.shape[0]
    ts = rng.integers(1, sched.T + 1, (B,))
    eps = rng.normal(s0.shape)
    s_t = q_sample_batch(s0, ts, eps, sched)
    pred = dn.predict_eps_phase2(params, s_t, ts, e0, texts=texts,
                                 feat_mask=feat_mask)
    return mse(pred, Tensor(eps))


# -- training loops ---------------------------------------------------------


@dataclass
class TrainResult:
    params: dn.ModelParams
    curve: list = field(default_factory=list)   # (step, loss, lr)
    skipped_steps: int = 0

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "lr"])
            w.writerows(self.curve)

    def final_loss(self, window: int = 200) -> float:
        tail = [row[1] for row in self.curve[-window:]]
        return float(np.mean(tail))


def toy_denoiser_config(token_dim: int, phase2: bool = False,
                        text: bool = False) -> dn.DenoiserConfig:
    """Small CI-speed configuration (the full-size one is the default)."""
    return dn.DenoiserConfig(
        token_dim=token_dim,
        embed_dim=64,
        depth=4,
        heads=4,
        gamma_dim=32,
        with_extrinsic_cond=phase2,
        enc_depth=2,
        text_dim=32 if text else 0,
        vocab_size=len(VOCAB) if text else 0,
    )


def _dataset_arrays(dataset: ToyDataset):
    ext = np.stack([s.extrinsics for s in dataset.shapes])     # (M,N,16)
    intr = np.stack([s.intrinsics for s in dataset.shapes])    # (M,N,ds)
    stats = compute_stats(ext)
    return normalize_extrinsics(ext, stats), intr, stats


def _batch_conditions(dataset: ToyDataset, idx, tc: TrainConfig,
                      rng: RandomSource, text_enabled: bool):
    if not text_enabled:
        return None, None
    conds = [
        apply_cfg_dropout(
            Condition(text_ids=tuple(dataset.caption_ids[i])), rng,
            tc.cfg_dropout)
        for i in idx
    ]
    texts = [c.text_ids for c in conds]
    feat_mask = np.array([1.0 if c.use_extrinsics else 0.0 for c in conds],
                         dtype=np.float32)
    return texts, feat_mask


def _run(params, make_loss, tc: TrainConfig, ckpt_cb=None,
         ckpt_every: int = 0) -> TrainResult:
    rng = RandomSource(tc.seed)
    opt = Adam(tc.lr, tc.total_steps, tc.decay_power)
    curve = []
    for step in range(tc.total_steps):
        params.zero_grads()
        loss = make_loss(rng, step)
        backward(loss)
        opt.step(params, step)
        curve.append((step, float(loss.data), opt.lr_at(step)))
        if ckpt_cb is not None and ckpt_every > 0 and (step + 1) % ckpt_every == 0:
            ckpt_cb(step + 1, params)
    return TrainResult(params, curve, opt.skipped)


def train_phase1(dataset: ToyDataset, dconf: dn.DenoiserConfig,
                 tc: TrainConfig, ckpt_cb=None, ckpt_every: int = 0
                 ) -> TrainResult:
    norm_ext, _, stats = _dataset_arrays(dataset)
    sched = tc.schedule()
    params = dn.init_params(dconf, RandomSource(tc.seed + 1), stats=stats)
    M = len(dataset)
    text_on = dconf.text_dim > 0

    def make_loss(rng, step):
        idx = rng.integers(0, M, (tc.batch,))
        texts, _ = _batch_conditions(dataset, idx, tc, rng, text_on)
        return loss_phase1(params, norm_ext[idx], sched, rng, texts=texts)

    return _run(params, make_loss, tc, ckpt_cb, ckpt_every)


def train_phase2(dataset: ToyDataset, dconf: dn.DenoiserConfig,
                 tc: TrainConfig, ckpt_cb=None, ckpt_every: int = 0
                 ) -> TrainResult:
    if not dconf.with_extrinsic_cond:
        raise ValueError("phase-2 config must set with_extrinsic_cond")
    norm_ext, intr, stats = _dataset_arrays(dataset)
    sched = tc.schedule()
    params = dn.init_params(dconf, RandomSource(tc.seed + 2), stats=stats)
    M = len(dataset)
    text_on = dconf.text_dim > 0

    def make_loss(rng, step):
        idx = rng.integers(0, M, (tc.batch,))
        texts, feat_mask = _batch_conditions(dataset, idx, tc, rng, text_on)
        return loss_phase2(params, intr[idx], norm_ext[idx], sched, rng,
                           texts=texts, feat_mask=feat_mask)

    return _run(params, make_loss, tc, ckpt_cb, ckpt_every)


# -- ablation baselines ------------------------------------------------------
#
# True upstream latents are not available in the toy world, so the two
# baseline routes diffuse stand-ins: a fixed random projection of the whole
# shape to 512 dims (global-latent route) and per-part concatenations of
# normalized extrinsics with intrinsics (part-latent route).

Z_PROJECTION_SEED = 424242
Z_DIM = 512


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    hidden: int = 128
    depth: int = 3
    gamma_dim: int = 32

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MlpConfig":
        return cls(**obj)


def init_mlp_params(cfg: MlpConfig, rng: RandomSource) -> dn.ModelParams:
    t: dict[str, Tensor] = {}
    dn._add_linear(t, rng, "fc_in", cfg.in_dim, cfg.hidden)
    for i in range(cfg.depth):
        dn._add_linear(t, rng, f"layer{i}.fc1", cfg.hidden, cfg.hidden)
        dn._add_linear(t, rng, f"layer{i}.fc2", cfg.hidden, cfg.hidden)
        dn._add_adaln(t, rng, f"layer{i}.ln", cfg.gamma_dim, cfg.hidden)
    dn._add_linear(t, rng, "head", cfg.hidden, cfg.in_dim, zero=True)
    return dn.ModelParams(cfg, t)  # type: ignore[arg-type]


def predict_eps_mlp(params: dn.ModelParams, x_t, t) -> Tensor:
    cfg: MlpConfig = params.config  # type: ignore[assignment]
    x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
    B = x.shape[0]
    ts = np.full(B, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)
    cond = Tensor(dn.gamma_batch(ts, cfg.gamma_dim))
    h = dn._linear(x, params, "fc_in")
    for i in range(cfg.depth):
        inner = dn._linear(
            tk.silu(dn._linear(h, params, f"layer{i}.fc1")),
            params, f"layer{i}.fc2")
        h = dn._adaln_named(tk.add(h, inner), cond, params, f"layer{i}.ln")
    return dn._linear(h, params, "head")


def shape_to_z(norm_ext: np.ndarray, intr: np.ndarray) -> np.ndarray:
    """Fixed seeded random projection of a whole shape to Z_DIM dims."""
    M = norm_ext.shape[0]
    flat = np.concatenate(
        [norm_ext.reshape(M, -1), intr.reshape(M, -1)], axis=1)
    in_dim = flat.shape[1]
    proj_rng = RandomSource(Z_PROJECTION_SEED)
    P = proj_rng.normal((in_dim, Z_DIM)) / np.float32(np.sqrt(in_dim))
    return flat @ P


def train_baseline_z(dataset: ToyDataset, tc: TrainConfig,
                     cfg: MlpConfig | None = None) -> TrainResult:
    norm_ext, intr, _ = _dataset_arrays(dataset)
    z = shape_to_z(norm_ext, intr)                      # (M, 512)
    cfg = cfg or MlpConfig(in_dim=Z_DIM)
    sched = tc.schedule()
    params = init_mlp_params(cfg, RandomSource(tc.seed + 3))
    M = len(dataset)

    def make_loss(rng, step):
        idx = rng.integers(0, M, (tc.batch,))
        ts = rng.integers(1, sched.T + 1, (tc.batch,))
        eps = rng.normal(z[idx].shape)
        x_t = q_sample_batch(z[idx], ts, eps, sched)
        pred = predict_eps_mlp(params, x_t, ts)
        return mse(pred, Tensor(eps))

    return _run(params, make_loss, tc)


def train_baseline_p(dataset: ToyDataset, tc: TrainConfig,
                     dconf: dn.DenoiserConfig | None = None) -> TrainResult:
    norm_ext, intr, stats = _dataset_arrays(dataset)
    tokens = np.concatenate([norm_ext, intr], axis=-1)  # (M,N,16+ds)
    dconf = dconf or toy_denoiser_config(tokens.shape[-1])
    sched = tc.schedule()
    params = dn.init_params(dconf, RandomSource(tc.seed + 4), stats=stats)
    M = len(dataset)

    def make_loss(rng, step):
        idx = rng.integers(0, M, (tc.batch,))
        return loss_phase1(params, tokens[idx], sched, rng)

    return _run(params, make_loss, tc)
