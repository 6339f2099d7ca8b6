"""Permutation-equivariant set-attention noise predictors.

Two networks share one trunk shape: tokens are embedded, run through
``depth`` blocks of (self-attention -> AdaLN -> MLP -> AdaLN), and projected
back to token width by a linear head. There is no positional encoding over
the set index, so the trunk commutes with any permutation of the tokens.

Conditioning enters only through AdaLN: the normalized activations are
modulated per channel by scale/shift vectors computed from the condition.
The condition is, per token,

- phase 1 (extrinsics):  concat(gamma(t) [, text feature])
- phase 2 (intrinsics):  concat(gamma(t), F(e_i) [, text feature])

where gamma is a sinusoidal timestep encoding and F(e_i) is the per-part
feature produced by an additional self-attention stack over the clean
extrinsic tokens. Text is a mean of learned token embeddings; the empty
sequence maps to a dedicated learned null embedding, and the null condition
for classifier-free guidance zeroes the extrinsic features.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tk
from .parts import ExtrinsicStats
from .tensor import Tensor, RandomSource

__all__ = [
    "DenoiserConfig",
    "ModelParams",
    "gamma",
    "gamma_batch",
    "adaln",
    "init_params",
    "encode_text",
    "encode_text_batch",
    "encode_extrinsics",
    "predict_eps_phase1",
    "predict_eps_phase2",
]

LN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    token_dim: int
    embed_dim: int = 512
    depth: int = 6
    heads: int = 4
    gamma_dim: int = 128
    mlp_ratio: int = 4
    with_extrinsic_cond: bool = False   # phase 2: condition on encoded e0
    enc_depth: int = 4                  # extrinsic feature encoder depth
    text_dim: int = 0                   # 0 = no text conditioning
    vocab_size: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.gamma_dim % 2 != 0:
            raise ValueError("gamma_dim must be even")
        if self.text_dim > 0 and self.vocab_size < 1:
            raise ValueError("text conditioning needs a vocabulary size")

    @property
    def cond_dim(self) -> int:
        dim = self.gamma_dim
        if self.with_extrinsic_cond:
            dim += self.embed_dim
        if self.text_dim > 0:
            dim += self.text_dim
        return dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserConfig":
        return cls(**obj)


class ModelParams:
    """Named parameter tensors plus the normalization statistics they expect."""

    def __init__(self, config: DenoiserConfig, tensors: dict,
                 stats: ExtrinsicStats | None = None):
        self.config = config
        self.tensors = tensors
        self.stats = stats

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors.keys())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


# -- initialization -----------------------------------------------------------


def _linear_init(rng: RandomSource, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.normal((fan_in, fan_out)) * std).astype(np.float32)


def _add_linear(tensors, rng, name, fan_in, fan_out, zero=False):
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        w = _linear_init(rng, fan_in, fan_out)
    tensors[f"{name}.w"] = Tensor(w, requires_grad=True)
    tensors[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=np.float32),
                                  requires_grad=True)


def _add_adaln(tensors, rng, name, cond_dim, width):
    # zero-init: the block starts as plain normalization
    for part in ("ws", "wt"):
        tensors[f"{name}.{part}"] = Tensor(
            np.zeros((cond_dim, width), dtype=np.float32), requires_grad=True)
    for part in ("bs", "bt"):
        tensors[f"{name}.{part}"] = Tensor(
            np.zeros(width, dtype=np.float32), requires_grad=True)


def _add_block(tensors, rng, prefix, width, cond_dim, mlp_ratio):
    for proj in ("wq", "wk", "wv", "wo"):
        _add_linear(tensors, rng, f"{prefix}.attn.{proj}", width, width)
    _add_adaln(tensors, rng, f"{prefix}.ln1", cond_dim, width)
    hidden = mlp_ratio * width
    _add_linear(tensors, rng, f"{prefix}.mlp.fc1", width, hidden)
    _add_linear(tensors, rng, f"{prefix}.mlp.fc2", hidden, width)
    _add_adaln(tensors, rng, f"{prefix}.ln2", cond_dim, width)


def _add_plain_block(tensors, rng, prefix, width, mlp_ratio):
    for proj in ("wq", "wk", "wv", "wo"):
        _add_linear(tensors, rng, f"{prefix}.attn.{proj}", width, width)
    hidden = mlp_ratio * width
    _add_linear(tensors, rng, f"{prefix}.mlp.fc1", width, hidden)
    _add_linear(tensors, rng, f"{prefix}.mlp.fc2", hidden, width)


def init_params(config: DenoiserConfig, rng: RandomSource,
                stats: ExtrinsicStats | None = None) -> ModelParams:
    t: dict[str, Tensor] = {}
    _add_linear(t, rng, "embed", config.token_dim, config.embed_dim)
    for i in range(config.depth):
        _add_block(t, rng, f"blk{i}", config.embed_dim, config.cond_dim,
                   config.mlp_ratio)
    # zero-init head: the net starts by predicting zero noise
    _add_linear(t, rng, "head", config.embed_dim, config.token_dim, zero=True)

    if config.with_extrinsic_cond:
        from .parts import EXT_DIM
        _add_linear(t, rng, "enc.embed", EXT_DIM, config.embed_dim)
        for i in range(config.enc_depth):
            _add_plain_block(t, rng, f"enc.blk{i}", config.embed_dim,
                             config.mlp_ratio)

    if config.text_dim > 0:
        emb = (rng.normal((config.vocab_size, config.text_dim)) * 0.05)
        t["text.embed"] = Tensor(emb.astype(np.float32), requires_grad=True)

    return ModelParams(config, t, stats)


# -- timestep encoding --------------------------------------------------------


def gamma(t: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding, interleaved (sin, cos) pairs."""
    return gamma_batch(np.array([t]), dim)[0]


def gamma_batch(ts: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2 != 0:
        raise tk.DimensionError("encoding dim must be even")
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = np.power(10000.0, -2.0 * k / dim)
    ang = ts[:, None] * omega[None, :]
    out = np.empty((len(ts), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out.astype(tk.default_dtype())


# -- building blocks ----------------------------------------------------------


def _linear(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return tk.add(tk.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def adaln(h: Tensor, cond: Tensor, ws: Tensor, bs: Tensor, wt: Tensor,
          bt: Tensor, eps: float = LN_EPS) -> Tensor:
    """Condition-modulated normalization.

    out = layernorm(h) * (1 + cond@ws + bs) + (cond@wt + bt). With the maps
    zero-initialized this is exactly the un-affined layernorm.
    """
    if cond.shape[-1] != ws.shape[0]:
        raise tk.DimensionError(
            f"condition width {cond.shape[-1]} does not match maps {ws.shape[0]}")
    normed = tk.layernorm(h, axis=-1, eps=eps)
    s = tk.add(tk.matmul(cond, ws), bs)
    t = tk.add(tk.matmul(cond, wt), bt)
    return tk.add(tk.mul(normed, tk.shift(s, 1.0)), t)


def _attention(h: Tensor, p: ModelParams, prefix: str, heads: int) -> Tensor:
    B, N, E = h.shape
    dh = E // heads

    def split(x):
        return tk.transpose(tk.reshape(x, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(h, p, f"{prefix}.wq"))
    k = split(_linear(h, p, f"{prefix}.wk"))
    v = split(_linear(h, p, f"{prefix}.wv"))

    scores = tk.scale(tk.matmul(q, tk.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(dh))
    attn = tk.softmax(scores, axis=-1)
    mixed = tk.matmul(attn, v)
    merged = tk.reshape(tk.transpose(mixed, (0, 2, 1, 3)), (B, N, E))
    return _linear(merged, p, f"{prefix}.wo")


def _mlp(h: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return _linear(tk.silu(_linear(h, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def _adaln_named(h: Tensor, cond: Tensor, p: ModelParams, name: str) -> Tensor:
    return adaln(h, cond, p[f"{name}.ws"], p[f"{name}.bs"],
                 p[f"{name}.wt"], p[f"{name}.bt"])


def _block(h: Tensor, cond: Tensor, p: ModelParams, prefix: str,
           heads: int) -> Tensor:
    h = _adaln_named(tk.add(h, _attention(h, p, f"{prefix}.attn", heads)),
                     cond, p, f"{prefix}.ln1")
    h = _adaln_named(tk.add(h, _mlp(h, p, f"{prefix}.mlp")),
                     cond, p, f"{prefix}.ln2")
    return h


def _plain_block(h: Tensor, p: ModelParams, prefix: str, heads: int) -> Tensor:
    h = tk.layernorm(tk.add(h, _attention(h, p, f"{prefix}.attn", heads)),
                     axis=-1, eps=LN_EPS)
    h = tk.layernorm(tk.add(h, _mlp(h, p, f"{prefix}.mlp")),
                     axis=-1, eps=LN_EPS)
    return h


def _trunk(p: ModelParams, tokens: Tensor, cond: Tensor) -> Tensor:
    cfg = p.config
    h = _linear(tokens, p, "embed")
    for i in range(cfg.depth):
        h = _block(h, cond, p, f"blk{i}", cfg.heads)
    return _linear(h, p, "head")


# -- text ---------------------------------------------------------------------


def encode_text(p: ModelParams, token_ids) -> Tensor:
    """Mean of learned token embeddings; [] yields the null embedding (id 0)."""
    table = p["text.embed"]
    ids = list(token_ids) if token_ids is not None else []
    if len(ids) == 0:
        ids = [0]
    rows = tk.gather_rows(table, np.asarray(ids, dtype=np.int64))
    return tk.tmean(rows, axis=0)


def encode_text_batch(p: ModelParams, texts, n_tokens: int) -> Tensor:
    """(B, N, text_dim) text features tiled over the part tokens.

    ``texts`` is one entry per batch element: a token-id sequence, or None
    for the null condition.
    """
    feats = [tk.reshape(encode_text(p, ids), (1, 1, p.config.text_dim))
             for ids in texts]
    row = tk.concat(feats, axis=0)                     # (B,1,text)
    ones = Tensor(np.ones((1, n_tokens, 1), dtype=tk.default_dtype()))
    return tk.mul(row, ones)                           # broadcast over tokens


# -- public forward passes ----------------------------------------------------


def _as_tensor3(x, token_dim: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim != 3 or t.shape[-1] != token_dim:
        raise tk.DimensionError(
            f"{what} must be (batch, parts, {token_dim}), got {t.shape}")
    return t


def _tile_cond(vec: np.ndarray, n_tokens: int) -> Tensor:
    tiled = np.repeat(vec[:, None, :], n_tokens, axis=1)
    return Tensor(tiled.astype(tk.default_dtype()))


def _build_cond(p: ModelParams, B: int, N: int, ts, feats: Tensor | None,
                texts) -> Tensor:
    cfg = p.config
    ts = np.full(B, ts, dtype=np.int64) if np.isscalar(ts) else np.asarray(ts)
    if ts.shape != (B,):
        raise tk.DimensionError("need one timestep per batch element")
    pieces = [_tile_cond(gamma_batch(ts, cfg.gamma_dim), N)]
    if cfg.with_extrinsic_cond:
        assert feats is not None
        pieces.append(feats)
    if cfg.text_dim > 0:
        if texts is None:
            texts = [None] * B
        if len(texts) != B:
            raise tk.DimensionError("need one text entry per batch element")
        pieces.append(encode_text_batch(p, texts, N))
    elif texts is not None and any(t for t in texts):
        raise tk.ContractError("model was built without text conditioning")
    return pieces[0] if len(pieces) == 1 else tk.concat(pieces, axis=-1)


def predict_eps_phase1(p: ModelParams, x_t, t, texts=None) -> Tensor:
    """Noise prediction over a set of (normalized) extrinsic tokens."""
    if p.config.with_extrinsic_cond:
        raise tk.ContractError("called phase-1 forward with a phase-2 model")
    tokens = _as_tensor3(x_t, p.config.token_dim, "extrinsic tokens")
    B, N, _ = tokens.shape
    cond = _build_cond(p, B, N, t, None, texts)
    return _trunk(p, tokens, cond)


def encode_extrinsics(p: ModelParams, e0) -> Tensor:
    """Per-part features of clean normalized extrinsics; (B,N,embed_dim)."""
    from .parts import EXT_DIM
    tokens = _as_tensor3(e0, EXT_DIM, "extrinsic tokens")
    h = _linear(tokens, p, "enc.embed")
    for i in range(p.config.enc_depth):
        h = _plain_block(h, p, f"enc.blk{i}", p.config.heads)
    return h


def predict_eps_phase2(p: ModelParams, s_t, t, e0, texts=None,
                       feat_mask=None) -> Tensor:
    """Noise prediction over intrinsic tokens, conditioned per part on e0.

    ``feat_mask`` is an optional (B,) 0/1 vector: 0 zeroes that sample's
    extrinsic features (the null condition used for classifier-free
    guidance and its training dropout).
    """
    if not p.config.with_extrinsic_cond:
        raise tk.ContractError("called phase-2 forward with a phase-1 model")
    tokens = _as_tensor3(s_t, p.config.token_dim, "intrinsic tokens")
    from .parts import EXT_DIM
    cond_tokens = _as_tensor3(e0, EXT_DIM, "conditioning extrinsics")
    B, N, _ = tokens.shape
    if cond_tokens.shape[0] != B or cond_tokens.shape[1] != N:
        raise tk.DimensionError(
            "intrinsic and extrinsic token counts must match per sample")
    feats = encode_extrinsics(p, cond_tokens)
    if feat_mask is not None:
        m = np.asarray(feat_mask, dtype=tk.default_dtype()).reshape(B, 1, 1)
        feats = tk.mul(feats, Tensor(m))
    cond = _build_cond(p, B, N, t, feats, texts)
    return _trunk(p, tokens, cond)
