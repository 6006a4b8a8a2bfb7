"""Toy diffusion transformer with named linear layers for adapter targeting.

Latent sites become tokens, conditioning enters through cross-attention, and
the hidden state after the first block is exposed as a feature tap for the
subject-alignment loss. Every linear layer that adapters may target is
addressed by a dot-separated name like "block1.self_attn.q".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import EmptyPrompt, NonFiniteActivation, ShapeError
from .numerics import ParamStore, Tensor, concatenate, gelu, make_rng, matmul, softmax
from .toyvae import D_LAT, LatentTensor

TARGETABLE_TYPES = ("q", "k", "v", "o", "ffn.0", "ffn.2")

NULL_ID = 0
VSTAR_ID = 1
SSTAR_ID = 2
_RESERVED = {"V*": VSTAR_ID, "S*": SSTAR_ID}
_SPECIAL_PARAM = {NULL_ID: "text.null", VSTAR_ID: "text.vstar", SSTAR_ID: "text.sstar"}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    d_lat: int = D_LAT
    max_text_tokens: int = 8
    n_text_buckets: int = 256
    # adapters never target cross-attention unless explicitly widened
    lora_cross_attn: bool = False
    # feature tap: hidden state after block 1, post-residual by default
    tap_post_residual: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError("d_model must be divisible by n_heads")
        for name in ("d_model", "n_blocks", "n_heads", "d_ffn", "d_lat",
                     "max_text_tokens", "n_text_buckets"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive")


@dataclass
class LayerInfo:
    name: str
    layer_type: str     # q | k | v | o | ffn.0 | ffn.2 | cross
    d_in: int
    d_out: int
    targetable: bool


@dataclass
class CondTokens:
    embeddings: Tensor          # [n_tok, d_model]
    token_ids: list


@dataclass
class ForwardOutput:
    velocity: Tensor            # same shape as the input latent
    tap: Tensor                 # [n_latent_tokens, d_model]


def named_layers(cfg: ModelConfig):
    """All named linear layers, six targetable types per block plus the
    cross-attention projections (listed, non-targetable by default)."""
    layers = []
    d, f = cfg.d_model, cfg.d_ffn
    for b in range(1, cfg.n_blocks + 1):
        for t in ("q", "k", "v", "o"):
            layers.append(LayerInfo(f"block{b}.self_attn.{t}", t, d, d, True))
        layers.append(LayerInfo(f"block{b}.ffn.0", "ffn.0", d, f, True))
        layers.append(LayerInfo(f"block{b}.ffn.2", "ffn.2", f, d, True))
        for t in ("q", "k", "v", "o"):
            layers.append(LayerInfo(f"block{b}.cross_attn.{t}", "cross", d, d,
                                    cfg.lora_cross_attn))
    return layers


def targetable_layers(cfg: ModelConfig):
    return [l for l in named_layers(cfg) if l.targetable]


def init_params(cfg: ModelConfig, seed) -> ParamStore:
    """Seeded parameter store. Linear weights use 1/sqrt(fan_in) Gaussians,
    the output head starts at zero, norms at identity."""
    ps = ParamStore(rng_seed=seed)

    def dense(name, d_out, d_in, scale=None, zero=False):
        if zero:
            w = np.zeros((d_out, d_in), dtype=np.float32)
        else:
            std = scale if scale is not None else 1.0 / np.sqrt(d_in)
            w = make_rng(seed, name).normal(0.0, std, (d_out, d_in)).astype(np.float32)
        ps.add(f"{name}.weight", w)

    d = cfg.d_model
    dense("patch_embed", d, cfg.d_lat)
    ps.add("patch_embed.bias", np.zeros(d, dtype=np.float32))
    for b in range(1, cfg.n_blocks + 1):
        for ln in ("ln1", "ln2", "ln3"):
            ps.add(f"block{b}.{ln}.gain", np.ones(d, dtype=np.float32))
            ps.add(f"block{b}.{ln}.bias", np.zeros(d, dtype=np.float32))
        for t in ("q", "k", "v", "o"):
            dense(f"block{b}.self_attn.{t}", d, d)
            dense(f"block{b}.cross_attn.{t}", d, d)
        dense(f"block{b}.ffn.0", cfg.d_ffn, d)
        ps.add(f"block{b}.ffn.0.bias", np.zeros(cfg.d_ffn, dtype=np.float32))
        dense(f"block{b}.ffn.2", d, cfg.d_ffn)
        ps.add(f"block{b}.ffn.2.bias", np.zeros(d, dtype=np.float32))
    ps.add("final_ln.gain", np.ones(d, dtype=np.float32))
    ps.add("final_ln.bias", np.zeros(d, dtype=np.float32))
    dense("head", cfg.d_lat, d, zero=True)
    ps.add("head.bias", np.zeros(cfg.d_lat, dtype=np.float32))
    for pid, pname in _SPECIAL_PARAM.items():
        row = make_rng(seed, pname).normal(0.0, 0.02, d).astype(np.float32)
        # V*/S* rows train inside their customization stage (as artifact
        # copies), never in the base store; the null row belongs to base
        # pretraining where conditioning dropout exercises it.
        ps.add(pname, row, trainable=(pid == NULL_ID))
    table = make_rng(seed, "text.table").normal(
        0.0, 0.02, (cfg.n_text_buckets, d)).astype(np.float32)
    ps.add("text.table", table, trainable=False)
    return ps


def _bucket(word, n_buckets):
    h = hashlib.blake2b(word.encode(), digest_size=8).digest()
    return 3 + int.from_bytes(h, "little") % n_buckets


def embed_text(prompt, table_seed, cfg: ModelConfig = None) -> CondTokens:
    """Whitespace tokenization over a fixed seeded hash-bucket table.

    "V*" and "S*" own reserved rows that ordinary words can never collide
    with. The empty string is the unconditional sentinel and yields the
    single learned null token.
    """
    cfg = cfg or ModelConfig()
    table = make_rng(table_seed, "text.table").normal(
        0.0, 0.02, (cfg.n_text_buckets, cfg.d_model)).astype(np.float32)
    if prompt == "":
        ids = [NULL_ID]
    else:
        words = prompt.split()
        if not words:
            raise EmptyPrompt("prompt contains no tokens")
        ids = [_RESERVED.get(w, _bucket(w, cfg.n_text_buckets))
               for w in words[:cfg.max_text_tokens]]
    rows = np.zeros((len(ids), cfg.d_model), dtype=np.float32)
    for i, tid in enumerate(ids):
        if tid in _SPECIAL_PARAM:
            rows[i] = make_rng(table_seed, _SPECIAL_PARAM[tid]).normal(
                0.0, 0.02, cfg.d_model).astype(np.float32)
        else:
            rows[i] = table[tid - 3]
    return CondTokens(embeddings=Tensor(rows), token_ids=ids)


_pos_cache = {}


def _positions(n, d):
    key = (n, d)
    if key not in _pos_cache:
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(d // 2, dtype=np.float64)[None, :]
        ang = pos / np.power(10000.0, 2.0 * i / d)
        pe = np.zeros((n, d), dtype=np.float32)
        pe[:, 0::2] = np.sin(ang)
        pe[:, 1::2] = np.cos(ang)
        _pos_cache[key] = pe
    return _pos_cache[key]


def _time_features(t, d, dtype):
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), d // 2))
    ang = float(t) * freqs
    feat = np.empty(d, dtype=dtype)
    feat[0::2] = np.sin(ang)
    feat[1::2] = np.cos(ang)
    return feat


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / nm.sqrt(var + eps) * gain + bias


def _linear(x, params, name, lora_ctx, bias=False):
    w = params[f"{name}.weight"]
    y = matmul(x, w.transpose((1, 0)))
    if bias:
        y = y + params[f"{name}.bias"]
    if lora_ctx is not None:
        for a, b, scale in lora_ctx.entries(name):
            if scale != 0.0:
                y = y + matmul(matmul(x, a.transpose((1, 0))),
                               b.transpose((1, 0))) * scale
    return y


def _attention(q, k, v, n_heads):
    n, d = q.shape
    m = k.shape[0]
    dh = d // n_heads
    qh = q.reshape((n, n_heads, dh)).transpose((1, 0, 2))
    kh = k.reshape((m, n_heads, dh)).transpose((1, 0, 2))
    vh = v.reshape((m, n_heads, dh)).transpose((1, 0, 2))
    scores = matmul(qh, kh.transpose((0, 2, 1))) * (1.0 / np.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), vh)
    return ctx.transpose((1, 0, 2)).reshape((n, d))


def _cond_matrix(params, cond: CondTokens, overrides=None):
    """Conditioning rows; reserved ids read the live trainable rows.

    overrides maps a reserved row's parameter name to a tensor owned by a
    customization artifact, so placeholder tokens can train without ever
    touching the frozen base store.
    """
    if not any(tid in _SPECIAL_PARAM for tid in cond.token_ids):
        return Tensor(cond.embeddings.data)
    rows = []
    for i, tid in enumerate(cond.token_ids):
        if tid in _SPECIAL_PARAM:
            pname = _SPECIAL_PARAM[tid]
            if overrides and pname in overrides:
                rows.append(overrides[pname].reshape((1, -1)))
            else:
                rows.append(params[pname].reshape((1, -1)))
        else:
            rows.append(Tensor(cond.embeddings.data[i:i + 1]))
    return concatenate(rows, axis=0)


def forward(cfg: ModelConfig, params: ParamStore, z_t, t, cond: CondTokens,
            lora_ctx=None, token_overrides=None) -> ForwardOutput:
    """Velocity prediction u(z_t, cond, t) plus the block-1 feature tap.

    z_t may be a LatentTensor or a raw [T',h,w,D] tensor. With a lora_ctx,
    every targeted linear computes (W + s*B*A) x.
    """
    z = z_t.latents if isinstance(z_t, LatentTensor) else z_t
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if z.ndim != 4 or z.shape[3] != cfg.d_lat:
        raise ShapeError(f"latent shape {z.shape} incompatible with d_lat={cfg.d_lat}")
    if not 0.0 <= float(t) <= 1.0:
        raise ShapeError(f"t must be in [0,1], got {t}")
    if len(cond.token_ids) > cfg.max_text_tokens:
        raise ShapeError("conditioning exceeds max_text_tokens")

    n_lat, h, w, d_lat = z.shape
    n_tok = n_lat * h * w
    tokens = z.reshape((n_tok, d_lat))
    x = _linear(tokens, params, "patch_embed", None, bias=True)
    x = x + Tensor(_positions(n_tok, cfg.d_model)[:n_tok])
    x = x + Tensor(_time_features(t, cfg.d_model, np.float32))

    cond_emb = _cond_matrix(params, cond, token_overrides)
    tap = None
    for b in range(1, cfg.n_blocks + 1):
        pre = f"block{b}"
        hn = _layer_norm(x, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        q = _linear(hn, params, f"{pre}.self_attn.q", lora_ctx)
        k = _linear(hn, params, f"{pre}.self_attn.k", lora_ctx)
        v = _linear(hn, params, f"{pre}.self_attn.v", lora_ctx)
        sa = _attention(q, k, v, cfg.n_heads)
        x = x + _linear(sa, params, f"{pre}.self_attn.o", lora_ctx)

        hn = _layer_norm(x, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
        cq = _linear(hn, params, f"{pre}.cross_attn.q", lora_ctx)
        ck = _linear(cond_emb, params, f"{pre}.cross_attn.k", lora_ctx)
        cv = _linear(cond_emb, params, f"{pre}.cross_attn.v", lora_ctx)
        ca = _attention(cq, ck, cv, cfg.n_heads)
        x = x + _linear(ca, params, f"{pre}.cross_attn.o", lora_ctx)

        hn = _layer_norm(x, params[f"{pre}.ln3.gain"], params[f"{pre}.ln3.bias"])
        ff = gelu(_linear(hn, params, f"{pre}.ffn.0", lora_ctx, bias=True))
        ff = _linear(ff, params, f"{pre}.ffn.2", lora_ctx, bias=True)
        x = x + ff
        if b == 1:
            tap = x if cfg.tap_post_residual else ff

    x = _layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    vel = _linear(x, params, "head", None, bias=True).reshape(z.shape)
    if not vel.is_finite():
        raise NonFiniteActivation("non-finite velocity output")
    return ForwardOutput(velocity=vel, tap=tap)
