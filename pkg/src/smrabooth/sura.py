"""Subject representation alignment: a frozen patch encoder provides target
features for a reference image, a trainable projector maps the model's
block-1 feature tap into the encoder space, and a per-patch cosine loss
pulls the two together. The relation-aware fusion block bridges mismatched
feature grids before the loss when needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import BadResolution, ShapeError, TokenCountMismatch
from .numerics import ParamStore, Tensor, clamp_min, gelu, make_rng, matmul, softmax_rows
from .toyvae import VideoTensor

COSINE_EPS = 1e-8


@dataclass
class PatchEncoder:
    """Frozen two-layer patch map: linear, tanh, linear. Seeded once and
    never trained; it only needs to be deterministic and patch-structured.

    The first map is a seeded Gaussian composed with DC removal (subtract
    the patch mean, itself a linear projection), so flat regions embed near
    zero and features respond to structure and color contrast rather than
    raw brightness, mirroring the behavior of the self-supervised encoders
    this stands in for."""

    patch_size: int = 4
    d_enc: int = 32
    d_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        d_in = self.patch_size * self.patch_size * 3
        rng = make_rng(self.seed, "patch_encoder")
        gauss = rng.normal(0.0, 1.0 / np.sqrt(d_in),
                           (self.d_hidden, d_in)).astype(np.float32)
        center = np.eye(d_in, dtype=np.float32) - 1.0 / d_in
        self.w1 = (gauss @ center).astype(np.float32)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(self.d_hidden),
                             (self.d_enc, self.d_hidden)).astype(np.float32)
        self.w1.setflags(write=False)
        self.w2.setflags(write=False)


@dataclass
class TargetFeatures:
    y_star: Tensor      # [N, d_enc]

    @property
    def n_patches(self):
        return self.y_star.shape[0]


def encode_patches(enc: PatchEncoder, image) -> TargetFeatures:
    """Non-overlapping patches through the frozen map, row-major over the
    patch grid so patch n lines up with latent token n on matched grids."""
    if isinstance(image, VideoTensor):
        arr = image.frames.data
        if arr.shape[0] != 1:
            raise ShapeError("encode_patches expects a single-frame input")
        arr = arr[0]
    else:
        arr = np.asarray(image.data if isinstance(image, Tensor) else image)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
    h_px, w_px, c = arr.shape
    p = enc.patch_size
    if h_px % p or w_px % p:
        raise BadResolution(f"{h_px}x{w_px} not divisible by patch size {p}")
    h, w = h_px // p, w_px // p
    patches = arr.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * c)
    hidden = np.tanh(patches @ enc.w1.T)
    return TargetFeatures(Tensor((hidden @ enc.w2.T).astype(np.float32)))


@dataclass
class Projector:
    """Trainable two-layer MLP from model width to encoder width."""

    d_model: int
    d_enc: int
    params: ParamStore

    def apply(self, x):
        h = matmul(x, self.params["proj.fc1.weight"].transpose((1, 0)))
        h = gelu(h + self.params["proj.fc1.bias"])
        return matmul(h, self.params["proj.fc2.weight"].transpose((1, 0))) \
            + self.params["proj.fc2.bias"]


def init_projector(d_model, d_enc, seed) -> Projector:
    ps = ParamStore(rng_seed=seed)
    rng = make_rng(seed, "projector")
    ps.add("proj.fc1.weight",
           rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model)).astype(np.float32))
    ps.add("proj.fc1.bias", np.zeros(d_model, dtype=np.float32))
    ps.add("proj.fc2.weight",
           rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_enc, d_model)).astype(np.float32))
    ps.add("proj.fc2.bias", np.zeros(d_enc, dtype=np.float32))
    return Projector(d_model=d_model, d_enc=d_enc, params=ps)


def row_cosines(a, b):
    """Per-row cosine similarity of two [N, d] tensors, eps-guarded."""
    dots = (a * b).sum(axis=1)
    na = nm.sqrt((a * a).sum(axis=1))
    nb = nm.sqrt((b * b).sum(axis=1))
    return dots / clamp_min(na * nb, COSINE_EPS)


def sura_loss(y_star: TargetFeatures, tap, proj: Projector):
    """-(1/N) sum_n cos(y*[n], h(tap[n])). In [-1, 1] by construction."""
    y = y_star.y_star if isinstance(y_star, TargetFeatures) else y_star
    if tap.shape[0] != y.shape[0]:
        raise TokenCountMismatch(
            f"tap has {tap.shape[0]} tokens, targets have {y.shape[0]}")
    projected = proj.apply(tap)
    return -row_cosines(Tensor(y.data), projected).mean()


def total_subject_loss(region_loss, sura, lam):
    """Masked velocity loss plus lam times the alignment term."""
    if lam < 0:
        raise ShapeError("lambda must be >= 0")
    return region_loss + lam * sura


def raa_fuse(projected, y_star: TargetFeatures):
    """Relation map R = softmax(projected y*^T / sqrt(d)) and fusion
    feature x* = R y*. Each row of R sums to 1."""
    y = y_star.y_star if isinstance(y_star, TargetFeatures) else y_star
    if projected.ndim != 2 or projected.shape[1] != y.shape[1]:
        raise ShapeError(
            f"projected {tuple(projected.shape)} incompatible with targets "
            f"{tuple(y.shape)}")
    d = y.shape[1]
    logits = matmul(projected, Tensor(y.data).transpose((1, 0))) * (1.0 / np.sqrt(d))
    relation = softmax_rows(logits)
    x_star = matmul(relation, Tensor(y.data))
    return relation, x_star


def raa_loss(y_star, x_star, sim="cosine"):
    """-(1/N) sum_n sim(y*[n], x*[n]); cosine by default, negative L2 as a
    config alternative."""
    y = y_star.y_star if isinstance(y_star, TargetFeatures) else y_star
    x = x_star.y_star if isinstance(x_star, TargetFeatures) else x_star
    if tuple(y.shape) != tuple(x.shape):
        raise ShapeError(f"shape {tuple(y.shape)} != {tuple(x.shape)}")
    if sim == "cosine":
        return -row_cosines(Tensor(y.data), x).mean()
    if sim == "neg_l2":
        d = Tensor(y.data) - x
        return (d * d).sum(axis=1).mean()
    raise ShapeError(f"unknown similarity {sim!r}")
