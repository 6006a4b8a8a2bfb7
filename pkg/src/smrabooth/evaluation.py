"""Desk-scale proxy metrics plus the attribution experiments: the per-layer
adapter sweep, the denoise-step timing probe, and the layer-combination
ablation table.

The similarity metrics substitute the frozen patch encoder for the large
pretrained embedders; they are proxies with the same shape (cosine in an
embedding space), not claimed equivalents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import dit, flowmatch, lora, mora, sura
from .errors import EmptyEvalSet, ShapeError, TooFewFrames
from .numerics import Tensor
from .toyvae import LatentTensor, VideoTensor, decode
from .sura import PatchEncoder, encode_patches

COSINE_EPS = 1e-12


@dataclass
class MetricReport:
    subject_similarity: float = None
    motion_fidelity: float = None
    temporal_consistency: float = None
    per_sample: dict = field(default_factory=dict)
    provenance: str = ""

    def as_dict(self):
        return {
            "subject_similarity": self.subject_similarity,
            "motion_fidelity": self.motion_fidelity,
            "temporal_consistency": self.temporal_consistency,
            "per_sample": self.per_sample,
            "provenance": self.provenance,
        }


@dataclass
class SweepTable:
    normalized: dict            # layer_type (+ "full") -> score in 0..100
    raw: dict
    reference: float            # full-layer raw score
    floor: float                # lowest raw score

    def as_dict(self):
        return {"normalized": self.normalized, "raw": self.raw,
                "reference": self.reference, "floor": self.floor}

    def to_csv(self):
        lines = ["layer,raw,normalized"]
        for k in sorted(self.raw):
            lines.append(f"{k},{self.raw[k]:.6f},{self.normalized[k]:.3f}")
        return "\n".join(lines) + "\n"


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / max(na * nb, COSINE_EPS))


def _frame_embedding(enc: PatchEncoder, frame):
    feats = encode_patches(enc, frame[None] if frame.ndim == 3 else frame)
    return feats.y_star.data.mean(axis=0)


def subject_similarity(gen: VideoTensor, ref_image, enc: PatchEncoder):
    """Mean over frames of the cosine between mean-pooled patch embeddings
    of each generated frame and the reference image."""
    ref_frames = ref_image.frames.data if isinstance(ref_image, VideoTensor) \
        else np.asarray(ref_image)
    gen_frames = gen.frames.data
    if gen_frames.shape[1:3] != ref_frames.shape[1:3]:
        raise ShapeError(f"resolution {gen_frames.shape[1:3]} != "
                         f"{ref_frames.shape[1:3]}")
    ref_emb = _frame_embedding(enc, ref_frames[0])
    sims = [_cos(_frame_embedding(enc, f), ref_emb) for f in gen_frames]
    return float(np.mean(sims))


def motion_fidelity(gen: VideoTensor, ref: VideoTensor, cfg: mora.FlowConfig):
    """Mean cosine between corresponding flattened flow slices of the two
    videos. Slices where both flows are (numerically) zero count as 1."""
    if gen.n_frames != ref.n_frames:
        raise ShapeError(f"frame counts differ: {gen.n_frames} vs {ref.n_frames}")
    fg = mora.flow_stack(gen, cfg).flows.data
    fr = mora.flow_stack(ref, cfg).flows.data
    sims = []
    for k in range(fg.shape[0]):
        a, b = fg[k].ravel(), fr[k].ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-6 and nb < 1e-6:
            sims.append(1.0)
        else:
            sims.append(float(a @ b / max(na * nb, COSINE_EPS)))
    return float(np.mean(sims))


def temporal_consistency(v: VideoTensor, enc: PatchEncoder):
    """Mean cosine of consecutive-frame embeddings."""
    frames = v.frames.data
    if frames.shape[0] < 2:
        raise TooFewFrames("temporal consistency needs at least 2 frames")
    embs = [_frame_embedding(enc, f) for f in frames]
    sims = [_cos(embs[k], embs[k + 1]) for k in range(len(embs) - 1)]
    return float(np.mean(sims))


def prompt_adherence(gen: VideoTensor, spec):
    """Analytic color check the synthetic data affords: fraction of frames
    whose off-background pixels are nearest the subject's fill color."""
    from .data import _PALETTE
    target = min(_PALETTE, key=lambda n: float(
        np.sum((np.asarray(_PALETTE[n]) - np.asarray(spec.fill_color)) ** 2)))
    hits = 0
    for frame in gen.frames.data:
        med = np.median(frame.reshape(-1, 3), axis=0)
        d = np.abs(frame - med).sum(axis=2)
        fg = frame[d > 0.25]
        if fg.size == 0:
            continue
        mean_fg = fg.mean(axis=0)
        got = min(_PALETTE, key=lambda n: float(
            np.sum((np.asarray(_PALETTE[n]) - mean_fg) ** 2)))
        hits += got == target
    return hits / gen.n_frames


# -- attribution experiments ----------------------------------------------------

SWEEP_TYPES = ("q", "k", "v", "o", "ffn.0", "ffn.2")


def _normalize_sweep(raw):
    ref = raw["full"]
    floor = min(raw.values())
    span = ref - floor
    normalized = {}
    for k, v in raw.items():
        if span <= 0:
            normalized[k] = 100.0
        else:
            normalized[k] = 100.0 * (v - floor) / span
    return SweepTable(normalized=normalized, raw=dict(raw),
                      reference=ref, floor=floor)


def layer_sweep(model_cfg, params, trained: lora.LoraSet, eval_set,
                metric, sampler_cfg, enc: PatchEncoder = None,
                flow_cfg: mora.FlowConfig = None, token_overrides=None):
    """Zero-all-but-one attribution: evaluate the metric once per layer type
    with every other adapter silenced, plus the unmasked reference. Scores
    normalize so full-layer = 100 and the worst layer = 0.

    The trained set must come from full-layer targeting, otherwise absent
    types trivially tie with the floor.
    """
    if not eval_set:
        raise EmptyEvalSet("layer_sweep needs at least one eval sample")
    enc = enc or PatchEncoder()
    flow_cfg = flow_cfg or mora.FlowConfig()

    def score(lset):
        vals = []
        for sample in eval_set:
            vals.append(_sample_metric(model_cfg, params, lset, sample, metric,
                                       sampler_cfg, enc, flow_cfg,
                                       token_overrides))
        return float(np.mean(vals))

    raw = {"full": score(trained)}
    for t in SWEEP_TYPES:
        raw[t] = score(lora.sweep_mask(trained, t))
    return _normalize_sweep(raw)


def _generate(model_cfg, params, lset, sample, sampler_cfg, token_overrides):
    def model(z, t, cond, ctx):
        return dit.forward(model_cfg, params, z, t, cond, ctx,
                           token_overrides=token_overrides).velocity
    cond = dit.embed_text(sample.caption, params.rng_seed, model_cfg)
    uncond = dit.embed_text("", params.rng_seed, model_cfg)
    t_frames = sample.video.n_frames
    h, w = sample.video.resolution
    shape = ((t_frames - 1) // 4 + 1, h // 4, w // 4, model_cfg.d_lat)
    subject = lset if (lset is not None and lset.role == "subject") else None
    motion = lset if (lset is not None and lset.role == "motion") else None
    z = flowmatch.sample(model, cond, uncond, sampler_cfg,
                         subject=subject, motion=motion, latent_shape=shape)
    return decode(LatentTensor(z))


def _sample_metric(model_cfg, params, lset, sample, metric, sampler_cfg,
                   enc, flow_cfg, token_overrides):
    gen = _generate(model_cfg, params, lset, sample, sampler_cfg, token_overrides)
    if metric == "subject":
        ref = VideoTensor(Tensor(sample.video.frames.data[:1]))
        return subject_similarity(gen, ref, enc)
    if metric == "motion":
        return motion_fidelity(gen, sample.video, flow_cfg)
    if metric == "temporal":
        return temporal_consistency(gen, enc)
    raise ShapeError(f"unknown metric {metric!r}")


def timing_probe(model_cfg, params, subject, motion, cond, uncond,
                 sampler_cfg, ref_image, enc: PatchEncoder = None,
                 token_overrides=None, model_fn=None):
    """Per-step subject similarity of the one-step-recovered frames during
    sampling; the curve this emits is what locates the scale switch point.

    model_fn substitutes the velocity model (oracle tests)."""
    enc = enc or PatchEncoder()
    curve = []

    def model(z, t, cond_toks, ctx):
        if model_fn is not None:
            return model_fn(z, t, cond_toks, ctx)
        return dit.forward(model_cfg, params, z, t, cond_toks, ctx,
                           token_overrides=token_overrides).velocity

    def trace(step, t, z, u, scales):
        z0_hat = flowmatch.recover_z0(z, u, t)
        frames = decode(LatentTensor(z0_hat))
        curve.append({
            "step": step, "t": t,
            "u_norm": float(np.linalg.norm(u.data)),
            "subject_similarity": subject_similarity(frames, ref_image, enc),
            "scales": scales,
        })

    ref_frames = ref_image.frames.data
    h, w = ref_frames.shape[1:3]
    shape = (1, h // 4, w // 4, model_cfg.d_lat)
    flowmatch.sample(model, cond, uncond, sampler_cfg, subject=subject,
                     motion=motion, latent_shape=shape, trace_fn=trace)
    return curve


def spearman_trend(curve, last_n=25):
    """Spearman rank correlation of (step, score) over the trailing steps."""
    tail = curve[-last_n:]
    steps = [c["step"] for c in tail]
    scores = [c["subject_similarity"] for c in tail]
    rho = stats.spearmanr(steps, scores).statistic
    return float(rho) if np.isfinite(rho) else 0.0


DEFAULT_COMBOS = {
    "combo1_full_full": {"subject": SWEEP_TYPES, "motion": SWEEP_TYPES},
    "combo2_qk_voff0f2": {"subject": ("q", "k"),
                          "motion": ("v", "o", "ffn.0", "ffn.2")},
    "combo3_qkf0_vof2": {"subject": ("q", "k", "ffn.0"),
                         "motion": ("v", "o", "ffn.2")},
    "ours_qkf0_voff0f2": {"subject": ("q", "k", "ffn.0"),
                          "motion": ("v", "o", "ffn.0", "ffn.2")},
}


def combination_ablation(model_cfg, base_params, subject_sample, motion_sample,
                         train_cfg, sampler_cfg, combos=None,
                         enc: PatchEncoder = None, flow_cfg=None):
    """Train both adapters per layer-set combination and score the merged
    inference output with all three proxy metrics."""
    from . import pipeline  # late import; pipeline builds on this module

    combos = combos or DEFAULT_COMBOS
    enc = enc or PatchEncoder()
    flow_cfg = flow_cfg or mora.FlowConfig()
    results = {}
    for name, combo in combos.items():
        for key in ("subject", "motion"):
            bad = [t for t in combo[key] if t not in SWEEP_TYPES]
            if bad:
                from .errors import BadLayerType
                raise BadLayerType(f"{name}: unknown layer types {bad}")
        subj_art, _ = pipeline.train_subject(
            train_cfg, model_cfg, base_params, [subject_sample],
            layer_types=tuple(combo["subject"]), enc=enc)
        mot_art, _ = pipeline.train_motion(
            train_cfg, model_cfg, base_params, [motion_sample],
            layer_types=tuple(combo["motion"]), flow_cfg=flow_cfg)
        prompt = f"A {subject_sample.ground_truth['subject'].shape} S* " \
                 f"{motion_sample.ground_truth['motion'].name}"
        video, report, _ = pipeline.infer(
            model_cfg, base_params, subj_art, mot_art, prompt, sampler_cfg,
            n_frames=motion_sample.video.n_frames,
            resolution=motion_sample.video.resolution,
            ref_image=VideoTensor(Tensor(subject_sample.video.frames.data[:1])),
            ref_video=motion_sample.video, enc=enc, flow_cfg=flow_cfg)
        results[name] = report
    return results
