"""Training procedures and combined inference.

Three stages mirror the two-stage customization design on top of a small
pretrained base: (1) base pretraining with the plain velocity loss and
conditioning dropout, (2) the subject stage training a subject adapter set,
projector, and V* row against masked-velocity + alignment losses on single
images, (3) the motion stage training a motion adapter set and S* row
against velocity + flow-alignment losses on reference videos. The base
parameter store is frozen byte-for-byte through both adapter stages.

Every run emits a manifest that fully determines its outputs: config, seeds,
and the procedural corpus recipe. Rerunning a manifest reproduces artifacts
bit-exactly (plain gradient descent, seeded streams, ordered reductions).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import dit, evaluation, flowmatch, lora, mora, sura, toyvae
from .errors import MissingMask, ShapeError, TrainingDiverged
from .numerics import ParamStore, Tensor, make_rng, read_stns, write_stns
from .toyvae import LatentTensor, VideoTensor, decode, encode


@dataclass
class TrainConfig:
    stage: str = "pretrain"          # pretrain | subject | motion
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 1
    lam: float = 0.05                # subject alignment weight
    alpha_w: float = 1.0             # motion alignment weight
    rank_subject: int = 8
    rank_motion: int = 16
    seed: int = 0
    cond_dropout: float = 0.1        # pretrain only
    mora_every: int = 1              # 0 disables the flow-alignment term
    mora_windowed: bool = False
    window: int = 6
    stride: int = 2
    train_special_tokens: bool = True
    # "sgd" is plain momentum-free descent; "adam" is deterministic Adam
    # (zero-initialized state, no stochastic parts), needed because the
    # adapter factors start near zero and raw gradient steps barely move them
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.lr <= 0:
            raise ShapeError("lr must be positive")
        if self.steps < 1:
            raise ShapeError("steps must be >= 1")
        if self.batch < 1:
            raise ShapeError("batch must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ShapeError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunManifest:
    kind: str
    config: dict
    model_cfg: dict
    seeds: dict
    corpus: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class SubjectArtifact:
    lora: lora.LoraSet
    projector: sura.Projector
    vstar: Tensor

    def token_overrides(self):
        return {"text.vstar": self.vstar}


@dataclass
class MotionArtifact:
    lora: lora.LoraSet
    sstar: Tensor

    def token_overrides(self):
        return {"text.sstar": self.sstar}


def _frozen_view(params: ParamStore) -> ParamStore:
    """Same arrays, fresh non-trainable wrappers: gradients can flow through
    these weights but never land on them."""
    out = ParamStore(params.rng_seed)
    for name, p in params.items():
        out.add(name, Tensor(p.data), trainable=False)
    return out


class _Optimizer:
    """Deterministic first-order updates. Adam keeps zero-initialized moment
    state per parameter, so reruns are bit-identical given identical
    gradients; there is no stochastic state to seed."""

    def __init__(self, kind, lr, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.lr = kind, lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m, self._v = {}, {}
        self._t = 0

    def step(self, trainables: ParamStore):
        self._t += 1
        for name, p in trainables.trainable_items():
            if p.grad is None:
                continue
            g = p.grad
            if self.kind == "sgd":
                p.data -= self.lr * g
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self._t)
            vhat = v / (1.0 - self.b2 ** self._t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        trainables.zero_grads()


def _assert_base_unmoved(base: ParamStore):
    for name, p in base.items():
        if p.grad is not None:
            raise TrainingDiverged(f"gradient leaked onto frozen base {name}")


def _config_dict(cfg):
    return dataclasses.asdict(cfg)


def _manifest(kind, cfg, model_cfg, corpus_recipe, corpus_digest, **extra):
    return RunManifest(
        kind=kind,
        config=_config_dict(cfg),
        model_cfg=_config_dict(model_cfg),
        seeds={"train": cfg.seed},
        corpus={"recipe": corpus_recipe, "digest": corpus_digest},
        extra=extra,
    )


# -- base pretraining -----------------------------------------------------------

def pretrain(cfg: TrainConfig, corpus, model_cfg: dit.ModelConfig,
             corpus_recipe=None, on_step=None):
    """Train base parameters with the velocity prediction loss on
    (video, caption) pairs; conditioning drops to the learned null token
    with probability cond_dropout."""
    params = dit.init_params(model_cfg, cfg.seed)
    prepared = []
    for s in corpus:
        z0 = encode(s.video).latents.data
        cond = dit.embed_text(s.caption, cfg.seed, model_cfg)
        prepared.append((z0, cond))
    uncond = dit.embed_text("", cfg.seed, model_cfg)

    opt = _Optimizer(cfg.optimizer, cfg.lr)
    pick = make_rng(cfg.seed, "pretrain.pick")
    noise = make_rng(cfg.seed, "pretrain.noise")
    t_rng = make_rng(cfg.seed, "pretrain.t")
    drop = make_rng(cfg.seed, "pretrain.drop")
    losses, dropout_hits = [], 0
    for step in range(cfg.steps):
        batch_losses = []
        for _ in range(cfg.batch):
            i = int(pick.integers(len(prepared)))
            z0, cond = prepared[i]
            if cfg.cond_dropout > 0 and drop.random() < cfg.cond_dropout:
                cond = uncond
                dropout_hits += 1
            t = float(t_rng.random())
            z1 = noise.standard_normal(z0.shape).astype(np.float32)
            z_t = (1.0 - t) * z0 + t * z1
            v_t = Tensor(z1 - z0)
            out = dit.forward(model_cfg, params, Tensor(z_t), t, cond)
            batch_losses.append(flowmatch.velocity_loss(out.velocity, v_t))
        loss = batch_losses[0] if cfg.batch == 1 else \
            sum(batch_losses[1:], batch_losses[0]) / float(cfg.batch)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(f"pretrain loss non-finite at step {step}")
        losses.append(round(val, 6))
        loss.backward()
        opt.step(params)
        if on_step:
            on_step(step, val)
    man = _manifest("pretrain", cfg, model_cfg, corpus_recipe,
                    datamod.corpus_digest(corpus),
                    losses=losses, dropout_hits=dropout_hits)
    man.outputs["checkpoint_checksum"] = params.checksum()
    return params, man


# -- subject stage ----------------------------------------------------------------

def train_subject(cfg: TrainConfig, model_cfg: dit.ModelConfig,
                  base_params: ParamStore, samples, layer_types=None,
                  enc: sura.PatchEncoder = None, corpus_recipe=None,
                  on_step=None):
    """Adapter-only subject stage: per step, reconstruct one reference image
    under the masked velocity loss plus the weighted feature-alignment loss
    on the block-1 tap. Updates touch only the subject adapters, the
    projector, and the V* row; the base store stays frozen."""
    enc = enc or sura.PatchEncoder(seed=cfg.seed)
    base = _frozen_view(base_params)
    base_sum = base_params.checksum()
    subject_set = lora.attach("subject", model_cfg, cfg.rank_subject,
                              cfg.seed, layer_types)
    projector = sura.init_projector(model_cfg.d_model, enc.d_enc, cfg.seed)
    vstar = Tensor(base_params["text.vstar"].data.copy(),
                   requires_grad=cfg.train_special_tokens)

    trainables = subject_set.trainable_params()
    for name, p in projector.params.items():
        trainables.add(name, p)
    if cfg.train_special_tokens:
        trainables.add("text.vstar", vstar)

    prepared = []
    for s in samples:
        if s.mask is None:
            raise MissingMask(f"subject sample {s.caption!r} has no mask")
        if s.video.n_frames != 1:
            raise ShapeError("subject stage trains on single images")
        z0 = encode(s.video).latents.data
        latent_mask = flowmatch.pool_mask_to_latent(
            s.mask if s.mask.ndim == 2 else s.mask[0])[None]
        y_star = sura.encode_patches(enc, s.video)
        cond = dit.embed_text(s.caption, base_params.rng_seed, model_cfg)
        prepared.append((z0, latent_mask, y_star, cond))

    opt = _Optimizer(cfg.optimizer, cfg.lr)
    noise = make_rng(cfg.seed, "subject.noise")
    t_rng = make_rng(cfg.seed, "subject.t")
    overrides = {"text.vstar": vstar}
    losses = []
    for step in range(cfg.steps):
        z0, latent_mask, y_star, cond = prepared[step % len(prepared)]
        t = float(t_rng.random())
        z1 = noise.standard_normal(z0.shape).astype(np.float32)
        z_t = (1.0 - t) * z0 + t * z1
        v_t = Tensor(z1 - z0)
        ctx = lora.training_context(subject_set)
        out = dit.forward(model_cfg, base, Tensor(z_t), t, cond, ctx,
                          token_overrides=overrides)
        region = flowmatch.masked_velocity_loss(out.velocity, v_t, latent_mask)
        align = sura.sura_loss(y_star, out.tap, projector)
        loss = sura.total_subject_loss(region, align, cfg.lam)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(f"subject loss non-finite at step {step}")
        losses.append(round(val, 6))
        loss.backward()
        _assert_base_unmoved(base)
        opt.step(trainables)
        if on_step:
            on_step(step, val)
    if base_params.checksum() != base_sum:
        raise TrainingDiverged("frozen base parameters changed")
    artifact = SubjectArtifact(lora=subject_set, projector=projector, vstar=vstar)
    man = _manifest("subject", cfg, model_cfg, corpus_recipe,
                    datamod.corpus_digest(samples),
                    losses=losses,
                    layer_types=sorted({a.layer_type for a in
                                        subject_set.adapters.values()}))
    man.outputs["base_checksum"] = base_sum
    man.outputs["artifact_checksum"] = trainables.checksum()
    return artifact, man


# -- motion stage -----------------------------------------------------------------

def train_motion(cfg: TrainConfig, model_cfg: dit.ModelConfig,
                 base_params: ParamStore, samples, layer_types=None,
                 flow_cfg: mora.FlowConfig = None, corpus_recipe=None,
                 on_step=None):
    """Adapter-only motion stage: velocity loss plus the weighted L1
    alignment between reference flows and flows of the one-step-denoised
    video (every mora_every steps; 0 disables the term)."""
    flow_cfg = flow_cfg or mora.FlowConfig()
    base = _frozen_view(base_params)
    base_sum = base_params.checksum()
    motion_set = lora.attach("motion", model_cfg, cfg.rank_motion,
                             cfg.seed, layer_types)
    sstar = Tensor(base_params["text.sstar"].data.copy(),
                   requires_grad=cfg.train_special_tokens)
    trainables = motion_set.trainable_params()
    if cfg.train_special_tokens:
        trainables.add("text.sstar", sstar)

    prepared = []
    for s in samples:
        z0 = encode(s.video).latents.data
        cond = dit.embed_text(s.caption, base_params.rng_seed, model_cfg)
        f_ref = mora.flow_stack(s.video, flow_cfg)
        prepared.append((z0, cond, mora.FlowField(Tensor(f_ref.flows.data))))

    opt = _Optimizer(cfg.optimizer, cfg.lr)
    noise = make_rng(cfg.seed, "motion.noise")
    t_rng = make_rng(cfg.seed, "motion.t")
    overrides = {"text.sstar": sstar}
    losses = []
    for step in range(cfg.steps):
        z0, cond, f_ref = prepared[step % len(prepared)]
        t = float(t_rng.random())
        z1 = noise.standard_normal(z0.shape).astype(np.float32)
        z_t = (1.0 - t) * z0 + t * z1
        v_t = Tensor(z1 - z0)
        ctx = lora.training_context(motion_set)
        out = dit.forward(model_cfg, base, Tensor(z_t), t, cond, ctx,
                          token_overrides=overrides)
        temporal = flowmatch.velocity_loss(out.velocity, v_t)
        use_mora = (cfg.alpha_w > 0 and cfg.mora_every > 0
                    and step % cfg.mora_every == 0)
        if use_mora:
            f_gen = mora.denoised_flow_stack(
                Tensor(z_t), out.velocity, t, flow_cfg,
                windowed=cfg.mora_windowed, window=cfg.window,
                stride=cfg.stride)
            f_aligned = mora.align_reference(f_ref, f_gen)
            loss = mora.total_motion_loss(
                temporal, mora.mora_loss(f_aligned, f_gen), cfg.alpha_w)
        else:
            loss = temporal
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(f"motion loss non-finite at step {step}")
        losses.append(round(val, 6))
        loss.backward()
        _assert_base_unmoved(base)
        opt.step(trainables)
        if on_step:
            on_step(step, val)
    if base_params.checksum() != base_sum:
        raise TrainingDiverged("frozen base parameters changed")
    artifact = MotionArtifact(lora=motion_set, sstar=sstar)
    man = _manifest("motion", cfg, model_cfg, corpus_recipe,
                    datamod.corpus_digest(samples),
                    losses=losses,
                    layer_types=sorted({a.layer_type for a in
                                        motion_set.adapters.values()}))
    man.outputs["base_checksum"] = base_sum
    man.outputs["artifact_checksum"] = trainables.checksum()
    return artifact, man


# -- inference --------------------------------------------------------------------

def infer(model_cfg: dit.ModelConfig, base_params: ParamStore,
          subject_art: SubjectArtifact, motion_art: MotionArtifact,
          prompt, sampler_cfg: flowmatch.SamplerConfig, n_frames=17,
          resolution=(32, 32), ref_image=None, ref_video=None,
          enc: sura.PatchEncoder = None, flow_cfg: mora.FlowConfig = None,
          out_dir=None):
    """Merged sampling with the step schedules, decode, and proxy scoring.
    Either artifact may be None (single-axis customization)."""
    enc = enc or sura.PatchEncoder(seed=0)
    flow_cfg = flow_cfg or mora.FlowConfig()
    overrides = {}
    if subject_art is not None:
        overrides.update(subject_art.token_overrides())
    if motion_art is not None:
        overrides.update(motion_art.token_overrides())

    def model(z, t, cond, ctx):
        return dit.forward(model_cfg, base_params, z, t, cond, ctx,
                           token_overrides=overrides).velocity

    cond = dit.embed_text(prompt, base_params.rng_seed, model_cfg)
    uncond = dit.embed_text("", base_params.rng_seed, model_cfg)
    h, w = resolution
    shape = (toyvae.latent_frames(n_frames), h // 4, w // 4, model_cfg.d_lat)
    z = flowmatch.sample(
        model, cond, uncond, sampler_cfg,
        subject=subject_art.lora if subject_art else None,
        motion=motion_art.lora if motion_art else None,
        latent_shape=shape)
    video = decode(LatentTensor(z))

    report = evaluation.MetricReport()
    if ref_image is not None:
        report.subject_similarity = evaluation.subject_similarity(
            video, ref_image, enc)
    if ref_video is not None and video.n_frames == ref_video.n_frames:
        report.motion_fidelity = evaluation.motion_fidelity(
            video, ref_video, flow_cfg)
    if video.n_frames >= 2:
        report.temporal_consistency = evaluation.temporal_consistency(video, enc)

    man = RunManifest(
        kind="infer",
        config={"prompt": prompt, "sampler": _config_dict(sampler_cfg),
                "n_frames": n_frames, "resolution": list(resolution)},
        model_cfg=_config_dict(model_cfg),
        seeds={"sampler": sampler_cfg.seed},
        extra={"base_checksum": base_params.checksum()},
    )
    report.provenance = man.outputs["video_checksum"] = _video_checksum(video)
    man.extra["report"] = report.as_dict()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_stns(os.path.join(out_dir, "video.stns"), video.frames.data)
        frames_dir = os.path.join(out_dir, "frames")
        os.makedirs(frames_dir, exist_ok=True)
        for i, frame in enumerate(video.frames.data):
            toyvae.write_ppm(os.path.join(frames_dir, f"frame{i:03d}.ppm"), frame)
        if video.n_frames >= 2:
            flows_dir = os.path.join(out_dir, "flows")
            os.makedirs(flows_dir, exist_ok=True)
            gen_flows = mora.flow_stack(video, flow_cfg)
            write_stns(os.path.join(out_dir, "flows.stns"),
                       gen_flows.flows.data)
            for i in range(gen_flows.n_pairs):
                mora.write_flow_ppm(
                    os.path.join(flows_dir, f"flow{i:03d}.ppm"),
                    gen_flows.flows.data[i])
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(report.as_dict(), f, indent=2, sort_keys=True)
        man.save(os.path.join(out_dir, "manifest.json"))
    return video, report, man


def _video_checksum(video: VideoTensor):
    import hashlib
    return hashlib.sha256(
        np.ascontiguousarray(video.frames.data).tobytes()).hexdigest()


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(dirpath, model_cfg: dit.ModelConfig, params: ParamStore):
    """One STNS file per parameter plus a JSON manifest."""
    os.makedirs(dirpath, exist_ok=True)
    entries = {}
    for i, (name, p) in enumerate(params.items()):
        fname = f"param{i:04d}.stns"
        write_stns(os.path.join(dirpath, fname), p.data)
        entries[name] = {"file": fname, "trainable": bool(p.requires_grad)}
    manifest = {"cfg": _config_dict(model_cfg), "seed": params.rng_seed,
                "params": entries, "checksum": params.checksum()}
    with open(os.path.join(dirpath, "checkpoint.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(dirpath):
    with open(os.path.join(dirpath, "checkpoint.json")) as f:
        manifest = json.load(f)
    model_cfg = dit.ModelConfig(**manifest["cfg"])
    params = ParamStore(manifest["seed"])
    for name, entry in manifest["params"].items():
        arr = read_stns(os.path.join(dirpath, entry["file"]))
        params.add(name, arr, trainable=entry["trainable"])
    if params.checksum() != manifest["checksum"]:
        raise ShapeError(f"checkpoint {dirpath} checksum mismatch")
    return model_cfg, params


def save_subject_artifact(dirpath, art: SubjectArtifact):
    lora.save_lora(dirpath, art.lora)
    write_stns(os.path.join(dirpath, "vstar.stns"), art.vstar.data)
    proj_dir = os.path.join(dirpath, "projector")
    os.makedirs(proj_dir, exist_ok=True)
    entries = {}
    for i, (name, p) in enumerate(art.projector.params.items()):
        fname = f"proj{i:02d}.stns"
        write_stns(os.path.join(proj_dir, fname), p.data)
        entries[name] = fname
    meta = {"kind": "subject", "d_model": art.projector.d_model,
            "d_enc": art.projector.d_enc, "projector": entries}
    with open(os.path.join(dirpath, "artifact.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_subject_artifact(dirpath) -> SubjectArtifact:
    lset = lora.load_lora(dirpath)
    with open(os.path.join(dirpath, "artifact.json")) as f:
        meta = json.load(f)
    ps = ParamStore()
    for name, fname in meta["projector"].items():
        ps.add(name, read_stns(os.path.join(dirpath, "projector", fname)))
    proj = sura.Projector(d_model=meta["d_model"], d_enc=meta["d_enc"], params=ps)
    vstar = Tensor(read_stns(os.path.join(dirpath, "vstar.stns")))
    return SubjectArtifact(lora=lset, projector=proj, vstar=vstar)


def save_motion_artifact(dirpath, art: MotionArtifact):
    lora.save_lora(dirpath, art.lora)
    write_stns(os.path.join(dirpath, "sstar.stns"), art.sstar.data)
    with open(os.path.join(dirpath, "artifact.json"), "w") as f:
        json.dump({"kind": "motion"}, f, indent=2, sort_keys=True)


def load_motion_artifact(dirpath) -> MotionArtifact:
    lset = lora.load_lora(dirpath)
    sstar = Tensor(read_stns(os.path.join(dirpath, "sstar.stns")))
    return MotionArtifact(lora=lset, sstar=sstar)
