"""Invariant suite behind the `selftest` CLI command: one row per invariant
group, pass/fail per check, exit status for scripting. The pytest suite
covers the same ground (and more) with tighter granularity; this runner
exists so a deployed artifact can vouch for itself without a test harness.
"""

from __future__ import annotations

import time
import traceback

import numpy as np

from . import data as datamod
from . import dit, evaluation, flowmatch, lora, mora, pipeline, sura, toyvae
from . import numerics as nm
from .numerics import ParamStore, Tensor
from .toyvae import LatentTensor, VideoTensor


def _check_codec():
    rng = np.random.default_rng(0)
    for trial in range(5):
        t = int(rng.choice([1, 5, 13, 17]))
        x = rng.random((t, 16, 16, 3)).astype(np.float32)
        v = VideoTensor(Tensor(x))
        back = toyvae.decode(toyvae.encode(v))
        assert np.array_equal(back.frames.data, x), "roundtrip not bit-exact"
    x = rng.random((49, 16, 16, 3)).astype(np.float32)
    z = toyvae.encode(VideoTensor(Tensor(x)))
    full = toyvae.decode(z).frames.data
    for b in toyvae.decode_windowed(z, 6, 2):
        n = b.frames.shape[0]
        assert np.array_equal(b.frames.data,
                              full[b.pixel_frame_offset:b.pixel_frame_offset + n])
    a = rng.random((13, 16, 16, 3)).astype(np.float32)
    bb = rng.random((13, 16, 16, 3)).astype(np.float32)
    lhs = toyvae.encode_frames(0.3 * a + 0.6 * bb).data
    rhs = 0.3 * toyvae.encode_frames(a).data + 0.6 * toyvae.encode_frames(bb).data
    assert np.allclose(lhs, rhs, atol=1e-6), "codec not linear"


def _check_flowmatch():
    rng = np.random.default_rng(1)
    for _ in range(20):
        z0 = rng.normal(size=(2, 3, 3, 8))
        z1 = rng.normal(size=(2, 3, 3, 8))
        t = float(rng.random())
        z_t = flowmatch.interpolate(Tensor(z0), Tensor(z1), t)
        u = flowmatch.velocity_target(Tensor(z0), Tensor(z1))
        rec = flowmatch.recover_z0(z_t, u, t)
        assert np.abs(rec.data - z0).max() < 1e-6, "one-step recovery failed"
    u = Tensor(rng.normal(size=(2, 2, 2, 4)).astype(np.float32))
    assert flowmatch.velocity_loss(u, u).item() == 0.0
    ones = flowmatch.masked_velocity_loss(u, u + 1.0, np.ones((2, 2, 2)))
    plain = flowmatch.velocity_loss(u, u + 1.0)
    assert ones.item() == plain.item(), "ones-mask must equal plain loss"
    z0 = rng.normal(size=(1, 2, 2, 4))
    z1 = rng.normal(size=(1, 2, 2, 4))
    vel = Tensor(z1 - z0)
    model = lambda z, t, c, ctx: vel
    for steps in (1, 5, 50):
        cfg = flowmatch.SamplerConfig(steps=steps, cfg_scale=1.0, seed=0)
        out = flowmatch.sample(model, None, None, cfg, init=Tensor(z1),
                               dtype=np.float64)
        assert np.abs(out.data - z0).max() < 1e-6, f"sampler oracle {steps}"


def _check_lora():
    cfg = dit.ModelConfig(d_model=16, n_blocks=2, n_heads=2, d_ffn=32)
    subject = lora.attach("subject", cfg, 2, seed=0)
    motion = lora.attach("motion", cfg, 2, seed=1)
    assert len(subject.adapters) == 6 and len(motion.adapters) == 8
    params = dit.init_params(cfg, 3)
    cond = dit.embed_text("a b", 3, cfg)
    z = Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 192)).astype(np.float32))
    base = dit.forward(cfg, params, z, 0.5, cond).velocity.data
    ctx = lora.merge(subject, motion, 1)
    with_zero = dit.forward(cfg, params, z, 0.5, cond, ctx).velocity.data
    assert np.array_equal(base, with_zero), "zero-B adapters must be a no-op"
    rng = np.random.default_rng(4)
    for s in (subject, motion):
        for ad in s.adapters.values():
            ad.b.data[:] = rng.normal(0, 0.1, ad.b.shape).astype(np.float32)
    ctx = lora.merge(subject, motion, 20)
    merged = dit.forward(cfg, params, z, 0.5, cond, ctx).velocity.data
    p2 = params.copy()
    for name in set(subject.adapters) | set(motion.adapters):
        p2[name + ".weight"].data += ctx.total_delta(name)
    direct = dit.forward(cfg, p2, z, 0.5, cond).velocity.data
    assert np.abs(merged - direct).max() < 1e-6, "merge != weight-sum oracle"
    sched = lora.ScaleSchedule(15, 0.5, 1.0)
    assert (lora.schedule_scale(sched, 5), lora.schedule_scale(sched, 15),
            lora.schedule_scale(sched, 20)) == (0.5, 1.0, 1.0)
    masked = lora.sweep_mask(subject, "q")
    active = [a.layer_type for a in masked.adapters.values()
              if masked.type_active(a.layer_type)]
    assert set(active) == {"q"}
    ad = subject.adapters["block1.self_attn.q"]
    delta = lora.effective_delta(ad, 1.0).data
    sv = np.linalg.svd(delta, compute_uv=False)
    assert all(s < 1e-6 for s in sv[ad.rank:]), "delta rank exceeds r"


def _check_flow_estimator():
    cfg = mora.FlowConfig()
    rng = np.random.default_rng(0)

    def texture(seed):
        r = np.random.default_rng(seed)
        yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
        img = np.zeros((32, 32))
        for _ in range(6):
            fx, fy = r.uniform(-0.15, 0.15, 2)
            img += r.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy)
                                                + r.uniform(0, 2 * np.pi))
        img = (img - img.min()) / (img.max() - img.min())
        return np.repeat(img[:, :, None], 3, 2).astype(np.float32)

    f = texture(0)
    assert np.abs(mora.flow(f, f, cfg).data).max() == 0.0, "zero flow not exact"
    for seed in range(3):
        img = texture(seed)
        fl = mora.flow(img, np.roll(img, 1, axis=1), cfg).data
        assert abs(fl[..., 0].mean() - 1.0) < 0.3, f"shift oracle u (seed {seed})"
        assert abs(fl[..., 1].mean()) < 0.15, f"shift oracle v (seed {seed})"
        # vertical/backward shifts: the contract is sign correctness
        down = mora.flow(img, np.roll(img, 1, axis=0), cfg).data
        up = mora.flow(img, np.roll(img, -1, axis=0), cfg).data
        left = mora.flow(img, np.roll(img, -1, axis=1), cfg).data
        assert down[..., 1].mean() > 0.5 and up[..., 1].mean() < -0.5
        assert left[..., 0].mean() < -0.5


def _check_softmax():
    out = nm.softmax_rows(Tensor(np.array([[0.0, 0.0]]))).data
    assert np.allclose(out, 0.5)
    out = nm.softmax_rows(Tensor(np.array([[1000.0, 0.0]]))).data
    assert abs(out[0, 0] - 1.0) < 1e-6 and np.isfinite(out).all()
    row = np.array([[1.0, 2.0, 3.0]])
    e = np.exp(row - row.max())
    assert np.allclose(nm.softmax_rows(Tensor(row)).data, e / e.sum(), atol=1e-7)


def _check_sura():
    rng = np.random.default_rng(0)
    y = sura.TargetFeatures(Tensor(rng.normal(size=(4, 8)).astype(np.float32)))

    class Identity:
        def apply(self, x):
            return x

    proj = Identity()
    assert abs(sura.sura_loss(y, Tensor(y.y_star.data), proj).item() + 1.0) < 1e-6
    assert abs(sura.sura_loss(y, Tensor(-y.y_star.data), proj).item() - 1.0) < 1e-6
    scaled = Tensor(y.y_star.data * 7.5)
    assert abs(sura.sura_loss(y, scaled, proj).item() + 1.0) < 1e-6, \
        "cosine must be scale invariant"
    relation, fused = sura.raa_fuse(Tensor(np.zeros((4, 8), dtype=np.float32)), y)
    assert np.allclose(relation.data, 0.25, atol=1e-6), "uniform relation map"
    assert np.allclose(relation.data.sum(axis=1), 1.0, atol=1e-6)


def _check_dit():
    cfg = dit.ModelConfig(d_model=16, n_blocks=3, n_heads=2, d_ffn=32)
    params = dit.init_params(cfg, 0)
    cond = dit.embed_text("hello world", 0, cfg)
    z = Tensor(np.random.default_rng(1).normal(size=(1, 2, 2, 192)).astype(np.float32))
    a = dit.forward(cfg, params, z, 0.3, cond)
    b = dit.forward(cfg, params, z, 0.3, cond)
    assert np.array_equal(a.velocity.data, b.velocity.data), "forward not deterministic"
    assert a.velocity.shape == z.shape
    p2 = params.copy()
    p2["block3.ffn.0.weight"].data += 0.37
    c = dit.forward(cfg, p2, z, 0.3, cond)
    assert np.array_equal(a.tap.data, c.tap.data), "tap must ignore later blocks"
    p3 = params.copy()
    p3["block1.ffn.0.weight"].data += 0.37
    d = dit.forward(cfg, p3, z, 0.3, cond)
    assert not np.array_equal(a.tap.data, d.tap.data), "tap must see block 1"


def _check_data():
    spec = datamod.SubjectSpec(shape="circle", size=0.25)
    s = datamod.gen_subject(spec, 32, 32, seed=1)
    r = 0.25 * 32 / 2
    assert abs(s.mask.sum() - np.pi * r * r) < 2.0, "circle footprint"
    ms = datamod.MotionSpec(kind="linear", frames=9, velocity=(1.0, 0.0))
    sub = datamod.SubjectSpec(shape="square", size=0.3)
    mv = datamod.gen_motion(ms, sub, 32, 32, seed=2)
    cents = [datamod.mask_centroid(mv.mask[k]) for k in range(9)]
    dx = np.diff([c[0] for c in cents])
    assert np.all(np.abs(dx - 1.0) < 0.2), "centroid trajectory"


def _check_metrics():
    enc = sura.PatchEncoder(seed=0)
    rng = np.random.default_rng(3)
    img = rng.random((1, 16, 16, 3)).astype(np.float32)
    vid = VideoTensor(Tensor(np.repeat(img, 5, axis=0)))
    ref = VideoTensor(Tensor(img))
    assert abs(evaluation.subject_similarity(vid, ref, enc) - 1.0) < 1e-6
    assert abs(evaluation.temporal_consistency(vid, enc) - 1.0) < 1e-6
    raw = {"full": 0.8, "q": 0.5, "k": 0.2, "v": 0.6, "o": 0.4,
           "ffn.0": 0.7, "ffn.2": 0.3}
    table = evaluation._normalize_sweep(raw)
    assert table.normalized["full"] == 100.0 and min(table.normalized.values()) == 0.0
    order_raw = sorted(raw, key=raw.get)
    order_norm = sorted(table.normalized, key=table.normalized.get)
    assert order_raw == order_norm, "normalization must preserve order"


def _check_gradients():
    cfg = dit.ModelConfig(d_model=8, n_blocks=1, n_heads=2, d_ffn=16)
    params = dit.init_params(cfg, 1)
    params["head.weight"].data[:] = np.random.default_rng(8).normal(
        0, 0.05, params["head.weight"].shape)
    cond = dit.embed_text("x y", 1, cfg)
    rng = np.random.default_rng(9)
    z = nm.constant(rng.normal(size=(1, 2, 2, 192)), dtype=np.float64)
    target = nm.constant(rng.normal(size=(1, 2, 2, 192)), dtype=np.float64)
    small = ParamStore()
    for name in ("block1.self_attn.q.weight", "block1.ffn.0.weight"):
        small.add(name, params[name].data.copy())

    def loss_fn(ps):
        merged = ParamStore(params.rng_seed)
        for name, q in params.items():
            if name in ps:
                merged.add(name, ps[name], trainable=True)
            else:
                merged.add(name, Tensor(q.data), trainable=False)
        out = dit.forward(cfg, merged, z, 0.4, cond)
        return flowmatch.velocity_loss(out.velocity, target)

    report = nm.grad_check(loss_fn, small, eps=1e-4, tol=1e-3)
    assert report.passed, f"grad check failed: {report.max_rel_err}"


def _check_determinism():
    cfg = dit.ModelConfig(d_model=16, n_blocks=1, n_heads=2, d_ffn=32)
    corpus = datamod.build_pretrain_corpus(H=16, W=16, frames=5,
                                           n_subjects=2, n_motions=1, seed=0)
    tc = pipeline.TrainConfig(stage="pretrain", steps=5, seed=0, lr=0.01,
                              optimizer="adam")
    p1, _ = pipeline.pretrain(tc, corpus, cfg)
    p2, _ = pipeline.pretrain(tc, corpus, cfg)
    assert p1.checksum() == p2.checksum(), "pretrain not bit-reproducible"


GROUPS = [
    ("codec roundtrip + windows", _check_codec, False),
    ("flow-matching algebra", _check_flowmatch, False),
    ("adapter neutrality + merge", _check_lora, False),
    ("flow estimator oracles", _check_flow_estimator, False),
    ("stable softmax", _check_softmax, False),
    ("alignment losses", _check_sura, False),
    ("transformer contracts", _check_dit, False),
    ("data generators", _check_data, False),
    ("metric trivials + sweep normalization", _check_metrics, False),
    ("gradient checks", _check_gradients, True),
    ("training determinism", _check_determinism, True),
]


def run(fast=False):
    print(f"{'group':<42} {'status':<8} time")
    print("-" * 62)
    all_ok = True
    for name, fn, slow in GROUPS:
        if fast and slow:
            print(f"{name:<42} {'SKIP':<8} -")
            continue
        start = time.time()
        try:
            fn()
            status = "PASS"
        except Exception:
            status = "FAIL"
            all_ok = False
            traceback.print_exc()
        print(f"{name:<42} {status:<8} {time.time() - start:.2f}s")
    print("-" * 62)
    print("selftest:", "PASS" if all_ok else "FAIL")
    return all_ok
