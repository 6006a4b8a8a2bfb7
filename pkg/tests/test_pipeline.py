import json

import numpy as np
import pytest

from smrabooth import data, dit, flowmatch, lora, pipeline, sura
from smrabooth.errors import MissingMask, ShapeError
from smrabooth.numerics import Tensor
from smrabooth.toyvae import VideoTensor

MCFG = dit.ModelConfig(d_model=16, n_blocks=2, n_heads=2, d_ffn=32)


@pytest.fixture(scope="module")
def corpus():
    return data.build_pretrain_corpus(H=16, W=16, frames=5, n_subjects=2,
                                      n_motions=2, seed=0)


@pytest.fixture(scope="module")
def base(corpus):
    cfg = pipeline.TrainConfig(stage="pretrain", steps=60, seed=0, lr=1e-2,
                               optimizer="adam")
    params, manifest = pipeline.pretrain(cfg, corpus, MCFG)
    return params, manifest


@pytest.fixture(scope="module")
def subject_sample():
    return data.gen_subject(data.SubjectSpec(shape="circle", size=0.4,
                                             texture_seed=9), 16, 16, seed=5)


@pytest.fixture(scope="module")
def motion_sample():
    sub = data.SubjectSpec(shape="circle", size=0.4, texture_seed=9)
    ms = data.fit_motion(data.MotionSpec(kind="linear", frames=5,
                                         velocity=(1.0, 0.0)), sub, 16, 16)
    return data.gen_motion(ms, sub, 16, 16, seed=6)


def test_pretrain_loss_decreases_on_average(corpus):
    finals, initials = [], []
    for seed in (0, 1, 2):
        cfg = pipeline.TrainConfig(stage="pretrain", steps=120, seed=seed,
                                   lr=1e-2, optimizer="adam")
        _, man = pipeline.pretrain(cfg, corpus, MCFG)
        losses = man.extra["losses"]
        initials.append(np.mean(losses[:10]))
        finals.append(np.mean(losses[-10:]))
    assert np.mean(finals) < np.mean(initials)


def test_pretrain_bit_reproducible(corpus):
    cfg = pipeline.TrainConfig(stage="pretrain", steps=25, seed=3, lr=1e-2,
                               optimizer="adam")
    p1, m1 = pipeline.pretrain(cfg, corpus, MCFG)
    p2, m2 = pipeline.pretrain(cfg, corpus, MCFG)
    assert p1.checksum() == p2.checksum()
    assert m1.extra["losses"] == m2.extra["losses"]
    assert m1.outputs["checkpoint_checksum"] == p1.checksum()


def test_pretrain_cond_dropout_zero_never_uses_null(corpus):
    cfg = pipeline.TrainConfig(stage="pretrain", steps=30, seed=4, lr=1e-2,
                               cond_dropout=0.0, optimizer="adam")
    _, man = pipeline.pretrain(cfg, corpus, MCFG)
    assert man.extra["dropout_hits"] == 0
    cfg = pipeline.TrainConfig(stage="pretrain", steps=30, seed=4, lr=1e-2,
                               cond_dropout=1.0, optimizer="adam")
    _, man = pipeline.pretrain(cfg, corpus, MCFG)
    assert man.extra["dropout_hits"] == 30


def test_subject_stage_isolation_and_frozen_base(base, subject_sample):
    params, _ = base
    before = params.checksum()
    cfg = pipeline.TrainConfig(stage="subject", steps=12, seed=1, lr=1e-2,
                               rank_subject=2, optimizer="adam")
    art, man = pipeline.train_subject(cfg, MCFG, params, [subject_sample])
    assert params.checksum() == before          # frozen-base contract
    assert man.outputs["base_checksum"] == before
    types = {a.layer_type for a in art.lora.adapters.values()}
    assert types == {"q", "k", "ffn.0"}          # never v, o, ffn.2
    moved = [np.abs(a.b.data).max() for a in art.lora.adapters.values()]
    assert max(moved) > 0.0                      # training moved the factors


def test_motion_stage_isolation(base, motion_sample):
    params, _ = base
    before = params.checksum()
    cfg = pipeline.TrainConfig(stage="motion", steps=6, seed=1, lr=1e-2,
                               rank_motion=2, mora_every=2, optimizer="adam")
    art, _ = pipeline.train_motion(cfg, MCFG, params, [motion_sample])
    assert params.checksum() == before
    types = {a.layer_type for a in art.lora.adapters.values()}
    assert types == {"v", "o", "ffn.0", "ffn.2"}   # never q, k


def test_subject_stage_reproducible(base, subject_sample):
    params, _ = base
    cfg = pipeline.TrainConfig(stage="subject", steps=8, seed=2, lr=1e-2,
                               rank_subject=2, optimizer="adam")
    a1, m1 = pipeline.train_subject(cfg, MCFG, params, [subject_sample])
    a2, m2 = pipeline.train_subject(cfg, MCFG, params, [subject_sample])
    assert m1.outputs["artifact_checksum"] == m2.outputs["artifact_checksum"]
    assert m1.extra["losses"] == m2.extra["losses"]


def test_subject_stage_requires_mask(base, subject_sample):
    params, _ = base
    broken = data.Sample(video=subject_sample.video, mask=None,
                         caption=subject_sample.caption, ground_truth={})
    cfg = pipeline.TrainConfig(stage="subject", steps=2, seed=0, lr=1e-2,
                               rank_subject=2)
    with pytest.raises(MissingMask):
        pipeline.train_subject(cfg, MCFG, params, [broken])


def test_subject_stage_rejects_videos(base, motion_sample):
    params, _ = base
    cfg = pipeline.TrainConfig(stage="subject", steps=2, seed=0, lr=1e-2,
                               rank_subject=2)
    with pytest.raises(ShapeError):
        pipeline.train_subject(cfg, MCFG, params, [motion_sample])


def test_motion_stage_mora_disabled_matches_alpha_zero(base, motion_sample):
    # mora_every=0 must reduce the loop to the plain velocity loss
    params, _ = base
    o1 = pipeline.TrainConfig(stage="motion", steps=6, seed=3, lr=1e-2,
                              rank_motion=2, mora_every=0, optimizer="adam")
    o2 = pipeline.TrainConfig(stage="motion", steps=6, seed=3, lr=1e-2,
                              rank_motion=2, mora_every=1, alpha_w=0.0,
                              optimizer="adam")
    a1, m1 = pipeline.train_motion(o1, MCFG, params, [motion_sample])
    a2, m2 = pipeline.train_motion(o2, MCFG, params, [motion_sample])
    assert m1.outputs["artifact_checksum"] == m2.outputs["artifact_checksum"]


def test_infer_deterministic_and_writes(base, subject_sample, motion_sample,
                                        tmp_path):
    params, _ = base
    scfg = pipeline.TrainConfig(stage="subject", steps=6, seed=1, lr=1e-2,
                                rank_subject=2, optimizer="adam")
    art, _ = pipeline.train_subject(scfg, MCFG, params, [subject_sample])
    sampler = flowmatch.SamplerConfig(steps=4, cfg_scale=1.5, seed=9)
    ref = VideoTensor(Tensor(subject_sample.video.frames.data[:1]))
    v1, r1, m1 = pipeline.infer(MCFG, params, art, None, "A picture of V* circle",
                                sampler, n_frames=5, resolution=(16, 16),
                                ref_image=ref, out_dir=tmp_path / "run1")
    v2, r2, m2 = pipeline.infer(MCFG, params, art, None, "A picture of V* circle",
                                sampler, n_frames=5, resolution=(16, 16),
                                ref_image=ref)
    assert np.array_equal(v1.frames.data, v2.frames.data)
    assert m1.outputs["video_checksum"] == m2.outputs["video_checksum"]
    assert r1.subject_similarity == r2.subject_similarity
    assert (tmp_path / "run1" / "video.stns").exists()
    assert (tmp_path / "run1" / "report.json").exists()
    assert (tmp_path / "run1" / "frames" / "frame000.ppm").exists()
    assert (tmp_path / "run1" / "manifest.json").exists()


def test_infer_motion_only_path(base, motion_sample):
    params, _ = base
    cfg = pipeline.TrainConfig(stage="motion", steps=4, seed=1, lr=1e-2,
                               rank_motion=2, mora_every=0, optimizer="adam")
    art, _ = pipeline.train_motion(cfg, MCFG, params, [motion_sample])
    sampler = flowmatch.SamplerConfig(steps=3, cfg_scale=1.0, seed=2)
    video, report, _ = pipeline.infer(MCFG, params, None, art,
                                      "A circle S* slides", sampler,
                                      n_frames=5, resolution=(16, 16),
                                      ref_video=motion_sample.video)
    assert video.n_frames == 5
    assert report.motion_fidelity is not None
    assert report.temporal_consistency is not None


def test_checkpoint_roundtrip(base, tmp_path):
    params, _ = base
    pipeline.save_checkpoint(tmp_path / "ckpt", MCFG, params)
    cfg2, params2 = pipeline.load_checkpoint(tmp_path / "ckpt")
    assert cfg2 == MCFG
    assert params2.checksum() == params.checksum()
    for name, p in params.items():
        assert p.requires_grad == params2[name].requires_grad


def test_subject_artifact_roundtrip(base, subject_sample, tmp_path):
    params, _ = base
    cfg = pipeline.TrainConfig(stage="subject", steps=5, seed=7, lr=1e-2,
                               rank_subject=2, optimizer="adam")
    art, _ = pipeline.train_subject(cfg, MCFG, params, [subject_sample])
    pipeline.save_subject_artifact(tmp_path / "subj", art)
    back = pipeline.load_subject_artifact(tmp_path / "subj")
    assert np.array_equal(back.vstar.data, art.vstar.data)
    for name, a in art.lora.adapters.items():
        assert np.array_equal(back.lora.adapters[name].b.data, a.b.data)
    for name, p in art.projector.params.items():
        assert np.array_equal(back.projector.params[name].data, p.data)


def test_motion_artifact_roundtrip(base, motion_sample, tmp_path):
    params, _ = base
    cfg = pipeline.TrainConfig(stage="motion", steps=4, seed=7, lr=1e-2,
                               rank_motion=2, mora_every=0, optimizer="adam")
    art, _ = pipeline.train_motion(cfg, MCFG, params, [motion_sample])
    pipeline.save_motion_artifact(tmp_path / "mot", art)
    back = pipeline.load_motion_artifact(tmp_path / "mot")
    assert np.array_equal(back.sstar.data, art.sstar.data)
    assert back.lora.role == "motion"


def test_manifest_serializes_and_reloads(base, tmp_path):
    _, manifest = base
    path = tmp_path / "m.json"
    manifest.save(path)
    loaded = pipeline.RunManifest.load(path)
    assert loaded.kind == "pretrain"
    assert loaded.config == manifest.config
    assert loaded.extra["losses"] == manifest.extra["losses"]


def test_windowed_mora_training_runs(base):
    # 21-frame video gives T'=6, exactly one window: windowed loss must
    # equal the dense path step for step
    params, _ = base
    sub = data.SubjectSpec(shape="circle", size=0.35, texture_seed=1)
    ms = data.fit_motion(data.MotionSpec(kind="linear", frames=21,
                                         velocity=(0.5, 0.0)), sub, 16, 16)
    sample = data.gen_motion(ms, sub, 16, 16, seed=8)
    dense_cfg = pipeline.TrainConfig(stage="motion", steps=2, seed=2, lr=1e-2,
                                     rank_motion=2, mora_every=1,
                                     mora_windowed=False, optimizer="adam")
    win_cfg = pipeline.TrainConfig(stage="motion", steps=2, seed=2, lr=1e-2,
                                   rank_motion=2, mora_every=1,
                                   mora_windowed=True, optimizer="adam")
    _, m1 = pipeline.train_motion(dense_cfg, MCFG, params, [sample])
    _, m2 = pipeline.train_motion(win_cfg, MCFG, params, [sample])
    assert m1.extra["losses"] == m2.extra["losses"]
