"""Command-line front end. All numerics flow through JSON configs (presets
plus overrides) so every run's manifest captures them completely; flags are
reserved for paths and verbosity. SMRA_SEED overrides the top-level seed.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import data as datamod
from . import dit, evaluation, flowmatch, lora, mora, pipeline, selftest, sura
from .errors import BadConfig, RuntimeFailure, SmraError, ValidationFailure
from .numerics import Tensor, read_stns, write_stns
from .toyvae import VideoTensor

DESK_PRESET = {
    "seed": 0,
    "model": {"d_model": 64, "n_blocks": 4, "n_heads": 4, "d_ffn": 256,
              "d_lat": 192, "max_text_tokens": 8, "n_text_buckets": 256,
              "lora_cross_attn": False, "tap_post_residual": True},
    "sampler": {"steps": 50, "cfg_scale": 2.0,
                "subject_schedule": {"t_point": 15, "s_low": 0.5, "s_high": 1.0},
                "motion_schedule": None},
    "flow": {"alpha": 10.0, "iters": 20,
             "grayscale": [0.299, 0.587, 0.114], "luma_scale": 255.0},
    "data": {"height": 32, "width": 32, "frames": 17,
             "n_subjects": 8, "n_motions": 6},
    "custom": {
        "subject": {"shape": "circle", "fill_color": [0.1, 0.75, 0.8],
                    "texture_seed": 77, "size": 0.5},
        "motion": {"kind": "linear", "velocity": [1.0, 0.0],
                   "radius": 5.0, "angular_rate": 0.35},
        "image_seed": 10,
        "video_seed": 11,
        "encoder_seed": 0,
    },
    "pretrain": {"steps": 2000, "lr": 0.01, "batch": 1, "cond_dropout": 0.1,
                 "optimizer": "adam"},
    "subject": {"steps": 300, "lr": 0.003, "rank": 8, "lam": 0.05,
                "optimizer": "adam", "train_special_tokens": True},
    "motion": {"steps": 400, "lr": 0.003, "rank": 16, "alpha_w": 1.0,
               "mora_every": 2, "mora_windowed": False, "optimizer": "adam",
               "train_special_tokens": True},
    "sweep": {"train_steps": 300, "sampler_steps": 12, "metric": "subject"},
    "probe": {"sampler_steps": 50},
    "ablate": {"subject_steps": 150, "motion_steps": 150, "sampler_steps": 12},
}

PAPER_PRESET = copy.deepcopy(DESK_PRESET)
PAPER_PRESET["sampler"]["cfg_scale"] = 5.0
PAPER_PRESET["subject"].update({"rank": 32, "lr": 1e-4})
PAPER_PRESET["motion"].update({"rank": 64, "lr": 1e-4, "mora_every": 1})
PAPER_PRESET["pretrain"].update({"lr": 1e-4})

PRESETS = {"desk": DESK_PRESET, "paper-scale": PAPER_PRESET}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise BadConfig(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path=None):
    """Resolve preset plus overrides into a full config document."""
    doc = {}
    if path:
        with open(path) as f:
            doc = json.load(f)
    preset_name = doc.pop("preset", "desk")
    if preset_name not in PRESETS:
        raise BadConfig(f"unknown preset {preset_name!r}")
    cfg = _merge(PRESETS[preset_name], doc)
    cfg["preset"] = preset_name
    env_seed = os.environ.get("SMRA_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def serialize_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


def _model_cfg(cfg):
    return dit.ModelConfig(**cfg["model"])


def _sched(doc):
    return None if doc is None else lora.ScaleSchedule(**doc)


def _sampler_cfg(cfg, steps=None):
    s = cfg["sampler"]
    return flowmatch.SamplerConfig(
        steps=steps or s["steps"], cfg_scale=s["cfg_scale"], seed=cfg["seed"],
        subject_schedule=_sched(s["subject_schedule"]),
        motion_schedule=_sched(s["motion_schedule"]))


def _flow_cfg(cfg):
    f = cfg["flow"]
    return mora.FlowConfig(alpha=f["alpha"], iters=f["iters"],
                           grayscale=tuple(f["grayscale"]),
                           luma_scale=f["luma_scale"])


def _train_cfg(cfg, stage):
    s = cfg[stage]
    kw = {"stage": stage, "seed": cfg["seed"], "lr": s["lr"],
          "steps": s["steps"], "optimizer": s["optimizer"]}
    if stage == "pretrain":
        kw.update(batch=s["batch"], cond_dropout=s["cond_dropout"])
    if stage == "subject":
        kw.update(lam=s["lam"], rank_subject=s["rank"],
                  train_special_tokens=s["train_special_tokens"])
    if stage == "motion":
        kw.update(alpha_w=s["alpha_w"], rank_motion=s["rank"],
                  mora_every=s["mora_every"], mora_windowed=s["mora_windowed"],
                  train_special_tokens=s["train_special_tokens"])
    return pipeline.TrainConfig(**kw)


def _corpus_recipe(cfg):
    return {"data": cfg["data"], "seed": cfg["seed"]}


def _build_corpus(cfg):
    d = cfg["data"]
    return datamod.build_pretrain_corpus(
        H=d["height"], W=d["width"], frames=d["frames"],
        n_subjects=d["n_subjects"], n_motions=d["n_motions"], seed=cfg["seed"])


def _custom_samples(cfg):
    d, c = cfg["data"], cfg["custom"]
    sub = datamod.SubjectSpec(shape=c["subject"]["shape"],
                              fill_color=tuple(c["subject"]["fill_color"]),
                              texture_seed=c["subject"]["texture_seed"],
                              size=c["subject"]["size"])
    mot = datamod.MotionSpec(kind=c["motion"]["kind"], frames=d["frames"],
                             velocity=tuple(c["motion"]["velocity"]),
                             radius=c["motion"]["radius"],
                             angular_rate=c["motion"]["angular_rate"])
    mot = datamod.fit_motion(mot, sub, d["height"], d["width"])
    image = datamod.gen_subject(sub, d["height"], d["width"], c["image_seed"])
    video = datamod.gen_motion(mot, sub, d["height"], d["width"], c["video_seed"])
    return image, video


def _write_manifest(out_dir, manifest, cfg):
    manifest.extra["cli_config"] = cfg
    manifest.save(os.path.join(out_dir, "manifest.json"))


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    corpus = _build_corpus(cfg)
    for i, sample in enumerate(corpus):
        datamod.save_sample(args.out, f"sample{i:03d}", sample)
    image, video = _custom_samples(cfg)
    datamod.save_sample(args.out, "custom_subject", image)
    datamod.save_sample(args.out, "custom_motion", video)
    manifest = {"recipe": _corpus_recipe(cfg),
                "digest": datamod.corpus_digest(corpus),
                "n_samples": len(corpus)}
    with open(os.path.join(args.out, "corpus.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {len(corpus)} corpus samples + customization pair to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    corpus = _build_corpus(cfg)
    params, manifest = pipeline.pretrain(
        _train_cfg(cfg, "pretrain"), corpus, _model_cfg(cfg),
        corpus_recipe=_corpus_recipe(cfg))
    pipeline.save_checkpoint(args.out, _model_cfg(cfg), params)
    _write_manifest(args.out, manifest, cfg)
    print(f"checkpoint {params.checksum()[:12]} -> {args.out} "
          f"(final loss {manifest.extra['losses'][-1]})")
    return 0


def cmd_train_subject(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    image, _ = _custom_samples(cfg)
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    artifact, manifest = pipeline.train_subject(
        _train_cfg(cfg, "subject"), model_cfg, params, [image], enc=enc,
        corpus_recipe=_corpus_recipe(cfg))
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_subject_artifact(args.out, artifact)
    _write_manifest(args.out, manifest, cfg)
    print(f"subject adapters ({len(artifact.lora.adapters)} layers) -> {args.out}")
    return 0


def cmd_train_motion(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    _, video = _custom_samples(cfg)
    artifact, manifest = pipeline.train_motion(
        _train_cfg(cfg, "motion"), model_cfg, params, [video],
        flow_cfg=_flow_cfg(cfg), corpus_recipe=_corpus_recipe(cfg))
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_motion_artifact(args.out, artifact)
    _write_manifest(args.out, manifest, cfg)
    print(f"motion adapters ({len(artifact.lora.adapters)} layers) -> {args.out}")
    return 0


def cmd_infer(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    subject = pipeline.load_subject_artifact(args.subject) if args.subject else None
    motion = pipeline.load_motion_artifact(args.motion) if args.motion else None
    image, video = _custom_samples(cfg)
    prompt = args.prompt or _default_prompt(cfg, subject, motion)
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    _, report, manifest = pipeline.infer(
        model_cfg, params, subject, motion, prompt, _sampler_cfg(cfg),
        n_frames=cfg["data"]["frames"],
        resolution=(cfg["data"]["height"], cfg["data"]["width"]),
        ref_image=VideoTensor(Tensor(image.video.frames.data[:1])),
        ref_video=video.video, enc=enc, flow_cfg=_flow_cfg(cfg),
        out_dir=args.out)
    manifest.extra["cli_config"] = cfg
    manifest.save(os.path.join(args.out, "manifest.json"))
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def _default_prompt(cfg, subject, motion):
    c = cfg["custom"]
    shape = c["subject"]["shape"]
    motion_name = datamod.MOTION_NAMES[c["motion"]["kind"]]
    if subject is not None and motion is not None:
        return f"A picture of V* {shape} S* {motion_name}"
    if motion is not None:
        return f"A {shape} S* {motion_name}"
    return f"A picture of V* {shape}"


def cmd_eval(args):
    cfg = load_config(args.config)
    frames = read_stns(args.video)
    gen = VideoTensor(Tensor(frames))
    image, video = _custom_samples(cfg)
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    report = evaluation.MetricReport(
        subject_similarity=evaluation.subject_similarity(
            gen, VideoTensor(Tensor(image.video.frames.data[:1])), enc),
        temporal_consistency=(evaluation.temporal_consistency(gen, enc)
                              if gen.n_frames >= 2 else None),
    )
    if gen.n_frames == video.video.n_frames:
        report.motion_fidelity = evaluation.motion_fidelity(
            gen, video.video, _flow_cfg(cfg))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def cmd_sweep_layers(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    image, video = _custom_samples(cfg)
    metric = args.metric or cfg["sweep"]["metric"]
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    # sweep baseline trains one adapter set across all six layer types
    all_types = evaluation.SWEEP_TYPES
    if metric == "motion":
        tcfg = _train_cfg(cfg, "motion")
        tcfg.steps = cfg["sweep"]["train_steps"]
        artifact, _ = pipeline.train_motion(tcfg, model_cfg, params, [video],
                                            layer_types=all_types,
                                            flow_cfg=_flow_cfg(cfg))
        trained, overrides = artifact.lora, artifact.token_overrides()
        eval_set = [video]
    else:
        tcfg = _train_cfg(cfg, "subject")
        tcfg.steps = cfg["sweep"]["train_steps"]
        artifact, _ = pipeline.train_subject(tcfg, model_cfg, params, [image],
                                             layer_types=all_types, enc=enc)
        trained, overrides = artifact.lora, artifact.token_overrides()
        eval_set = [image]
    table = evaluation.layer_sweep(
        model_cfg, params, trained, eval_set, metric,
        _sampler_cfg(cfg, steps=cfg["sweep"]["sampler_steps"]),
        enc=enc, flow_cfg=_flow_cfg(cfg), token_overrides=overrides)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.json"), "w") as f:
        json.dump(table.as_dict(), f, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "sweep.csv"), "w") as f:
        f.write(table.to_csv())
    print(json.dumps(table.normalized, indent=2, sort_keys=True))
    return 0


def cmd_probe_timing(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    subject = pipeline.load_subject_artifact(args.subject)
    motion = pipeline.load_motion_artifact(args.motion) if args.motion else None
    image, _ = _custom_samples(cfg)
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    overrides = dict(subject.token_overrides())
    if motion is not None:
        overrides.update(motion.token_overrides())
    prompt = _default_prompt(cfg, subject, motion)
    cond = dit.embed_text(prompt, params.rng_seed, model_cfg)
    uncond = dit.embed_text("", params.rng_seed, model_cfg)
    curve = evaluation.timing_probe(
        model_cfg, params, subject.lora, motion.lora if motion else None,
        cond, uncond, _sampler_cfg(cfg, steps=cfg["probe"]["sampler_steps"]),
        VideoTensor(Tensor(image.video.frames.data[:1])), enc=enc,
        token_overrides=overrides)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "probe.jsonl"), "w") as f:
        for row in curve:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    stat = evaluation.spearman_trend(curve, last_n=min(25, len(curve)))
    with open(os.path.join(args.out, "probe.json"), "w") as f:
        json.dump({"spearman_last25": stat, "steps": len(curve)},
                  f, indent=2, sort_keys=True)
    print(f"probe: {len(curve)} steps, Spearman(last 25) = {stat:+.3f}")
    return 0


def cmd_ablate_combos(args):
    cfg = load_config(args.config)
    model_cfg, params = pipeline.load_checkpoint(args.checkpoint)
    image, video = _custom_samples(cfg)
    enc = sura.PatchEncoder(seed=cfg["custom"]["encoder_seed"])
    tcfg = _train_cfg(cfg, "subject")
    tcfg.steps = cfg["ablate"]["subject_steps"]
    # the shared config drives both stages; motion keeps its own step count
    tcfg_m = _train_cfg(cfg, "motion")
    tcfg_m.steps = cfg["ablate"]["motion_steps"]
    results = {}
    for name, combo in evaluation.DEFAULT_COMBOS.items():
        subj_art, _ = pipeline.train_subject(
            tcfg, model_cfg, params, [image],
            layer_types=tuple(combo["subject"]), enc=enc)
        mot_art, _ = pipeline.train_motion(
            tcfg_m, model_cfg, params, [video],
            layer_types=tuple(combo["motion"]), flow_cfg=_flow_cfg(cfg))
        prompt = _default_prompt(cfg, subj_art, mot_art)
        _, report, _ = pipeline.infer(
            model_cfg, params, subj_art, mot_art, prompt,
            _sampler_cfg(cfg, steps=cfg["ablate"]["sampler_steps"]),
            n_frames=video.video.n_frames,
            resolution=video.video.resolution,
            ref_image=VideoTensor(Tensor(image.video.frames.data[:1])),
            ref_video=video.video, enc=enc, flow_cfg=_flow_cfg(cfg))
        results[name] = report.as_dict()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "combos.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    for name, rep in results.items():
        print(f"{name}: subject={rep['subject_similarity']:.4f} "
              f"motion={rep['motion_fidelity']:.4f} "
              f"temporal={rep['temporal_consistency']:.4f}")
    return 0


def cmd_selftest(args):
    ok = selftest.run(fast=args.fast)
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="smrabooth",
                                description="subject/motion customization "
                                            "testbed for flow-matching video "
                                            "diffusion")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        sp = sub.add_parser(name)
        for flag, (required, default, help_) in flags.items():
            sp.add_argument(flag, required=required, default=default, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data,
        **{"--config": (False, None, "JSON config"),
           "--out": (True, None, "output directory")})
    add("pretrain", cmd_pretrain,
        **{"--config": (False, None, "JSON config"),
           "--out": (True, None, "checkpoint output directory")})
    add("train-subject", cmd_train_subject,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--out": (True, None, "artifact output directory")})
    add("train-motion", cmd_train_motion,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--out": (True, None, "artifact output directory")})
    add("infer", cmd_infer,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--subject": (False, None, "subject artifact directory"),
           "--motion": (False, None, "motion artifact directory"),
           "--prompt": (False, None, "override prompt"),
           "--out": (True, None, "output directory")})
    add("eval", cmd_eval,
        **{"--config": (False, None, "JSON config"),
           "--video": (True, None, "video .stns to score"),
           "--out": (True, None, "output directory")})
    add("sweep-layers", cmd_sweep_layers,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--metric": (False, None, "subject | motion | temporal"),
           "--out": (True, None, "output directory")})
    add("probe-timing", cmd_probe_timing,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--subject": (True, None, "subject artifact directory"),
           "--motion": (False, None, "motion artifact directory"),
           "--out": (True, None, "output directory")})
    add("ablate-combos", cmd_ablate_combos,
        **{"--config": (False, None, "JSON config"),
           "--checkpoint": (True, None, "base checkpoint directory"),
           "--out": (True, None, "output directory")})
    sp = sub.add_parser("selftest")
    sp.add_argument("--fast", action="store_true",
                    help="skip the slower gradient groups")
    sp.set_defaults(fn=cmd_selftest)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ValidationFailure, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeFailure, SmraError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
