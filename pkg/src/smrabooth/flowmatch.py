"""Flow-matching core: linear interpolation to noise, velocity targets and
losses, algebraic one-step recovery of the clean latent, and the explicit
Euler sampler with classifier-free guidance and per-step adapter merging.

The forward process is z_t = (1-t) z0 + t z1 with target velocity z1 - z0,
so z0 = z_t - t u holds exactly whenever u equals the true velocity. The
sampler integrates dz/dt = u from t=1 (noise) down to t=0 on a uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lora as lora_mod
from . import numerics as nm
from .errors import BadMask, ShapeError
from .lora import LoraSet, ScaleSchedule, schedule_scale
from .numerics import Tensor
from .toyvae import LatentTensor


def _as_tensor(x):
    if isinstance(x, LatentTensor):
        return x.latents
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


@dataclass
class NoisePair:
    z0: Tensor
    z1: Tensor
    t: float

    def __post_init__(self):
        self.z0, self.z1 = _as_tensor(self.z0), _as_tensor(self.z1)
        _check_same_shape(self.z0, self.z1, "noise pair")
        if not 0.0 <= self.t <= 1.0:
            raise ShapeError(f"t must be in [0,1], got {self.t}")


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 5.0
    seed: int = 0
    subject_schedule: ScaleSchedule = None   # None keeps the set's own
    motion_schedule: ScaleSchedule = None

    def __post_init__(self):
        if self.steps < 1:
            raise ShapeError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ShapeError("cfg_scale must be >= 0")


def interpolate(z0, z1, t):
    """z_t = (1-t) z0 + t z1."""
    z0, z1 = _as_tensor(z0), _as_tensor(z1)
    _check_same_shape(z0, z1, "interpolate")
    if not 0.0 <= float(t) <= 1.0:
        raise ShapeError(f"t must be in [0,1], got {t}")
    return z0 * (1.0 - float(t)) + z1 * float(t)


def velocity_target(z0, z1):
    """Training target z1 - z0."""
    z0, z1 = _as_tensor(z0), _as_tensor(z1)
    _check_same_shape(z0, z1, "velocity_target")
    return z1 - z0


def velocity_loss(u, v):
    """Mean squared velocity prediction error."""
    u, v = _as_tensor(u), _as_tensor(v)
    _check_same_shape(u, v, "velocity_loss")
    d = u - v
    return (d * d).mean()


def masked_velocity_loss(u, v, mask):
    """Mean over all elements of (u*M - v*M)^2; mask is one {0,1} value per
    latent site, broadcast over channels. Masked-out sites contribute zero
    but still count in the denominator."""
    u, v = _as_tensor(u), _as_tensor(v)
    _check_same_shape(u, v, "masked_velocity_loss")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise BadMask("mask values must be 0 or 1")
    while m.ndim < u.ndim - 1:
        m = m[None, ...]
    m = Tensor(m.astype(u.dtype)[..., None])
    d = u * m - v * m
    return (d * d).mean()


def pool_mask_to_latent(mask, factor=4):
    """Max-pool a pixel mask [H,W] to the latent grid [h,w]."""
    m = np.asarray(mask, dtype=np.float32)
    h, w = m.shape[0] // factor, m.shape[1] // factor
    return m[:h * factor, :w * factor].reshape(h, factor, w, factor).max(axis=(1, 3))


def recover_z0(z_t, u, t):
    """One-step clean-latent estimate z0 = z_t - t u."""
    z_t, u = _as_tensor(z_t), _as_tensor(u)
    _check_same_shape(z_t, u, "recover_z0")
    if not 0.0 <= float(t) <= 1.0:
        raise ShapeError(f"t must be in [0,1], got {t}")
    return z_t - u * float(t)


def _with_schedule(lset: LoraSet, sched):
    if lset is None or sched is None:
        return lset
    return LoraSet(adapters=lset.adapters, role=lset.role, schedule=sched,
                   active_types=lset.active_types)


def sample(model, cond, uncond, cfg: SamplerConfig, subject: LoraSet = None,
           motion: LoraSet = None, latent_shape=None, init=None,
           trace_fn=None, dtype=np.float32):
    """Euler integration from seeded Gaussian noise at t=1 down to t=0.

    model(z, t, cond, lora_ctx) -> velocity tensor. At step k (1-indexed,
    t_k = 1 - (k-1)/steps) both adapter sets are merged with their step-k
    schedule scales, guidance combines the conditional and unconditional
    velocities, and z steps by -u/steps. cfg_scale == 1 skips the
    unconditional pass entirely (algebraically identical).

    trace_fn, when given, is called with (step, t, z, u, scales) before each
    update; sampling runs without tape.
    """
    subject = _with_schedule(subject, cfg.subject_schedule)
    motion = _with_schedule(motion, cfg.motion_schedule)
    with nm.no_grad():
        if init is not None:
            z = _as_tensor(init)
            z = Tensor(z.data.astype(dtype, copy=True))
        else:
            if latent_shape is None:
                raise ShapeError("sample needs latent_shape when init is not given")
            z = Tensor(nm.make_rng(cfg.seed, "sample.init")
                       .standard_normal(latent_shape).astype(dtype))
        dt = 1.0 / cfg.steps
        for k in range(1, cfg.steps + 1):
            t_k = 1.0 - (k - 1) / cfg.steps
            if subject is not None or motion is not None:
                ctx = lora_mod.merge(subject, motion, k)
            else:
                ctx = None
            u_c = _as_tensor(model(z, t_k, cond, ctx))
            if cfg.cfg_scale == 1.0:
                u = u_c
            else:
                u_u = _as_tensor(model(z, t_k, uncond, ctx))
                u = u_u + (u_c - u_u) * cfg.cfg_scale
            if trace_fn is not None:
                scales = {
                    "subject": (schedule_scale(subject.schedule, k)
                                if subject is not None else 0.0),
                    "motion": (schedule_scale(motion.schedule, k)
                               if motion is not None else 0.0),
                }
                trace_fn(step=k, t=t_k, z=z, u=u, scales=scales)
            z = z - u * dt
    return z
