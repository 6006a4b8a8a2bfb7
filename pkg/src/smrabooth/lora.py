"""Low-rank adapters: named-layer targeting, the step-indexed scale schedule,
inference-time merging, and the zero-all-but-one sweep view.

Subject adapters target {q, k, ffn.0} in every block, motion adapters
{v, o, ffn.0, ffn.2}; ffn.0 is deliberately shared. Scale schedules apply at
inference only; training always runs at scale 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dit import ModelConfig, TARGETABLE_TYPES, named_layers
from .errors import BadLayerType, BadRole, IncompatibleSets
from .numerics import ParamStore, Tensor, make_rng, read_stns, write_stns

SUBJECT_TYPES = ("q", "k", "ffn.0")
MOTION_TYPES = ("v", "o", "ffn.0", "ffn.2")
ROLE_TYPES = {"subject": SUBJECT_TYPES, "motion": MOTION_TYPES}

# paper-scale adapter ranks; desk presets shrink these to 8/16
PAPER_RANK_SUBJECT = 32
PAPER_RANK_MOTION = 64


@dataclass
class ScaleSchedule:
    """Step-indexed two-level scale: s_low strictly before t_point, s_high
    from t_point on (the boundary step is already "after")."""

    t_point: int = 15
    s_low: float = 0.5
    s_high: float = 1.0

    def __post_init__(self):
        if self.s_low < 0 or self.s_high < 0 or self.t_point < 0:
            raise BadRole("schedule values must be nonnegative")

    @classmethod
    def constant(cls, scale=1.0):
        return cls(t_point=0, s_low=scale, s_high=scale)


def schedule_scale(sched: ScaleSchedule, step: int) -> float:
    if step < 1:
        raise BadRole(f"sampler steps are 1-indexed, got {step}")
    return sched.s_low if step < sched.t_point else sched.s_high


@dataclass
class LoraAdapter:
    layer_name: str
    layer_type: str
    a: Tensor                   # [r, D_in]
    b: Tensor                   # [D_out, r]

    @property
    def rank(self):
        return self.a.shape[0]


@dataclass
class LoraSet:
    adapters: dict              # layer_name -> LoraAdapter
    role: str
    schedule: ScaleSchedule
    # sweep views restrict which layer types contribute; None means all
    active_types: frozenset = None

    def layer_names(self):
        return sorted(self.adapters)

    def type_active(self, layer_type):
        return self.active_types is None or layer_type in self.active_types

    def trainable_params(self, store: ParamStore = None):
        """Expose adapter factors in a ParamStore (shared tensors)."""
        store = store or ParamStore()
        for name in self.layer_names():
            ad = self.adapters[name]
            store.add(f"lora.{self.role}.{name}.A", ad.a)
            store.add(f"lora.{self.role}.{name}.B", ad.b)
        return store


def attach(role, cfg: ModelConfig, rank, seed, layer_types=None) -> LoraSet:
    """Fresh adapter set for a role. B starts at zero so attachment is a
    no-op until training moves it; A is a seeded N(0, 0.02^2) Gaussian.

    layer_types overrides the role's default targets (used by the layer
    ablations and the full-layer sweep baseline).
    """
    if role not in ROLE_TYPES:
        raise BadRole(f"unknown role {role!r}, expected subject|motion")
    if rank < 1:
        raise BadRole(f"rank must be >= 1, got {rank}")
    types = tuple(layer_types) if layer_types is not None else ROLE_TYPES[role]
    for t in types:
        if t not in TARGETABLE_TYPES:
            raise BadLayerType(f"unknown layer type {t!r}")
    adapters = {}
    for info in named_layers(cfg):
        if not info.targetable or info.layer_type not in types:
            continue
        a = make_rng(seed, "lora", role, info.name, "A").normal(
            0.0, 0.02, (rank, info.d_in)).astype(np.float32)
        b = np.zeros((info.d_out, rank), dtype=np.float32)
        adapters[info.name] = LoraAdapter(info.name, info.layer_type,
                                          Tensor(a), Tensor(b))
    schedule = (ScaleSchedule() if role == "subject"
                else ScaleSchedule.constant(1.0))
    return LoraSet(adapters=adapters, role=role, schedule=schedule)


def effective_delta(adapter: LoraAdapter, scale) -> Tensor:
    """Materialized weight delta scale * B @ A, rank <= r by construction."""
    return Tensor(float(scale) * (adapter.b.data @ adapter.a.data))


class LoraContext:
    """Per-layer adapter applications consumed by the model forward pass."""

    def __init__(self):
        self._by_layer = {}

    def add(self, layer_name, adapter: LoraAdapter, scale):
        self._by_layer.setdefault(layer_name, []).append(
            (adapter.a, adapter.b, float(scale)))

    def entries(self, layer_name):
        return self._by_layer.get(layer_name, ())

    def layer_names(self):
        return sorted(self._by_layer)

    def total_delta(self, layer_name):
        """Summed materialized delta for one layer (test oracle support)."""
        total = None
        for a, b, scale in self.entries(layer_name):
            d = scale * (b.data @ a.data)
            total = d if total is None else total + d
        return total


def _check_compatible(subject: LoraSet, motion: LoraSet):
    for name in set(subject.adapters) & set(motion.adapters):
        sa, ma = subject.adapters[name], motion.adapters[name]
        if (sa.a.shape[1] != ma.a.shape[1]) or (sa.b.shape[0] != ma.b.shape[0]):
            raise IncompatibleSets(
                f"{name}: {sa.b.shape[0]}x{sa.a.shape[1]} vs "
                f"{ma.b.shape[0]}x{ma.a.shape[1]}")


def merge(subject: LoraSet, motion: LoraSet, step: int) -> LoraContext:
    """Combine both sets at one sampler step. Shared layers (ffn.0) receive
    the sum of the two scheduled deltas; order does not matter."""
    if subject is not None and motion is not None:
        _check_compatible(subject, motion)
    ctx = LoraContext()
    for lset in (subject, motion):
        if lset is None:
            continue
        s = schedule_scale(lset.schedule, step)
        for name in lset.layer_names():
            ad = lset.adapters[name]
            ctx.add(name, ad, s if lset.type_active(ad.layer_type) else 0.0)
    return ctx


def training_context(lset: LoraSet) -> LoraContext:
    """Scale-1 context: schedules affect inference only."""
    ctx = LoraContext()
    for name in lset.layer_names():
        ctx.add(name, lset.adapters[name], 1.0)
    return ctx


def sweep_mask(lset: LoraSet, keep_layer_type) -> LoraSet:
    """View of a set with every other layer type silenced (scale 0).
    Underlying factors are shared, not copied."""
    if keep_layer_type not in TARGETABLE_TYPES:
        raise BadLayerType(f"unknown layer type {keep_layer_type!r}")
    return LoraSet(adapters=lset.adapters, role=lset.role,
                   schedule=lset.schedule,
                   active_types=frozenset((keep_layer_type,)))


# -- persistence ----------------------------------------------------------------

def save_lora(dirpath, lset: LoraSet):
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "role": lset.role,
        "schedule": {"t_point": lset.schedule.t_point,
                     "s_low": lset.schedule.s_low,
                     "s_high": lset.schedule.s_high},
        "layers": {},
    }
    for i, name in enumerate(lset.layer_names()):
        ad = lset.adapters[name]
        fa, fb = f"adapter{i:03d}_A.stns", f"adapter{i:03d}_B.stns"
        write_stns(os.path.join(dirpath, fa), ad.a.data)
        write_stns(os.path.join(dirpath, fb), ad.b.data)
        manifest["layers"][name] = {"type": ad.layer_type, "rank": ad.rank,
                                    "A": fa, "B": fb}
    with open(os.path.join(dirpath, "lora.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_lora(dirpath) -> LoraSet:
    with open(os.path.join(dirpath, "lora.json")) as f:
        manifest = json.load(f)
    sched = ScaleSchedule(**manifest["schedule"])
    adapters = {}
    for name, entry in manifest["layers"].items():
        a = read_stns(os.path.join(dirpath, entry["A"]))
        b = read_stns(os.path.join(dirpath, entry["B"]))
        adapters[name] = LoraAdapter(name, entry["type"], Tensor(a), Tensor(b))
    return LoraSet(adapters=adapters, role=manifest["role"], schedule=sched)
