"""Attention forcing: replace or mix the model's predicted attention
with a box-derived target at generation time.

Variants: self (no intervention), unlimited (target at every step),
limited-i (target for the first i emitted words), additive-w (convex mix
(alpha + w*target)/(1+w)), and control (the paired method's schedule
with a uniform target).
"""

import json
from dataclasses import dataclass

import numpy as np

from . import attmaps, captioner

VARIANTS = ("self", "control", "unlimited", "limited", "additive")


@dataclass(frozen=True)
class ForcingPolicy:
    variant: str
    steps: int | None = None        # i, for limited
    weight: float | None = None     # w, for additive
    target: np.ndarray | None = None  # absent for self; uniform for control
    # for control runs: which method's schedule is mirrored
    mirror: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown forcing variant {self.variant!r}")
        schedule = self.mirror if self.variant == "control" else self.variant
        if schedule == "limited" and (self.steps is None or self.steps < 1):
            raise ValueError("limited forcing requires steps >= 1")
        if schedule == "additive" and (self.weight is None or self.weight <= 0):
            raise ValueError("additive forcing requires weight > 0")
        if self.variant == "control" and self.mirror not in ("unlimited", "limited", "additive"):
            raise ValueError("control must mirror unlimited, limited, or additive")
        if self.variant != "self":
            if self.target is None:
                raise ValueError(f"{self.variant} forcing requires a target vector")
            attmaps.check_attention(self.target)

    @property
    def param(self) -> float | int | None:
        schedule = self.mirror if self.variant == "control" else self.variant
        if schedule == "limited":
            return self.steps
        if schedule == "additive":
            return self.weight
        return None

    def apply(self, t: int, alpha_model: np.ndarray) -> np.ndarray:
        """Attention actually used at step t (t starts at 1 for the first
        emitted word)."""
        if t < 1:
            raise ValueError("step index starts at 1")
        if self.variant == "self":
            return alpha_model
        schedule = self.mirror if self.variant == "control" else self.variant
        if schedule == "unlimited":
            return self.target
        if schedule == "limited":
            return self.target if t <= self.steps else alpha_model
        return (alpha_model + self.weight * self.target) / (1.0 + self.weight)

    def override(self):
        """Per-step transform for CaptionModel.generate, or None for self."""
        if self.variant == "self":
            return None
        return self.apply

    def tag(self) -> str:
        if self.param is None:
            return self.variant
        return f"{self.variant}-{self.param:g}"


def self_policy() -> ForcingPolicy:
    return ForcingPolicy("self")


def unlimited(target: np.ndarray) -> ForcingPolicy:
    return ForcingPolicy("unlimited", target=target)


def limited(target: np.ndarray, steps: int) -> ForcingPolicy:
    return ForcingPolicy("limited", steps=steps, target=target)


def additive(target: np.ndarray, weight: float) -> ForcingPolicy:
    return ForcingPolicy("additive", weight=weight, target=target)


def control_for(policy: ForcingPolicy, length: int) -> ForcingPolicy:
    """Uniform-target twin of a forced policy, mirroring its schedule."""
    if policy.variant in ("self", "control"):
        raise ValueError("control pairs only with a forcing method")
    return ForcingPolicy("control", steps=policy.steps, weight=policy.weight,
                         target=attmaps.uniform_attention(length), mirror=policy.variant)


@dataclass
class ForcedDecode:
    policy: ForcingPolicy
    record: captioner.CaptionRecord
    scene_id: int
    box_index: int | None
    category: str | None

    def to_json(self, with_alpha: bool = False) -> str:
        d = {
            "scene": self.scene_id,
            "box": self.box_index,
            "category": self.category,
            "method": self.policy.variant,
            "param": self.policy.param,
            "caption": self.record.tokens,
        }
        if self.policy.variant == "control":
            d["mirror"] = self.policy.mirror
        if with_alpha:
            d["alpha_used"] = [a.tolist() for a in self.record.attention_history]
        return json.dumps(d)


def box_policy(variant: str, box: attmaps.BoundingBox, width: int, height: int,
               grid: int, steps=None, weight=None) -> ForcingPolicy:
    target = attmaps.box_attention(box, width, height, grid)
    return ForcingPolicy(variant, steps=steps, weight=weight, target=target)


def run_box_caption(model: captioner.CaptionModel, image: np.ndarray,
                    box: attmaps.BoundingBox, policy_variant: str,
                    steps=None, weight=None, box_index=None,
                    scene_id: int = 0, max_len=None) -> ForcedDecode:
    """Build the box-derived attention target, force it per the chosen
    method, and decode."""
    h, w = image.shape[:2]
    if policy_variant == "self":
        policy = self_policy()
    else:
        policy = box_policy(policy_variant, box, w, h, model.hp.grid,
                            steps=steps, weight=weight)
    record = model.caption_image(image, override=policy.override(),
                                 max_len=max_len, policy_tag=policy.tag())
    category = " ".join(box.category) if box.category else None
    return ForcedDecode(policy=policy, record=record, scene_id=scene_id,
                        box_index=box_index, category=category)


def run_control(model: captioner.CaptionModel, image: np.ndarray,
                policy: ForcingPolicy, scene_id: int = 0, max_len=None) -> ForcedDecode:
    ctrl = control_for(policy, model.hp.grid ** 2)
    record = model.caption_image(image, override=ctrl.override(),
                                 max_len=max_len, policy_tag=ctrl.tag())
    return ForcedDecode(policy=ctrl, record=record, scene_id=scene_id,
                        box_index=None, category=None)


def sweep(model: captioner.CaptionModel, image: np.ndarray, box: attmaps.BoundingBox,
          mode: str, values, scene_id: int = 0, box_index=None) -> list[ForcedDecode]:
    """One ForcedDecode per value, in the given order. mode is 'limited'
    (values are step counts) or 'additive' (values are weights)."""
    if mode not in ("limited", "additive"):
        raise ValueError(f"sweep mode must be limited or additive, got {mode!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep values must be non-empty")
    out = []
    for v in values:
        if mode == "limited":
            if int(v) != v or v < 1:
                raise ValueError(f"invalid limited step count {v!r}")
            fd = run_box_caption(model, image, box, "limited", steps=int(v),
                                 box_index=box_index, scene_id=scene_id)
        else:
            if v <= 0:
                raise ValueError(f"invalid additive weight {v!r}")
            fd = run_box_caption(model, image, box, "additive", weight=float(v),
                                 box_index=box_index, scene_id=scene_id)
        out.append(fd)
    return out
