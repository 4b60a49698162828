"""Seeded DDIM sampling of a layout spec."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..adapter import SubjectCondition, load_conditions
from ..attention import AttentionTrace, build_plan
from ..errors import NumericError
from ..tensorio import LayoutSpec
from .model import ToyDenoiser, denoiser_forward
from .schedule import Schedule, ddim_step, timesteps


@dataclass
class GenerationResult:
    z0: np.ndarray
    timesteps: list[int]
    model_evaluations: int
    trace: AttentionTrace | None = None
    extras: dict = field(default_factory=dict)

    @property
    def image(self) -> np.ndarray:
        # identity codec: the latent is the image
        return self.z0


def sample(spec: LayoutSpec, model: ToyDenoiser, schedule: Schedule,
           conditions: list[SubjectCondition] | None = None, trace: bool = False) -> GenerationResult:
    """Denoise seeded Gaussian noise into an image under ``spec``'s layout.

    With ``spec.guidance > 0`` each step also runs an unconditional pass (zero
    prompt, no image stream) and extrapolates; the layout mechanism only acts
    on the conditional pass.
    """
    H, W, C = spec.grid
    if C != model.channels:
        raise ValueError(f"spec grid has {C} channels, model expects {model.channels}")
    if schedule.T != model.T:
        raise ValueError(f"schedule has T={schedule.T}, model time table has {model.T} rows")
    steps = timesteps(schedule.T, spec.steps)
    if conditions is None:
        conditions = load_conditions(spec, weights=model.adapter)
    plan = build_plan(spec.mode, conditions, (H, W), model.config.zero_init_exterior)
    tracer = AttentionTrace((H, W)) if trace else None
    c_t = spec.prompt_embedding
    null_prompt = np.zeros_like(c_t)

    z = np.random.default_rng(spec.seed).standard_normal((H, W, C))
    evaluations = 0
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        if tracer is not None:
            tracer.step = t
        eps = denoiser_forward(z, t, c_t, conditions, spec.mode, model, image_scale=spec.image_scale,
                               plan=plan, trace=tracer)
        evaluations += 1
        if spec.guidance > 0:
            eps_u = denoiser_forward(z, t, null_prompt, [], "text-only", model)
            evaluations += 1
            eps = eps_u + spec.guidance * (eps - eps_u)
        z = ddim_step(z, eps, t, t_prev, schedule)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"latent became non-finite at step {i} (t={t})")
    return GenerationResult(z, steps, evaluations, tracer)
