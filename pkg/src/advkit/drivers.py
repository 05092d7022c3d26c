"""End-to-end spatial-domain attack procedures.

Four drivers: momentum TI/DI attack with minimum-radius search, a
perceptual-loss ensemble attack, gradient-refining DTI, and a
rotation-augmented ensemble attack. All of them keep the adversarial batch
inside the L-inf ball and [0, 1] at every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from advkit.data import AttackConfig, ImageBatch
from advkit.primitives import (
    MomentumState,
    derive_seed,
    di_transform,
    make_ti_kernel,
    momentum_update,
    project_linf,
    refined_gradient,
    rotation_transform,
    sobel_edge_mask,
    ti_smooth,
    variance_reduced_gradient,
)
from advkit.scoring import lpips_from_taps
from advkit.zoo import EnsembleSpec, ensemble_logits_pixels


@dataclass(frozen=True)
class AttackResult:
    """Outcome of a per-image minimum-radius search."""

    adversarial: ImageBatch
    chosen_epsilon: tuple[float, ...]
    succeeded_on_validation: tuple[bool, ...]
    iterations_used: tuple[int, ...]


def _require_differentiable(ensemble: EnsembleSpec) -> None:
    for member in ensemble.members:
        if not member.supports_gradients:
            raise ValueError(f"ensemble member {member.id} does not support gradients")


def ce_gradient(ensemble: EnsembleSpec, labels: torch.Tensor):
    """Closure computing the cross-entropy input gradient on fused logits."""

    def grad_fn(b: ImageBatch) -> torch.Tensor:
        x = b.pixels.clone().requires_grad_(True)
        logits = ensemble_logits_pixels(ensemble, x)
        loss = F.cross_entropy(logits, labels, reduction="sum")
        (g,) = torch.autograd.grad(loss, x)
        return g

    return grad_fn


def ensemble_true_class_probability(ensemble: EnsembleSpec, batch: ImageBatch,
                                    labels: torch.Tensor | None = None) -> torch.Tensor:
    if labels is None:
        labels = batch.labels
    with torch.no_grad():
        probs = F.softmax(ensemble_logits_pixels(ensemble, batch.pixels), dim=1)
    return probs[torch.arange(len(batch)), labels]


def _step_sizes(cfg: AttackConfig) -> list[float]:
    if cfg.step_schedule is not None:
        steps = []
        for size, rounds in cfg.step_schedule:
            steps.extend([float(size)] * int(rounds))
        return steps
    return [float(cfg.step_size)] * int(cfg.iterations)


def tdmi_attack(batch: ImageBatch, train_ensemble: EnsembleSpec, cfg: AttackConfig) -> ImageBatch:
    """Momentum-iterative attack over TI-smoothed gradients of diverse inputs."""
    _require_differentiable(train_ensemble)
    kernel = make_ti_kernel(cfg.ti_kernel_size)
    grad_fn = ce_gradient(train_ensemble, batch.labels)
    x0 = batch.pixels
    x = x0.clone()
    state = MomentumState.zeros(x.shape)
    for t, alpha in enumerate(_step_sizes(cfg)):
        current = batch.with_pixels(x)
        transformed = di_transform(current, cfg.di_probability, derive_seed(cfg.seed, "tdmi", t))
        g = ti_smooth(kernel, grad_fn(transformed))
        state = momentum_update(state, g, cfg.momentum_decay)
        x = project_linf(x + alpha * state.m.sign(), x0, cfg.epsilon)
    return batch.with_pixels(x)


def bim_attack(batch: ImageBatch, ensemble: EnsembleSpec, cfg: AttackConfig) -> ImageBatch:
    """Basic iterative method: tdmi without momentum, diversity, or smoothing."""
    plain = replace(cfg, momentum_decay=0.0, di_probability=0.0, ti_kernel_size=1)
    return tdmi_attack(batch, ensemble, plain)


def pgd_attack(batch: ImageBatch, ensemble: EnsembleSpec, epsilon: float,
               step_size: float, iterations: int, random_start: bool = False,
               seed: int = 0) -> ImageBatch:
    """Plain L-inf projected gradient ascent baseline."""
    _require_differentiable(ensemble)
    grad_fn = ce_gradient(ensemble, batch.labels)
    x0 = batch.pixels
    x = x0.clone()
    if random_start:
        gen = torch.Generator().manual_seed(derive_seed(seed, "pgd-init"))
        x = project_linf(x + (torch.rand(x.shape, generator=gen) * 2 - 1) * epsilon, x0, epsilon)
    for _ in range(iterations):
        g = grad_fn(batch.with_pixels(x))
        x = project_linf(x + step_size * g.sign(), x0, epsilon)
    return batch.with_pixels(x)


def epsilon_search_attack(batch: ImageBatch, train_ensemble: EnsembleSpec,
                          validation_ensemble: EnsembleSpec, cfg: AttackConfig) -> AttackResult:
    """Per image, the smallest radius in the set whose attack drops the
    validation true-class probability below the threshold.

    Every radius runs on the full batch (already-qualified images keep their
    earlier result), so per-image outcomes never depend on which other images
    are still unresolved. The step size scales as eps / iterations.
    """
    if not cfg.epsilon_set:
        raise ValueError("epsilon_set must be nonempty")
    if not 0.0 <= cfg.validation_threshold < 1.0:
        raise ValueError("validation_threshold must be in [0, 1)")
    b = len(batch)
    resolved = torch.zeros(b, dtype=torch.bool)
    chosen = [cfg.epsilon_set[-1]] * b
    succeeded = [False] * b
    used = [len(cfg.epsilon_set) * cfg.iterations] * b
    result = batch.pixels.clone()

    for k, eps in enumerate(cfg.epsilon_set):
        run_cfg = replace(cfg, epsilon=eps, step_size=eps / cfg.iterations)
        adv = tdmi_attack(batch, train_ensemble, run_cfg)
        probs = ensemble_true_class_probability(validation_ensemble, adv)
        qualifies = probs < cfg.validation_threshold
        newly = qualifies & ~resolved
        for i in torch.nonzero(newly).flatten().tolist():
            chosen[i] = eps
            succeeded[i] = True
            used[i] = (k + 1) * cfg.iterations
            result[i] = adv.pixels[i]
        resolved |= newly
        if k == len(cfg.epsilon_set) - 1:
            for i in torch.nonzero(~resolved).flatten().tolist():
                result[i] = adv.pixels[i]
        if bool(resolved.all()):
            break

    adversarial = batch.with_pixels(result)
    gap = (adversarial.pixels - batch.pixels).abs().amax(dim=(1, 2, 3))
    for i in range(b):
        if float(gap[i]) > chosen[i] + 1e-6:
            raise AssertionError("search result violates its chosen radius")
    return AttackResult(
        adversarial=adversarial,
        chosen_epsilon=tuple(chosen),
        succeeded_on_validation=tuple(succeeded),
        iterations_used=tuple(used),
    )


def perceptual_attack(batch: ImageBatch, ensemble: EnsembleSpec,
                      lpips_extractor, cfg: AttackConfig) -> ImageBatch:
    """Momentum attack maximizing cross-entropy while penalizing perceptual
    and mean-square distance to the original.

    The momentum accumulator is smoothed at step time; the signed step is
    attenuated on strong edges of the original image before application.
    """
    _require_differentiable(ensemble)
    kernel = make_ti_kernel(cfg.ti_kernel_size)
    mask = sobel_edge_mask(batch, cfg.sobel_beta) if cfg.sobel_beta > 0 else None
    x0 = batch.pixels
    with torch.no_grad():
        clean_taps = [t.detach() for t in lpips_extractor.forward_features_pixels(x0)]

    def loss_grad(b: ImageBatch) -> torch.Tensor:
        x = b.pixels.clone().requires_grad_(True)
        logits = ensemble_logits_pixels(ensemble, x)
        objective = F.cross_entropy(logits, batch.labels, reduction="sum")
        if cfg.lpips_weight > 0:
            taps = lpips_extractor.forward_features_pixels(x)
            objective = objective - cfg.lpips_weight * lpips_from_taps(taps, clean_taps).sum()
        if cfg.mse_weight > 0:
            mse = ((x - x0) ** 2).mean(dim=(1, 2, 3)).sum()
            objective = objective - cfg.mse_weight * mse
        (g,) = torch.autograd.grad(objective, x)
        return g

    x = x0.clone()
    state = MomentumState.zeros(x.shape)
    for t, alpha in enumerate(_step_sizes(cfg)):
        current = batch.with_pixels(x)
        if cfg.vr_samples > 1:
            radius = cfg.vr_radius if cfg.vr_radius is not None else 1.5 * alpha
            g = variance_reduced_gradient(loss_grad, current, cfg.vr_samples, radius,
                                          derive_seed(cfg.seed, "perc-vr", t))
        else:
            g = loss_grad(current)
        state = momentum_update(state, g, cfg.momentum_decay)
        step = alpha * ti_smooth(kernel, state.m).sign()
        if mask is not None:
            step = step * mask
        x = project_linf(x + step, x0, cfg.epsilon)
    return batch.with_pixels(x)


def rdti_attack(batch: ImageBatch, ensemble: EnsembleSpec, cfg: AttackConfig) -> ImageBatch:
    """Signed steps along gradients averaged over several diverse-input draws;
    no momentum term."""
    _require_differentiable(ensemble)
    kernel = make_ti_kernel(cfg.ti_kernel_size)
    grad_fn = ce_gradient(ensemble, batch.labels)
    x0 = batch.pixels
    x = x0.clone()
    for t, alpha in enumerate(_step_sizes(cfg)):
        current = batch.with_pixels(x)
        g = refined_gradient(grad_fn, current, cfg.refine_count, cfg.di_probability,
                             kernel, derive_seed(cfg.seed, "rdti", t))
        x = project_linf(x + alpha * g.sign(), x0, cfg.epsilon)
    return batch.with_pixels(x)


def rotation_ensemble_attack(batch: ImageBatch, ensemble: EnsembleSpec, cfg: AttackConfig) -> ImageBatch:
    """Momentum TI attack whose per-iteration transform adds random rotation
    to the resize/pad diversity; transform probability follows the config."""
    _require_differentiable(ensemble)
    kernel = make_ti_kernel(cfg.ti_kernel_size)
    grad_fn = ce_gradient(ensemble, batch.labels)
    x0 = batch.pixels
    x = x0.clone()
    state = MomentumState.zeros(x.shape)
    for t, alpha in enumerate(_step_sizes(cfg)):
        current = batch.with_pixels(x)
        transformed = rotation_transform(current, cfg.rotation_max,
                                         derive_seed(cfg.seed, "rote", t),
                                         resize_probability=cfg.di_probability)
        g = ti_smooth(kernel, grad_fn(transformed))
        state = momentum_update(state, g, cfg.momentum_decay)
        x = project_linf(x + alpha * state.m.sign(), x0, cfg.epsilon)
    return batch.with_pixels(x)
