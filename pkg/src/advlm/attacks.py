"""White-box adversarial example generation under an explicit threat model.

Three attacks over [0, 1]-valued images:

- fgsm: one signed-gradient step of size epsilon.
- pgd: iterated signed-gradient ascent with projection back onto the
  L-infinity ball after every step, optionally from a random start.
- cw_l2: gradient descent on ||delta||^2 + c * margin_loss, returning the
  smallest-norm iterate that crosses the decision boundary.

A loss function here is any callable mapping an image tensor to a scalar
tensor; when handed a graph leaf it must build the differentiable path on
that leaf's graph (closures over constant model parameters do this
automatically). Attacks are pure given their seed, so independent samples
may be attacked concurrently as long as each evaluation builds its own
graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Tuple

import numpy as np

from .autodiff import ComputationGraph, ContractViolation, Tensor, backward
from .seeding import make_rng

__all__ = [
    "AttackError",
    "AttackGoal",
    "AttackKnowledge",
    "Norm",
    "ThreatModel",
    "PgdParams",
    "CwParams",
    "AttackResult",
    "fgsm",
    "project_linf",
    "pgd",
    "cw_l2",
    "hyperparameter_schedule",
    "EPSILON_GRID",
]

LossFn = Callable[[Tensor], Tensor]


class AttackError(RuntimeError):
    """Raised when an attack encounters non-finite values."""


class AttackGoal(str, Enum):
    UNTARGETED = "untargeted"


class AttackKnowledge(str, Enum):
    WHITE_BOX = "white_box"


class Norm(str, Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class ThreatModel:
    """Adversary goal, knowledge, norm, and perturbation budget."""

    epsilon: float
    norm: Norm = Norm.LINF
    goal: AttackGoal = AttackGoal.UNTARGETED
    knowledge: AttackKnowledge = AttackKnowledge.WHITE_BOX

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "goal", AttackGoal(self.goal))
        object.__setattr__(self, "knowledge", AttackKnowledge(self.knowledge))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractViolation(f"epsilon {self.epsilon} outside [0, 1]")


@dataclass(frozen=True)
class PgdParams:
    threat: ThreatModel
    alpha: float
    iterations: int
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractViolation("alpha must be positive")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.threat.epsilon > 0 and self.alpha > self.threat.epsilon + 1e-12:
            raise ContractViolation(
                f"alpha {self.alpha} exceeds epsilon {self.threat.epsilon}")
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")


@dataclass(frozen=True)
class CwParams:
    c: float
    learning_rate: float
    iterations: int
    seed: int = 0

    def __post_init__(self):
        if self.c < 0:
            raise ContractViolation("c must be >= 0")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")


@dataclass(frozen=True)
class AttackResult:
    """Outcome of one attack: the adversarial image, the perturbation
    delta = x_adv - x, the loss achieved at the returned iterate, and the
    perturbation norms. `success` is meaningful for cw_l2 only."""

    adversarial_image: Tensor
    perturbation: Tensor
    achieved_loss: float
    iterations_run: int
    linf_norm: float
    l2_norm: float
    success: bool = True


def _check_image(image: Tensor) -> np.ndarray:
    arr = image.array
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractViolation("image pixels must lie in [0, 1]")
    return arr


def _loss_and_grad(loss_fn: LossFn, arr: np.ndarray,
                   iteration: int | None = None) -> Tuple[float, np.ndarray]:
    where = "" if iteration is None else f" at iteration {iteration}"
    graph = ComputationGraph()
    leaf = graph.leaf(Tensor._wrap(arr))
    try:
        loss = loss_fn(leaf)
        grads = backward(graph, loss)
    except ContractViolation as exc:
        if "finite" in str(exc):
            raise AttackError(f"non-finite values{where}: {exc}") from exc
        raise
    g = grads.of(leaf)
    grad = np.zeros(arr.shape) if g is None else g.array
    bad = int(grad.size - np.isfinite(grad).sum())
    if bad:
        raise AttackError(f"non-finite gradient in {bad} coordinates{where}")
    return loss.item(), grad


def _result(loss_fn: LossFn, original: np.ndarray, adversarial: np.ndarray,
            iterations_run: int, achieved_loss: float | None = None,
            success: bool = True) -> AttackResult:
    delta = adversarial - original
    if achieved_loss is None:
        achieved_loss = loss_fn(Tensor._wrap(adversarial)).item()
    return AttackResult(
        adversarial_image=Tensor._wrap(adversarial),
        perturbation=Tensor._wrap(delta),
        achieved_loss=achieved_loss,
        iterations_run=iterations_run,
        linf_norm=float(np.abs(delta).max()),
        l2_norm=float(math.sqrt((delta * delta).sum())),
        success=success,
    )


def fgsm(loss_fn: LossFn, image: Tensor, epsilon: float) -> AttackResult:
    """Single signed-gradient step: clip(x + eps * sign(grad), 0, 1).

    sign(0) is 0, so coordinates with exactly-zero gradient stay put.
    """
    arr = _check_image(image)
    epsilon = float(epsilon)
    if epsilon < 0:
        raise ContractViolation("epsilon must be >= 0")
    _, grad = _loss_and_grad(loss_fn, arr)
    adversarial = np.clip(arr + epsilon * np.sign(grad), 0.0, 1.0)
    return _result(loss_fn, arr, adversarial, iterations_run=1)


def _project(candidate: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(candidate, origin - epsilon, origin + epsilon), 0.0, 1.0)


def project_linf(candidate: Tensor, origin: Tensor, epsilon: float) -> Tensor:
    """Clamp into [origin - eps, origin + eps], then into [0, 1]."""
    if candidate.shape != origin.shape:
        raise ContractViolation(
            f"project_linf shape mismatch: {candidate.shape} vs {origin.shape}")
    return Tensor._wrap(_project(candidate.array, origin.array, float(epsilon)))


def pgd(loss_fn: LossFn, image: Tensor, params: PgdParams) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the epsilon ball.

    With random_start, the iterate begins at image + uniform(-eps, eps)
    noise (projected); otherwise at the image itself. One PGD iteration
    with alpha = eps and no random start is bit-identical to fgsm.
    """
    if params.threat.norm is not Norm.LINF:
        raise ContractViolation("pgd requires an L-infinity threat model")
    arr = _check_image(image)
    eps = params.threat.epsilon
    current = arr.copy()
    if params.random_start and eps > 0:
        noise = make_rng(params.seed).uniform(-eps, eps, size=arr.shape)
        current = _project(arr + noise, arr, eps)
    for t in range(1, params.iterations + 1):
        _, grad = _loss_and_grad(loss_fn, current, iteration=t)
        current = _project(current + params.alpha * np.sign(grad), arr, eps)
    return _result(loss_fn, arr, current, iterations_run=params.iterations)


def cw_l2(classifier_loss: LossFn, image: Tensor, params: CwParams) -> AttackResult:
    """Minimal-L2 search: gradient descent on ||delta||^2 + c * L(x + delta)
    from delta = 0, iterates clamped to [0, 1].

    `classifier_loss` must be a margin with L(x') <= 0 exactly when x' is
    misclassified. Returns the smallest-norm iterate with L <= 0, or the
    final iterate with success=False. achieved_loss is the margin at the
    returned iterate.
    """
    arr = _check_image(image)
    current = arr.copy()
    margin = classifier_loss(Tensor._wrap(current)).item()
    if margin <= 0:
        return _result(classifier_loss, arr, current, iterations_run=0,
                       achieved_loss=margin, success=True)

    best: np.ndarray | None = None
    best_norm = math.inf
    best_margin = 0.0
    for t in range(1, params.iterations + 1):
        _, grad_margin = _loss_and_grad(classifier_loss, current, iteration=t)
        grad_obj = 2.0 * (current - arr) + params.c * grad_margin
        current = np.clip(current - params.learning_rate * grad_obj, 0.0, 1.0)
        margin = classifier_loss(Tensor._wrap(current)).item()
        if margin <= 0:
            norm = float(np.linalg.norm(current - arr))
            if norm < best_norm:
                best, best_norm, best_margin = current.copy(), norm, margin
    if best is not None:
        return _result(classifier_loss, arr, best, iterations_run=params.iterations,
                       achieved_loss=best_margin, success=True)
    return _result(classifier_loss, arr, current, iterations_run=params.iterations,
                   achieved_loss=margin, success=False)


# ---------------------------------------------------------------------------
# step-size schedule

EPSILON_GRID = (2 / 255, 4 / 255, 8 / 255, 16 / 255, 128 / 255, 255 / 255)

_EPS_LO, _ALPHA_LO, _ITER_LO = 2 / 255, 0.00196, 5
_EPS_HI, _ALPHA_HI, _ITER_HI = 255 / 255, 0.06274, 30


def hyperparameter_schedule(epsilon: float) -> Tuple[float, int]:
    """(alpha, iterations) for a budget: exact published pairs at the grid
    endpoints, log-linear alpha and linear iterations (rounded up, floor 1)
    everywhere else. Budgets outside the endpoint range extrapolate, which
    goes beyond the tabulated grid and is flagged as such in the CLI help.
    """
    epsilon = float(epsilon)
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    if math.isclose(epsilon, _EPS_LO, rel_tol=0.0, abs_tol=1e-12):
        return _ALPHA_LO, _ITER_LO
    if math.isclose(epsilon, _EPS_HI, rel_tol=0.0, abs_tol=1e-12):
        return _ALPHA_HI, _ITER_HI
    t_log = (math.log(epsilon) - math.log(_EPS_LO)) / (math.log(_EPS_HI) - math.log(_EPS_LO))
    alpha = math.exp(math.log(_ALPHA_LO) + t_log * (math.log(_ALPHA_HI) - math.log(_ALPHA_LO)))
    t_lin = (epsilon - _EPS_LO) / (_EPS_HI - _EPS_LO)
    iterations = max(1, math.ceil(_ITER_LO + t_lin * (_ITER_HI - _ITER_LO)))
    return alpha, iterations
