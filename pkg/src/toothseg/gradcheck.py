"""Finite-difference checks of the analytic gradients, in float64.

Each suite draws small random instances, computes the autograd gradient of a
scalar function and compares it with central differences. The reported
error is ``max|g_auto - g_fd| / max(max|g_fd|, 1e-8)`` per instance, with
the maxima taken jointly over every checked tensor (some parameters, such as
attention key biases, have an exactly zero gradient).
"""

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import torch

from .backbone import geometric_affine
from .head import HeadConfig, HeadOutput, InstanceHead
from .losses import (
    GroundTruthInstance,
    LossWeights,
    instance_boundary_loss,
    mask_loss,
    matching_cost,
    set_criterion,
)
from .matching import hungarian_match

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    trials: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _relative_error(fn: Callable[[List[torch.Tensor]], torch.Tensor], inputs: List[torch.Tensor]) -> float:
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(inputs), inputs)
    numeric = []
    with torch.no_grad():
        for x in inputs:
            flat = x.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + STEP
                f_plus = fn(inputs).item()
                flat[i] = orig - STEP
                f_minus = fn(inputs).item()
                flat[i] = orig
                fd[i] = (f_plus - f_minus) / (2 * STEP)
            numeric.append(fd)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat(numeric)
    return (a - n).abs().max().item() / max(n.abs().max().item(), 1e-8)


def _random_gts(rng, n, g, n_classes):
    owner = rng.integers(0, g + 1, n)  # 0 = background
    cats = rng.choice(np.arange(1, n_classes + 1), size=g, replace=False)
    gts = [GroundTruthInstance(owner == j + 1, int(cats[j])) for j in range(g)]
    labels = np.zeros(n, dtype=np.int64)
    for j in range(g):
        labels[owner == j + 1] = cats[j]
    return gts, labels


def check_affine(rng) -> float:
    groups, k, c = rng.integers(1, 4), rng.integers(2, 5), rng.integers(1, 4)
    x = torch.as_tensor(rng.normal(size=(groups, k, c)))
    alpha = torch.as_tensor(rng.normal(size=c))
    beta = torch.as_tensor(rng.normal(size=c))
    w = torch.as_tensor(rng.normal(size=(groups, k, c)))
    mode = "scalar" if rng.random() < 0.5 else "per-channel"
    return _relative_error(lambda t: (w * geometric_affine(t[0], t[1], t[2], 1e-5, mode)).sum(), [x, alpha, beta])


def check_boundary_loss(rng) -> float:
    n, c = rng.integers(2, 17), rng.integers(1, 5)
    logits = torch.as_tensor(rng.normal(size=(n, c + 1)))
    labels = rng.integers(0, c + 1, n)
    boundary = rng.random(n) < 0.6
    boundary[rng.integers(n)] = True
    return _relative_error(
        lambda t: instance_boundary_loss(torch.softmax(t[0], -1), labels, boundary, 2.0), [logits]
    )


def check_mask_loss(rng) -> float:
    n = rng.integers(1, 17)
    logits = torch.as_tensor(rng.normal(size=n) * 2)
    target = rng.random(n) < 0.5
    return _relative_error(lambda t: mask_loss(t[0], target), [logits])


def _criterion_on_outputs(rng):
    n, m, c = rng.integers(4, 17), rng.integers(1, 4), rng.integers(2, 5)
    g = rng.integers(1, min(m, c) + 1)
    gts, labels = _random_gts(rng, n, g, c)
    boundary = rng.random(n) < 0.5
    raw = [
        torch.as_tensor(rng.normal(size=(m, n))),
        torch.as_tensor(rng.normal(size=(m, c + 1))),
        torch.as_tensor(rng.normal(size=m)),
    ]
    weights = LossWeights(1.0, 1.0, 1.0, float(rng.uniform(0.001, 1.0)))

    def head_of(t):
        return HeadOutput(t[0], t[1], torch.sigmoid(t[2]))

    match = hungarian_match(matching_cost(head_of(raw), gts))

    def total(t):
        return set_criterion(head_of(t), gts, labels, boundary, weights, match=match)[0]

    return total, raw


def check_total_loss(rng) -> float:
    total, raw = _criterion_on_outputs(rng)
    return _relative_error(total, raw)


def check_head_parameters(rng) -> float:
    """Total loss against every parameter of a tiny instance head."""
    n, c_in, c = int(rng.integers(4, 17)), 5, int(rng.integers(2, 5))
    torch.manual_seed(int(rng.integers(2**31)))
    head = InstanceHead(c_in, HeadConfig(num_queries=3, query_dim=4, num_classes=c, num_layers=1, num_heads=2, ffn_dim=6))
    head = head.double()
    feats = torch.as_tensor(rng.normal(size=(n, c_in)))
    gts, labels = _random_gts(rng, n, int(rng.integers(1, 3)), c)
    boundary = rng.random(n) < 0.5
    names, params = zip(*head.named_parameters())
    match = hungarian_match(matching_cost(head(feats), gts))

    def total(t):
        out = torch.func.functional_call(head, dict(zip(names, t)), (feats,))
        return set_criterion(out, gts, labels, boundary, LossWeights(), match=match)[0]

    return _relative_error(total, list(params))


SUITES: Dict[str, Callable] = {
    "geometric_affine": check_affine,
    "boundary_loss": check_boundary_loss,
    "mask_loss": check_mask_loss,
    "total_loss": check_total_loss,
    "head_parameters": check_head_parameters,
}


def run_suite(name: str, trials: int = 10, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, sorted(SUITES).index(name)])
    errors = [SUITES[name](rng) for _ in range(trials)]
    return SuiteResult(name, max(errors), trials)


def run_all(trials: int = 10, seed: int = 0) -> List[SuiteResult]:
    return [run_suite(name, trials, seed) for name in SUITES]
