"""Finite-difference gradient suite over every op and the full model losses.

Run in float64. Each check reports the max relative error
``|a - fd| / max(1e-8, |a| + |fd|)`` over the perturbed coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check, grad_check_params
from .losses import UncertaintyWeights, fixed_weighted_total, l1_reconstruction, nt_xent, rotation_ce, uncertainty_total
from .model import ModelConfig, build_model

TOLERANCE = 1e-4

SUITE_MODEL = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0, contrastive_dim=4, seed=11)


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _op_cases():
    rng = np.random.default_rng(1234)
    c = Tensor(rng.standard_normal((3, 4)))
    gamma = Tensor(rng.standard_normal(4) + 1.0)
    beta = Tensor(rng.standard_normal(4))
    right = Tensor(rng.standard_normal((4, 2)))
    return {
        "add": lambda x: (x + c).sum() * (x + 1.0).sum(),
        "sub": lambda x: ((c - x) * (x - 0.5)).sum(),
        "mul": lambda x: (x * c * x).sum(),
        "div": lambda x: (c / (x * x + 1.0)).sum(),
        "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
        "exp": lambda x: ag.exp(x * 0.5).sum(),
        "log": lambda x: ag.log(x * x + 1.0).sum(),
        "sqrt": lambda x: ag.sqrt(x * x + 1.0).sum(),
        "abs": lambda x: (ag.tabs(x + 0.05) * c).sum(),
        "clamp_min": lambda x: (ag.clamp_min(x, -0.3) * c).sum(),
        "gelu": lambda x: (ag.gelu(x) * c).sum(),
        "sum": lambda x: (x.sum(axis=1) ** 2).sum(),
        "mean": lambda x: ((x - x.mean(axis=1, keepdims=True)) ** 2).mean(),
        "reshape": lambda x: (x.reshape(2, 6) * c.reshape(2, 6) ** 2).sum(),
        "transpose": lambda x: (ag.matmul(x.transpose(), c) ** 2).sum(),
        "getitem": lambda x: (x[:, 1:3] * x[:, 0:2]).sum() + (x[1] ** 2).sum(),
        "concat": lambda x: (ag.concat([x, x * c], axis=1) ** 2).sum(),
        "matmul": lambda x: (ag.matmul(x, right) ** 2).sum(),
        "matmul_batched": lambda x: (ag.matmul(x.reshape(2, 3, 2), x.reshape(2, 2, 3)) ** 2).sum(),
        "matmul_rows": lambda x: (ag.matmul(x.reshape(2, 3, 2), Tensor(c.data[:2, :2])) ** 2).sum(),
        "softmax": lambda x: (ag.softmax(x, axis=1) * c).sum(),
        "log_softmax": lambda x: (ag.log_softmax(x, axis=0) * c).sum(),
        "layer_norm": lambda x: (ag.layer_norm(x, gamma, beta) * c).sum(),
    }


def _model_cases():
    """Full-forward checks, one per loss and combination."""
    model = build_model(SUITE_MODEL).astype(np.float64)
    rng = np.random.default_rng(99)
    x = rng.random((4, 3, 8, 8))
    target = rng.random((4, 3, 8, 8))
    labels = np.array([0, 3, 1, 2])
    pair = np.array([1, 0, 3, 2])
    unc = UncertaintyWeights((0.3, -0.2, 0.1), dtype=np.float64)

    def parts():
        recon, rot, con = model(x)
        return l1_reconstruction(target, recon), rotation_ce(rot, labels), nt_xent(con, pair, 0.5)

    cases = {
        "model/l1_reconstruction": (lambda: parts()[0], model.parameters()),
        "model/rotation_ce": (lambda: parts()[1], model.parameters()),
        "model/nt_xent": (lambda: parts()[2], model.parameters()),
        "model/fixed_total": (lambda: fixed_weighted_total(*parts(), alpha=(0.7, 1.3, 0.5)).total_tensor, model.parameters()),
        "model/uncertainty_total": (
            lambda: uncertainty_total(*parts(), unc).total_tensor,
            model.parameters() + unc.parameters(),
        ),
    }
    return cases


def run_suite(coords_per_param: int | None = None, seeds: int = 10, log=None) -> list[CheckResult]:
    """Run every op check (``seeds`` random inputs each) and every model check.

    ``coords_per_param`` caps the number of perturbed coordinates per model
    parameter; ``None`` perturbs all of them.
    """
    results = []
    with ag.default_dtype(np.float64):
        for name, f in _op_cases().items():
            t0 = time.perf_counter()
            err = 0.0
            for s in range(seeds):
                x = Tensor(np.random.default_rng(s).standard_normal((3, 4)))
                err = max(err, grad_check(f, x))
            results.append(CheckResult(f"op/{name}", err, time.perf_counter() - t0))
            if log:
                log(results[-1])
        for name, (f, params) in _model_cases().items():
            t0 = time.perf_counter()
            errs = grad_check_params(f, params, 1e-5, coords_per_param, np.random.default_rng(7))
            results.append(CheckResult(name, max(errs.values()), time.perf_counter() - t0))
            if log:
                log(results[-1])
    return results
