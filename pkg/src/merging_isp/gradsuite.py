"""Finite-difference verification of every differentiable op and of the
composed pipeline loss. Backs the ``gradcheck`` CLI command."""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .model import ModelParams, ReconstructionSubnetConfig, merging_isp_forward
from .objective import hdr_loss, mu_law
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, margin=0.2):
    """Random values bounded away from 0, where relu/prelu kink."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng):
    """(name, closure, probe tensor) triples for every differentiable op."""
    x4 = Tensor(_away_from_zero(rng, (1, 3, 6, 7)))
    pos4 = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, 6, 7)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    alpha = Tensor(rng.uniform(0.1, 0.5, size=3), requires_grad=True)
    other = Tensor(rng.standard_normal((1, 3, 6, 7)))

    def scalarize(t):
        return tz.mean(tz.square(t))

    return [
        ("conv2d/input", lambda t: scalarize(tz.conv2d(t, w, b)), x4),
        ("conv2d/weight", lambda t: scalarize(tz.conv2d(x4, t, b)), w),
        ("conv2d/bias", lambda t: scalarize(tz.conv2d(x4, w, t)), b),
        ("prelu/input", lambda t: scalarize(tz.prelu(t, alpha)), x4),
        ("prelu/alpha", lambda t: scalarize(tz.prelu(x4, t)), alpha),
        ("relu", lambda t: scalarize(tz.relu(t)), x4),
        ("sigmoid", lambda t: scalarize(tz.sigmoid(t)), x4),
        ("concat_channels", lambda t: scalarize(tz.concat_channels([t, other])), x4),
        ("pow_scalar", lambda t: scalarize(tz.pow_scalar(t, 2.2)), pos4),
        ("div_scalar", lambda t: scalarize(tz.div_scalar(t, 3.5)), x4),
        ("log1p_scaled", lambda t: scalarize(tz.log1p_scaled(t, 5e3)), pos4),
        ("sub", lambda t: scalarize(tz.sub(t, other)), x4),
        ("square", lambda t: tz.mean(tz.square(t)), x4),
        ("mean", lambda t: tz.mean(tz.sigmoid(t)), x4),
        ("mu_law", lambda t: tz.mean(mu_law(t)), pos4),
    ]


def _pipeline_case(rng):
    """Composed loss, probed on a slice of trainable weights."""
    config = ReconstructionSubnetConfig(n_blocks=0)
    params = ModelParams(2, recon=config, rng=rng)
    raws = [Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))) for _ in range(2)]
    times = [1.0, 4.0]
    target = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, 8, 8)))

    def probe(path):
        original = params[path]

        def closure(t):
            params.params[path] = t
            try:
                pred = merging_isp_forward(raws, times, params)
                return hdr_loss(pred, target)
            finally:
                params.params[path] = original

        return closure

    return params, probe


def run_gradient_suite(seed=0, seeds=10, pipeline_probes=12, verbose=False):
    """Run every check over ``seeds`` seeds; returns the list of failures."""
    failures = []
    for s in range(seeds):
        rng = np.random.default_rng([seed, s])
        for name, closure, probe in _op_cases(rng):
            err = grad_check(closure, probe)
            if verbose:
                print(f"seed {s:2d}  {name:18s} max rel err {err:.3e}")
            if not err <= TOLERANCE:
                failures.append(f"{name} (seed {s}, err {err:.3e})")

    rng = np.random.default_rng([seed, 0xF1])
    params, probe = _pipeline_case(rng)
    for path in (
        "recon.0.stage1.weight",
        "recon.1.block.0.prelu.0.alpha",
        "recon.1.stage3.weight",
        "fusion.layer1.weight",
        "fusion.layer4.bias",
    ):
        err = grad_check(
            probe(path), params[path], probes=pipeline_probes, rng=rng
        )
        if verbose:
            print(f"pipeline  {path:32s} max rel err {err:.3e}")
        if not err <= TOLERANCE:
            failures.append(f"pipeline:{path} (err {err:.3e})")
    return failures
