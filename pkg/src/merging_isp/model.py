"""The merging network: per-exposure reconstruction subnets, the analytic
LDR->HDR conversion, feature-volume assembly, and the fusion subnet."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import DomainError, ShapeError, Tensor

GAMMA_DEFAULT = 2.2


@dataclass(frozen=True)
class ReconstructionSubnetConfig:
    """Conv stack that maps one raw CFA exposure to a 3-channel feature map.

    Stage 1 is a single conv; the middle stage is one plain block plus
    ``n_blocks`` identity-skip blocks, each block being two (PReLU -> conv)
    units; stage 3 is a 1x1 conv with sigmoid.
    """

    n_blocks: int = 3
    width: int = 64
    stage1_kernel: int = 5
    block_kernel: int = 3

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")


@dataclass(frozen=True)
class FusionSubnetConfig:
    """Four conv layers with shrinking kernels; ReLU on the first three,
    sigmoid on the last. Entries are (kernel, filters)."""

    layers: tuple[tuple[int, int], ...] = ((7, 100), (5, 100), (3, 50), (1, 3))


class ModelParams:
    """All trainable weights, addressable by stable path strings.

    One independent reconstruction subnet per exposure (no sharing) plus one
    fusion subnet. Iteration order over paths is deterministic.
    """

    def __init__(self, num_exposures, recon=ReconstructionSubnetConfig(),
                 fusion=FusionSubnetConfig(), rng=None):
        if num_exposures < 2:
            raise ValueError(f"need at least 2 exposures, got {num_exposures}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.num_exposures = num_exposures
        self.recon_config = recon
        self.fusion_config = fusion
        self.params: dict[str, Tensor] = {}
        for i in range(num_exposures):
            self._init_recon(f"recon.{i}", recon, rng)
        self._init_fusion("fusion", num_exposures, fusion, rng)

    def _add_conv(self, path, cin, cout, k, rng):
        fan_in = cin * k * k
        fan_out = cout * k * k
        self.params[f"{path}.weight"] = tz.xavier_init(
            fan_in, fan_out, (cout, cin, k, k), rng
        )
        self.params[f"{path}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _init_recon(self, base, cfg, rng):
        w = cfg.width
        self._add_conv(f"{base}.stage1", 3, w, cfg.stage1_kernel, rng)
        for j in range(cfg.n_blocks + 1):
            for k in range(2):
                self.params[f"{base}.block.{j}.prelu.{k}.alpha"] = Tensor(
                    np.full(w, 0.25), requires_grad=True
                )
                self._add_conv(f"{base}.block.{j}.conv.{k}", w, w, cfg.block_kernel, rng)
        self._add_conv(f"{base}.stage3", w, 3, 1, rng)

    def _init_fusion(self, base, m, cfg, rng):
        cin = 6 * m
        for layer_idx, (k, cout) in enumerate(cfg.layers, start=1):
            self._add_conv(f"{base}.layer{layer_idx}", cin, cout, k, rng)
            cin = cout

    def __getitem__(self, path):
        return self.params[path]

    def items(self):
        return self.params.items()

    def subset(self, prefix):
        """Params whose path starts with ``prefix`` (for stage-wise training)."""
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def total_count(self):
        return sum(p.size for p in self.params.values())


def param_count(num_exposures, recon=ReconstructionSubnetConfig(),
                fusion=FusionSubnetConfig()):
    """Closed-form trainable parameter count for the full model."""
    w = recon.width
    k1, kb = recon.stage1_kernel, recon.block_kernel
    per_subnet = (
        k1 * k1 * 3 * w + w
        + 2 * (recon.n_blocks + 1) * (kb * kb * w * w + w)
        + 2 * (recon.n_blocks + 1) * w  # PReLU slopes
        + w * 3 + 3
    )
    total = num_exposures * per_subnet
    cin = 6 * num_exposures
    for k, cout in fusion.layers:
        total += k * k * cin * cout + cout
        cin = cout
    return total


def reconstruction_forward(raw, params, index):
    """One exposure through its reconstruction subnet; output in (0,1)."""
    if raw.ndim != 4 or raw.shape[1] != 3:
        raise ShapeError(f"reconstruction_forward: expected (B,3,H,W), got {raw.shape}")
    base = f"recon.{index}"
    cfg = params.recon_config
    h = tz.conv2d(raw, params[f"{base}.stage1.weight"], params[f"{base}.stage1.bias"])
    for j in range(cfg.n_blocks + 1):
        u = h
        for k in range(2):
            u = tz.prelu(u, params[f"{base}.block.{j}.prelu.{k}.alpha"])
            u = tz.conv2d(
                u,
                params[f"{base}.block.{j}.conv.{k}.weight"],
                params[f"{base}.block.{j}.conv.{k}.bias"],
            )
        h = u if j == 0 else tz.add(h, u)  # identity skip on the later blocks
    out = tz.conv2d(h, params[f"{base}.stage3.weight"], params[f"{base}.stage3.bias"])
    return tz.sigmoid(out)


def domain_convert(features, exposure_time, gamma=GAMMA_DEFAULT):
    """Analytic LDR->HDR conversion: elementwise features**gamma / t.

    Carries no trainable parameters but stays on the autodiff graph so
    gradients flow back into the reconstruction subnet.
    """
    t = float(exposure_time)
    if t <= 0:
        raise DomainError(f"domain_convert: exposure time must be positive, got {t}")
    return tz.div_scalar(tz.pow_scalar(features, gamma), t)


def build_feature_volume(ldr_features, hdr_features):
    """Interleave per-exposure LDR and HDR features channel-wise.

    Layout: [Z_1, H_1, Z_2, H_2, ...], six channels per exposure.
    """
    if len(ldr_features) != len(hdr_features):
        raise ShapeError(
            f"feature volume: {len(ldr_features)} LDR vs {len(hdr_features)} HDR stacks"
        )
    if not ldr_features:
        raise ShapeError("feature volume: empty feature lists")
    interleaved = []
    for z, zh in zip(ldr_features, hdr_features):
        interleaved.append(z)
        interleaved.append(zh)
    return tz.concat_channels(interleaved)


def fusion_forward(volume, params):
    """Fusion subnet: joint alignment and merging of the feature volume."""
    expected = 6 * params.num_exposures
    if volume.ndim != 4 or volume.shape[1] != expected:
        raise ShapeError(
            f"fusion_forward: expected {expected} channels, got shape {volume.shape}"
        )
    h = volume
    n_layers = len(params.fusion_config.layers)
    for layer_idx in range(1, n_layers + 1):
        h = tz.conv2d(
            h,
            params[f"fusion.layer{layer_idx}.weight"],
            params[f"fusion.layer{layer_idx}.bias"],
        )
        h = tz.sigmoid(h) if layer_idx == n_layers else tz.relu(h)
    return h


def merging_isp_forward(raw_stack, times, params, gamma=GAMMA_DEFAULT):
    """Full pipeline: raw CFA stack + exposure times -> linear HDR in (0,1)."""
    m = len(raw_stack)
    if m < 2:
        raise ShapeError(f"merging_isp_forward: need >= 2 exposures, got {m}")
    if m != params.num_exposures:
        raise ShapeError(
            f"merging_isp_forward: model built for {params.num_exposures} exposures, got {m}"
        )
    if len(times) != m:
        raise ShapeError(f"merging_isp_forward: {m} exposures but {len(times)} times")
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DomainError(f"exposure times must be strictly ascending, got {times}")
    ldr = [reconstruction_forward(raw, params, i) for i, raw in enumerate(raw_stack)]
    hdr = [domain_convert(z, t, gamma) for z, t in zip(ldr, times)]
    return fusion_forward(build_feature_volume(ldr, hdr), params)
