"""Training loop, checkpointing, evaluation, and the ablation harness."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as tz
from .align import align_to_reference, estimate_translation
from .cfa import RawImage
from .dataio import DataError, Scene, augment, extract_patches
from .model import (
    FusionSubnetConfig,
    ModelParams,
    ReconstructionSubnetConfig,
    build_feature_volume,
    domain_convert,
    fusion_forward,
    merging_isp_forward,
    reconstruction_forward,
)
from .metrics import psnr, ssim
from .objective import hdr_loss, tonemap
from .tensor import AdamState, Tensor, adam_step

CHECKPOINT_MAGIC = b"MISP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or architecturally incompatible checkpoint."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries (epoch, step, batch_index)."""

    def __init__(self, epoch, step, batch_index):
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}, batch {batch_index}"
        )
        self.epoch = epoch
        self.step = step
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and architecture knobs, recorded verbatim into
    checkpoints."""

    epochs: int = 70
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch_size: int = 50
    stride: int = 50
    mu: float = 5e3
    gamma: float = 2.2
    n_blocks: int = 3
    num_exposures: int = 3
    val_fraction: float = 0.05
    augment_copies: int = 0

    def __post_init__(self):
        # normalize numeric types so equal configs serialize identically
        for name in ("epochs", "batch_size", "seed", "patch_size", "stride",
                     "n_blocks", "num_exposures", "augment_copies"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("lr", "beta1", "beta2", "eps", "mu", "gamma", "val_fraction"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("epochs", "batch_size", "lr", "beta1", "beta2", "eps",
                     "patch_size", "stride", "mu", "gamma", "num_exposures"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.n_blocks < 0 or self.augment_copies < 0:
            raise ValueError("TrainConfig: n_blocks and augment_copies must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("TrainConfig.val_fraction must be in [0,1)")

    def recon_config(self):
        return ReconstructionSubnetConfig(n_blocks=self.n_blocks)

    def fusion_config(self):
        return FusionSubnetConfig()

    def architecture(self):
        return (self.num_exposures, self.n_blocks)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_model(config, seed=None):
    """Fresh Xavier-initialized model, deterministic in (config, seed)."""
    rng = np.random.default_rng([config.seed if seed is None else seed, 0xA11])
    return ModelParams(
        config.num_exposures, config.recon_config(), config.fusion_config(), rng
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    adam_state: AdamState
    epochs_done: int
    rng_state: dict = field(default_factory=dict)

    def require_architecture(self, config):
        if config.architecture() != self.config.architecture():
            raise CheckpointError(
                f"checkpoint architecture (M,N)={self.config.architecture()} does not "
                f"match requested {config.architecture()}"
            )


def save_checkpoint(path, checkpoint):
    """Layout: magic, u32 version, u32 header length, JSON header with the
    config and a buffer manifest (byte offsets into the blob), then the
    little-endian float64 buffers in manifest order."""
    buffers = []
    manifest = []
    offset = 0
    for kind, source in (
        ("param", {k: p.data for k, p in checkpoint.params.items()}),
        ("adam_m", checkpoint.adam_state.m),
        ("adam_v", checkpoint.adam_state.v),
    ):
        for name, arr in source.items():
            manifest.append(
                {"name": f"{kind}:{name}", "shape": list(arr.shape), "offset": offset}
            )
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            buffers.append(raw)
            offset += len(raw)
    header = {
        "config": asdict(checkpoint.config),
        "epochs_done": checkpoint.epochs_done,
        "step": checkpoint.adam_state.t,
        "rng_state": checkpoint.rng_state,
        "buffers": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for raw in buffers:
            f.write(raw)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc

    data = blob[12 + hlen :]
    arrays = {}
    for entry in header["buffers"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + n * 8
        if end > len(data):
            raise CheckpointError(f"{path}: truncated buffer {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()

    params = ModelParams(
        config.num_exposures, config.recon_config(), config.fusion_config(),
        np.random.default_rng(0),
    )
    state = AdamState(params.params)
    state.t = int(header["step"])
    for key, p in params.items():
        for kind, dest in (("param", None), ("adam_m", state.m), ("adam_v", state.v)):
            name = f"{kind}:{key}"
            if name not in arrays:
                raise CheckpointError(f"{path}: missing buffer {name}")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{path}: buffer {name} shape {arr.shape} != {p.data.shape}"
                )
            if dest is None:
                p.data = arr
            else:
                dest[key] = arr
    return Checkpoint(
        config=config,
        params=params,
        adam_state=state,
        epochs_done=int(header["epochs_done"]),
        rng_state=header.get("rng_state", {}),
    )


# ---------------------------------------------------------------------------
# training


def _detached(params):
    """A view of the model with gradient recording off (shared data)."""
    clone = object.__new__(ModelParams)
    clone.num_exposures = params.num_exposures
    clone.recon_config = params.recon_config
    clone.fusion_config = params.fusion_config
    clone.params = {k: Tensor(p.data) for k, p in params.items()}
    return clone


def _split_scenes(scenes, config):
    """Seeded 95/5 train/validation split over scenes (round to nearest)."""
    n_val = int(round(config.val_fraction * len(scenes)))
    order = np.random.default_rng([config.seed, 0x5B1]).permutation(len(scenes))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def _collect_patches(scenes, config, with_augment):
    patches = []
    for scene in scenes:
        patches.extend(extract_patches(scene, config.patch_size, config.stride))
    if with_augment and config.augment_copies > 0:
        rng = np.random.default_rng([config.seed, 0xAA6])
        extra = []
        for pair in patches:
            for _ in range(config.augment_copies):
                extra.append(augment(pair, rng))
        patches.extend(extra)
    return patches


def _grouped_batches(pairs):
    """Group a batch by exposure-time signature; forward runs per group."""
    groups = {}
    for p in pairs:
        groups.setdefault(tuple(p.times), []).append(p)
    return sorted(groups.items())


def _joint_loss(pairs, params, config):
    """Mean tonemapped-L2 loss of the full pipeline over a patch batch."""
    m = config.num_exposures
    total = None
    for times, ps in _grouped_batches(pairs):
        raws = [Tensor(np.stack([p.raws[i] for p in ps])) for i in range(m)]
        pred = merging_isp_forward(raws, list(times), params, config.gamma)
        target = Tensor(np.stack([p.target for p in ps]))
        term = tz.mul_scalar(hdr_loss(pred, target, config.mu), len(ps) / len(pairs))
        total = term if total is None else tz.add(total, term)
    return total


def _epoch_rng(config, epoch, override_state=None):
    rng = np.random.default_rng([config.seed, 0xE90C, epoch])
    if override_state is not None:
        rng.bit_generator.state = override_state
    return rng


def _epoch_rng_state(config, epoch):
    return np.random.default_rng([config.seed, 0xE90C, epoch]).bit_generator.state


def _optimize(config, patches, val_patches, loss_fn, params, trainable,
              adam_state, start_epoch, epochs, resume_rng_state=None,
              progress=None):
    """Generic epoch loop: shuffle, batch, forward, backward, Adam.

    ``loss_fn(pairs, params)`` must return a scalar Tensor; validation
    reuses it with a detached parameter view. Shuffle order is a pure
    function of (seed, epoch), so resumed runs replay the schedule.
    """
    loss_log = []
    n = len(patches)
    if n == 0:
        raise DataError("training requires at least one patch")
    step = adam_state.t
    for epoch in range(start_epoch, epochs):
        state = resume_rng_state if epoch == start_epoch else None
        rng = _epoch_rng(config, epoch, state)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_index, b0 in enumerate(range(0, n, config.batch_size)):
            pairs = [patches[i] for i in order[b0 : b0 + config.batch_size]]
            for p in trainable.values():
                p.grad = None
            loss = loss_fn(pairs, params)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step, batch_index)
            loss.backward()
            adam_step(trainable, adam_state, config.lr, config.beta1,
                      config.beta2, config.eps)
            step += 1
            epoch_loss += value * len(pairs)
        train_loss = epoch_loss / n
        if val_patches:
            detached = _detached(params)
            val_loss = sum(
                float(loss_fn(val_patches[i : i + config.batch_size], detached).data)
                * len(val_patches[i : i + config.batch_size])
                for i in range(0, len(val_patches), config.batch_size)
            ) / len(val_patches)
        else:
            val_loss = math.nan
        loss_log.append((epoch, train_loss, val_loss))
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    return loss_log


def train(config, scenes, resume=None, progress=None):
    """Train the joint pipeline; returns (Checkpoint, loss_log).

    Fully deterministic in (config, scenes, resume). ``resume`` continues an
    earlier run of the same config up to ``config.epochs`` and is bit-for-bit
    equivalent to an uninterrupted run.
    """
    if not scenes:
        raise DataError("train: empty dataset")
    train_scenes, val_scenes = _split_scenes(scenes, config)
    if not train_scenes:
        raise DataError("train: no scenes left after validation split")
    patches = _collect_patches(train_scenes, config, with_augment=True)
    val_patches = _collect_patches(val_scenes, config, with_augment=False)

    if resume is not None:
        resume.require_architecture(config)
        params = resume.params
        adam_state = resume.adam_state
        start_epoch = resume.epochs_done
        resume_rng_state = resume.rng_state or None
    else:
        params = build_model(config)
        adam_state = AdamState(params.params)
        start_epoch = 0
        resume_rng_state = None

    def loss_fn(pairs, model):
        return _joint_loss(pairs, model, config)

    loss_log = _optimize(
        config, patches, val_patches, loss_fn, params, params.params,
        adam_state, start_epoch, config.epochs, resume_rng_state, progress,
    )
    checkpoint = Checkpoint(
        config=config,
        params=params,
        adam_state=adam_state,
        epochs_done=config.epochs,
        rng_state=_epoch_rng_state(config, config.epochs),
    )
    return checkpoint, loss_log


def write_loss_log(path, loss_log):
    """One line per epoch: epoch index, mean train loss, mean val loss."""
    with open(path, "w", encoding="utf-8") as f:
        for epoch, train_loss, val_loss in loss_log:
            f.write(f"{epoch} {train_loss:.17g} {val_loss:.17g}\n")


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(checkpoint, scene):
    """Whole-image forward pass; returns the linear HDR prediction (3,H,W)."""
    if scene.num_exposures != checkpoint.config.num_exposures:
        raise DataError(
            f"infer: scene has {scene.num_exposures} exposures, checkpoint expects "
            f"{checkpoint.config.num_exposures}"
        )
    model = _detached(checkpoint.params)
    raws = [Tensor(r.values[None]) for r in scene.raws]
    pred = merging_isp_forward(raws, scene.times, model, checkpoint.config.gamma)
    return pred.data[0]


@dataclass
class MetricTable:
    """Per-scene PSNR/SSIM rows plus their arithmetic means.

    Infinite PSNR rows (identical images) are excluded from the mean with a
    warning.
    """

    rows: list[tuple[str, float, float]]

    @property
    def mean_psnr(self):
        finite = [p for _, p, _ in self.rows if math.isfinite(p)]
        if len(finite) < len(self.rows):
            warnings.warn("excluding infinite PSNR rows from the mean")
        return float(np.mean(finite)) if finite else math.nan

    @property
    def mean_ssim(self):
        return float(np.mean([s for _, _, s in self.rows])) if self.rows else math.nan

    def to_csv(self):
        lines = ["scene_id,psnr_db,ssim"]
        for scene_id, p, s in self.rows:
            lines.append(f"{scene_id},{p:.6f},{s:.6f}")
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


def _evaluate_forward(forward_fn, scenes, mu):
    rows = []
    for scene in scenes:
        if scene.ground_truth is None:
            warnings.warn(f"scene {scene.scene_id} has no ground truth; skipped")
            continue
        pred = tonemap(forward_fn(scene), mu)
        target = tonemap(scene.ground_truth, mu)
        rows.append((scene.scene_id, psnr(pred, target), ssim(pred, target)))
    return MetricTable(rows=rows)


def evaluate(checkpoint, scenes):
    """PSNR/SSIM of tonemapped predictions against tonemapped ground truth."""
    return _evaluate_forward(
        lambda scene: infer(checkpoint, scene), scenes, checkpoint.config.mu
    )


# ---------------------------------------------------------------------------
# ablation harness


class AblationVariant(str, Enum):
    PROPOSED = "proposed"
    PRE_ALIGN_CASCADED = "pre_align_cascaded"
    POST_ALIGN_CASCADED = "post_align_cascaded"
    PRE_ALIGN_END_TO_END = "pre_align_end_to_end"


def _align_scene(scene, levels, radius):
    """Shift every non-reference exposure onto the reference frame using the
    CFA-phase-preserving translational aligner."""
    ref = scene.reference_index
    raws = list(scene.raws)
    rgbs = list(scene.ldr_rgb) if scene.ldr_rgb else None
    for i in range(scene.num_exposures):
        if i == ref:
            continue
        d = estimate_translation(
            scene.raws[ref].values, scene.raws[i].values, levels, radius,
            reference_time=scene.times[ref], moving_time=scene.times[i],
            cfa=True,
        )
        raws[i] = RawImage(align_to_reference(raws[i].values, d), raws[i].pattern)
        if rgbs is not None:
            rgbs[i] = align_to_reference(rgbs[i], d)
    return Scene(
        scene_id=scene.scene_id,
        raws=raws,
        times=list(scene.times),
        reference_index=ref,
        ldr_rgb=rgbs,
        ground_truth=scene.ground_truth,
        pattern=scene.pattern,
    )


def _demosaic_loss(pairs, params, config):
    """Per-exposure L2 between subnet output and the clean RGB exposure."""
    m = config.num_exposures
    total = None
    for i in range(m):
        raw = Tensor(np.stack([p.raws[i] for p in pairs]))
        target = Tensor(np.stack([p.rgbs[i] for p in pairs]))
        pred = reconstruction_forward(raw, params, i)
        term = tz.div_scalar(tz.mean(tz.square(tz.sub(pred, target))), m)
        total = term if total is None else tz.add(total, term)
    return total


def _train_reconstruction_only(config, scenes, progress=None):
    """Stage one of the cascaded variants: subnets learn demosaicing."""
    patches = _collect_patches(scenes, config, with_augment=True)
    if any(p.rgbs is None for p in patches):
        raise DataError("cascaded training needs clean RGB exposures as targets")
    params = build_model(config)
    trainable = params.subset("recon.")
    adam_state = AdamState(trainable)

    def loss_fn(pairs, model):
        return _demosaic_loss(pairs, model, config)

    _optimize(config, patches, [], loss_fn, params, trainable, adam_state,
              0, config.epochs, progress=progress)
    return params


def _scene_feature_volume(scene, params, config, post_align, levels, radius):
    """Frozen-subnet feature volume for one scene (plain array, no graph)."""
    model = _detached(params)
    ref = scene.reference_index
    ldr = [
        reconstruction_forward(Tensor(r.values[None]), model, i).data[0]
        for i, r in enumerate(scene.raws)
    ]
    if post_align:
        for i in range(scene.num_exposures):
            if i == ref:
                continue
            d = estimate_translation(
                ldr[ref], ldr[i], levels, radius,
                reference_time=scene.times[ref], moving_time=scene.times[i],
            )
            ldr[i] = align_to_reference(ldr[i], d)
    channels = []
    for z, t in zip(ldr, scene.times):
        channels.append(z)
        channels.append(np.power(z, config.gamma) / t)
    return np.concatenate(channels, axis=0)


def _train_fusion_on_volumes(config, volumes, targets, progress=None):
    """Stage two of the cascaded variants: fusion learns on frozen features."""
    params = build_model(config)
    trainable = params.subset("fusion.")
    adam_state = AdamState(trainable)
    items = list(zip(volumes, targets))

    def loss_fn(pairs, model):
        volume = Tensor(np.stack([v for v, _ in pairs]))
        target = Tensor(np.stack([t for _, t in pairs]))
        return hdr_loss(fusion_forward(volume, model), target, config.mu)

    _optimize(config, items, [], loss_fn, params, trainable, adam_state,
              0, config.epochs, progress=progress)
    return params


def _volume_patches(scenes, params, config, post_align, levels, radius):
    volumes = []
    targets = []
    size, stride = config.patch_size, config.stride
    for scene in scenes:
        u = _scene_feature_volume(scene, params, config, post_align, levels, radius)
        h, w = u.shape[1:]
        for y0 in range(0, h - size + 1, stride):
            for x0 in range(0, w - size + 1, stride):
                volumes.append(u[:, y0 : y0 + size, x0 : x0 + size])
                targets.append(scene.ground_truth[:, y0 : y0 + size, x0 : x0 + size])
    return volumes, targets


def run_ablation(variant, config, scenes, levels=3, radius=4, progress=None):
    """Train one pipeline variant on the dataset and score it on the same
    scenes; returns its metric table."""
    variant = AblationVariant(variant)
    if variant is AblationVariant.PROPOSED:
        checkpoint, _ = train(config, scenes, progress=progress)
        return evaluate(checkpoint, scenes)

    if variant is AblationVariant.PRE_ALIGN_END_TO_END:
        aligned = [_align_scene(s, levels, radius) for s in scenes]
        checkpoint, _ = train(config, aligned, progress=progress)
        return evaluate(checkpoint, aligned)

    post_align = variant is AblationVariant.POST_ALIGN_CASCADED
    stage_scenes = scenes if post_align else [_align_scene(s, levels, radius) for s in scenes]
    recon_params = _train_reconstruction_only(config, stage_scenes, progress=progress)
    volumes, targets = _volume_patches(
        stage_scenes, recon_params, config, post_align, levels, radius
    )
    fusion_params = _train_fusion_on_volumes(config, volumes, targets, progress=progress)
    # stitch both stages into one parameter set for inference
    model = build_model(config)
    for key, p in model.items():
        src = recon_params if key.startswith("recon.") else fusion_params
        p.data = src[key].data

    def forward(scene):
        u = _scene_feature_volume(scene, model, config, post_align, levels, radius)
        return fusion_forward(Tensor(u[None]), _detached(model)).data[0]

    return _evaluate_forward(forward, stage_scenes, config.mu)
