"""Scene ingestion, image IO, patch extraction, augmentation, and synthetic
scene generation for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import yaml

from .align import Displacement, warp_translate
from .cfa import RGGB, CfaPattern, RawImage, mosaic_rggb
from .tensor import ShapeError

GAMMA_RENDER = 2.2
PNG16_MAX = 65535


class DataError(ValueError):
    """Malformed manifest or image file."""


# ---------------------------------------------------------------------------
# PFM (32-bit float HDR images)


def write_pfm(path, image):
    """Write a (3,H,W) array as little-endian color PFM (rows bottom-up)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"write_pfm: expected (3,H,W), got {img.shape}")
    _, h, w = img.shape
    interleaved = img.transpose(1, 2, 0)[::-1].astype("<f4")
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(interleaved.tobytes())


def read_pfm(path):
    """Read a color PFM file into a (3,H,W) float64 array."""
    with open(path, "rb") as f:
        header = _read_pfm_line(f)
        if header == "Pf":
            raise DataError(f"{path}: grayscale PFM not supported, need 3-channel 'PF'")
        if header != "PF":
            raise DataError(f"{path}: not a PFM file (header {header!r})")
        dims = _read_pfm_line(f).split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimension line")
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(_read_pfm_line(f))
        except ValueError as exc:
            raise DataError(f"{path}: malformed PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0:
            raise DataError(f"{path}: invalid PFM header values")
        count = w * h * 3
        payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise DataError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w, 3)
    return data[::-1].transpose(2, 0, 1).astype(np.float64)


def _read_pfm_line(f):
    buf = b""
    while True:
        c = f.read(1)
        if not c:
            raise DataError("unexpected end of PFM header")
        if c == b"\n":
            return buf.decode("ascii", errors="replace").strip()
        buf += c


# ---------------------------------------------------------------------------
# 16-bit PNG (LDR and raw CFA images)


def write_png16(path, image):
    """Write a (3,H,W) array in [0,1] as 16-bit RGB PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"write_png16: expected (3,H,W), got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise DataError("write_png16: values must lie in [0,1]")
    u16 = np.round(img * PNG16_MAX).astype(np.uint16)
    bgr = u16[::-1].transpose(1, 2, 0)  # cv2 stores BGR
    if not cv2.imwrite(str(path), np.ascontiguousarray(bgr)):
        raise DataError(f"write_png16: could not write {path}")


def read_png16(path):
    """Read a 16-bit RGB PNG into a (3,H,W) float64 array in [0,1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"read_png16: could not read {path}")
    if raw.dtype != np.uint16:
        raise DataError(f"read_png16: {path} is not 16-bit (dtype {raw.dtype})")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"read_png16: {path} is not 3-channel")
    rgb = raw[:, :, ::-1].transpose(2, 0, 1)
    return rgb.astype(np.float64) / PNG16_MAX


def quantize16(image):
    """Snap values in [0,1] to the 16-bit lattice (what write->read yields)."""
    return np.round(np.asarray(image, dtype=np.float64) * PNG16_MAX) / PNG16_MAX


# ---------------------------------------------------------------------------
# manifests and scenes


@dataclass(frozen=True)
class ExposureEntry:
    path: str
    t: float


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    exposures: tuple[ExposureEntry, ...]
    reference_index: int
    ground_truth: str | None = None
    cfa_pattern: str = "RGGB"

    def __post_init__(self):
        if len(self.exposures) < 2:
            raise DataError(f"{self.scene_id}: need at least 2 exposures")
        times = [e.t for e in self.exposures]
        if any(t <= 0 for t in times):
            raise DataError(f"{self.scene_id}: exposure times must be positive")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"{self.scene_id}: exposure times must be strictly ascending")
        if not 0 <= self.reference_index < len(self.exposures):
            raise DataError(f"{self.scene_id}: reference_index out of range")
        if self.cfa_pattern != "RGGB":
            raise DataError(f"{self.scene_id}: unsupported CFA pattern {self.cfa_pattern}")


def read_manifest(path):
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: manifest must be a mapping")
    try:
        exposures = tuple(
            ExposureEntry(path=str(e["path"]), t=float(e["t"])) for e in doc["exposures"]
        )
        return SceneManifest(
            scene_id=str(doc["scene_id"]),
            exposures=exposures,
            reference_index=int(doc["reference_index"]),
            ground_truth=str(doc["ground_truth"]) if doc.get("ground_truth") else None,
            cfa_pattern=str(doc.get("cfa_pattern", "RGGB")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: incomplete or malformed manifest: {exc}") from exc


def write_manifest(path, manifest):
    doc = {
        "scene_id": manifest.scene_id,
        "cfa_pattern": manifest.cfa_pattern,
        "reference_index": manifest.reference_index,
        "ground_truth": manifest.ground_truth,
        "exposures": [{"path": e.path, "t": e.t} for e in manifest.exposures],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")


def read_dataset_file(path):
    """A dataset file lists one manifest path per line (relative to itself)."""
    path = Path(path)
    base = path.parent
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    return [base / ln for ln in lines if ln and not ln.startswith("#")]


@dataclass
class Scene:
    """One capture: M raw CFA exposures plus optional clean RGB LDRs and an
    HDR ground truth aligned to the reference exposure.

    Times are relative, normalized so the reference exposure has t = 1.
    """

    scene_id: str
    raws: list[RawImage]
    times: list[float]
    reference_index: int
    ldr_rgb: list[np.ndarray] | None = None
    ground_truth: np.ndarray | None = None
    pattern: CfaPattern = field(default=RGGB)

    @property
    def num_exposures(self):
        return len(self.raws)

    @property
    def image_shape(self):
        return self.raws[0].values.shape[1:]


def load_scene(manifest, base_dir=None):
    """Load a scene: LDR exposures in [0,1] (mosaiced to CFA), ground truth
    max-normalized to [0,1]."""
    base = Path(base_dir) if base_dir is not None else Path(".")
    ldr = [read_png16(base / e.path) for e in manifest.exposures]
    shape = ldr[0].shape
    for img, entry in zip(ldr, manifest.exposures):
        if img.shape != shape:
            raise DataError(
                f"{manifest.scene_id}: exposure {entry.path} has shape "
                f"{img.shape}, expected {shape}"
            )
    raws = [mosaic_rggb(img) for img in ldr]
    gt = None
    if manifest.ground_truth is not None:
        gt = read_pfm(base / manifest.ground_truth)
        if gt.shape != shape:
            raise DataError(f"{manifest.scene_id}: ground truth shape mismatch")
        gt = np.clip(gt, 0.0, None)
        peak = gt.max()
        if peak > 0:
            gt = gt / peak
    t_ref = manifest.exposures[manifest.reference_index].t
    times = [e.t / t_ref for e in manifest.exposures]
    return Scene(
        scene_id=manifest.scene_id,
        raws=raws,
        times=times,
        reference_index=manifest.reference_index,
        ldr_rgb=ldr,
        ground_truth=gt,
    )


# ---------------------------------------------------------------------------
# patches and augmentation


@dataclass
class PatchPair:
    """One training example: raw CFA patches (all exposures, identical
    coordinates), matching clean RGB patches when available, the ground
    truth patch, and the scene's relative exposure times."""

    raws: list[np.ndarray]  # M arrays (3,s,s), zero-masked
    target: np.ndarray  # (3,s,s)
    times: list[float]
    rgbs: list[np.ndarray] | None = None


def extract_patches(scene, size=50, stride=50):
    """Cut aligned non-overlapping patches; residual borders are dropped.

    Size and stride must be even so every patch keeps the RGGB phase.
    """
    if size % 2:
        raise ShapeError(f"extract_patches: size must be even, got {size}")
    if stride % 2:
        raise ShapeError(f"extract_patches: stride must be even, got {stride}")
    if scene.ground_truth is None:
        raise DataError(f"{scene.scene_id}: patches need a ground truth")
    h, w = scene.image_shape
    pairs = []
    for y0 in range(0, h - size + 1, stride):
        for x0 in range(0, w - size + 1, stride):
            sl = (slice(None), slice(y0, y0 + size), slice(x0, x0 + size))
            pairs.append(
                PatchPair(
                    raws=[r.values[sl] for r in scene.raws],
                    target=scene.ground_truth[sl],
                    times=list(scene.times),
                    rgbs=[im[sl] for im in scene.ldr_rgb] if scene.ldr_rgb else None,
                )
            )
    return pairs


def _dihedral(img, k):
    """The 8 square symmetries, applied to a (3,s,s) array; k in 0..7."""
    out = img
    if k >= 4:
        out = out[:, :, ::-1]
    return np.rot90(out, k % 4, axes=(1, 2))


def augment(pair, rng, pattern=RGGB):
    """Apply one random dihedral transform identically to all images of a
    pair, then re-mosaic so raw patches stay valid RGGB.

    Requires clean RGB patches (transforms move samples off their Bayer
    sites, so the raw cannot be transformed directly).
    """
    if pair.rgbs is None:
        raise DataError("augment: pair carries no RGB data to re-mosaic from")
    s = pair.target.shape[1]
    if pair.target.shape[2] != s:
        raise ShapeError("augment: patches must be square")
    k = int(rng.integers(8))
    rgbs = [np.ascontiguousarray(_dihedral(im, k)) for im in pair.rgbs]
    target = np.ascontiguousarray(_dihedral(pair.target, k))
    raws = [mosaic_rggb(im, pattern).values for im in rgbs]
    return PatchPair(raws=raws, target=target, times=list(pair.times), rgbs=rgbs)


# ---------------------------------------------------------------------------
# synthetic scenes


def _paint_moving_object(rng, radiance, motions, reference_index):
    """One bright rectangle painted at a per-exposure displaced position.

    Returns (per-exposure radiance frames, ground-truth radiance); the
    ground truth holds the object at its reference position. The object is
    bright enough to saturate long exposures.
    """
    _, h, w = radiance.shape
    oh = max(4, h // 2)
    ow = max(4, w // 2)
    margin = max(
        [abs(d.dy) for d in motions] + [abs(d.dx) for d in motions] + [1]
    )
    y0 = int(rng.integers(margin, h - oh - margin))
    x0 = int(rng.integers(margin, w - ow - margin))
    color = rng.uniform(0.5, 1.0, size=3)

    def painted(d):
        frame = radiance.copy()
        frame[:, y0 + d.dy : y0 + d.dy + oh, x0 + d.dx : x0 + d.dx + ow] = (
            color[:, None, None]
        )
        return frame

    return [painted(d) for d in motions], painted(motions[reference_index])


def render_ldr(radiance, exposure_time, gamma=GAMMA_RENDER):
    """Forward camera model: clip((X*t)**(1/gamma)) onto the 16-bit lattice."""
    lin = np.clip(np.asarray(radiance, dtype=np.float64) * float(exposure_time), 0.0, 1.0)
    return quantize16(np.power(lin, 1.0 / gamma))


def synthesize_radiance(rng, height, width, n_rects=6):
    """Procedural HDR radiance in (0,1]: smooth gradients plus random
    rectangles whose intensities span at least three decades."""
    ys = np.linspace(0.0, 1.0, height)[:, None]
    xs = np.linspace(0.0, 1.0, width)[None, :]
    base = np.empty((3, height, width))
    for c in range(3):
        a, b = rng.uniform(0.2, 1.0, size=2)
        fy, fx = rng.uniform(1.0, 3.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        base[c] = a * ys + b * xs + 0.5 * (1 + np.sin(2 * np.pi * (fy * ys + fx * xs) + phase))
    base = 1e-3 + 5e-3 * base / base.max()
    levels = np.logspace(-3, 0, max(n_rects, 2))
    for level in levels:
        rh = int(rng.integers(height // 8, height // 2))
        rw = int(rng.integers(width // 8, width // 2))
        y0 = int(rng.integers(0, height - rh))
        x0 = int(rng.integers(0, width - rw))
        color = level * rng.uniform(0.4, 1.0, size=3)
        base[:, y0 : y0 + rh, x0 : x0 + rw] = color[:, None, None]
    return base / base.max()


def synthesize_scene(rng, height, width, times=(0.25, 1.0, 4.0),
                     reference_index=1, motions=None, motion="global",
                     scene_id="synthetic", n_rects=6, gamma=GAMMA_RENDER):
    """Render a bracketed CFA stack from a procedural radiance map.

    ``motions`` gives one Displacement per exposure (relative to the
    reference, which should be (0,0)); the ground truth stays in the
    reference geometry. Long exposures saturate wherever X*t >= 1.

    ``motion`` selects how displacements act: "global" shifts the whole
    frame (camera translation), "object" shifts only a bright foreground
    rectangle against a static background (scene motion, which a global
    aligner cannot undo).
    """
    if height % 2 or width % 2:
        raise ShapeError(f"synthesize_scene: dimensions must be even, got {height}x{width}")
    if motion not in ("global", "object"):
        raise ValueError(f"synthesize_scene: unknown motion mode {motion!r}")
    times = [float(t) for t in times]
    if motions is None:
        motions = [Displacement(0, 0)] * len(times)
    if len(motions) != len(times):
        raise ShapeError("synthesize_scene: one motion per exposure required")
    radiance = synthesize_radiance(rng, height, width, n_rects=n_rects)
    if motion == "object":
        frames, radiance = _paint_moving_object(rng, radiance, motions,
                                                reference_index)
    else:
        frames = [
            radiance if (d.dy, d.dx) == (0, 0) else warp_translate(radiance, d)
            for d in motions
        ]
    ldr = [render_ldr(f, t, gamma) for f, t in zip(frames, times)]
    t_ref = times[reference_index]
    return Scene(
        scene_id=scene_id,
        raws=[mosaic_rggb(im) for im in ldr],
        times=[t / t_ref for t in times],
        reference_index=reference_index,
        ldr_rgb=ldr,
        ground_truth=radiance,
    )


def write_scene(scene, out_dir, times=None):
    """Write a scene's LDR stack, ground truth, and manifest to a directory.

    Returns the manifest path. ``times`` overrides the stored (normalized)
    times when the original absolute times should be recorded instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scene.ldr_rgb is None:
        raise DataError("write_scene: scene carries no LDR RGB images")
    entries = []
    ts = times if times is not None else scene.times
    for i, (img, t) in enumerate(zip(scene.ldr_rgb, ts)):
        name = f"exposure_{i}.png"
        write_png16(out / name, img)
        entries.append(ExposureEntry(path=name, t=float(t)))
    gt_name = None
    if scene.ground_truth is not None:
        gt_name = "ground_truth.pfm"
        write_pfm(out / gt_name, scene.ground_truth)
    manifest = SceneManifest(
        scene_id=scene.scene_id,
        exposures=tuple(entries),
        reference_index=scene.reference_index,
        ground_truth=gt_name,
    )
    manifest_path = out / "scene.yaml"
    write_manifest(manifest_path, manifest)
    return manifest_path
