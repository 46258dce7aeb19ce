"""CT volume and patch primitives.

Axis convention: in-memory volumes are indexed (row, col, slice); on disk
they are stored slice-major (see volume_io). Patches come in two
geometries: 65x65x5 sub-volumes for calcium scoring and 161x161x3
neighbor-slice stacks for the risk networks, which augmentation turns
into 224x224x3 network inputs.
"""

from dataclasses import dataclass, field

import numpy as np

HU_MIN = -1024
HU_MAX = 3071

SCORING_PATCH_SIZE = 65
SCORING_PATCH_SLICES = 5
NETWORK_PATCH_SIZE = 161
NETWORK_PATCH_CHANNELS = 3
NETWORK_INPUT_SIZE = 224


@dataclass(frozen=True)
class CtVolume:
    """3D grid of HU values with physical spacing.

    voxels: integer array of shape (n_rows, n_cols, n_slices)
    spacing: (x, y, z) voxel size in mm
    id: subject identifier
    kvp: acquisition tube voltage metadata (LDCT screening is 120-140 kVp)
    """

    voxels: np.ndarray
    spacing: tuple
    id: str
    kvp: float = 120.0

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {vox.shape}")
        if not np.issubdtype(vox.dtype, np.integer):
            raise ValueError(f"HU voxels must be integer, got dtype {vox.dtype}")
        if vox.shape[2] < SCORING_PATCH_SLICES:
            raise ValueError(
                f"volume needs at least {SCORING_PATCH_SLICES} slices, got {vox.shape[2]}"
            )
        if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise ValueError(
                f"HU values outside [{HU_MIN}, {HU_MAX}]: "
                f"range [{vox.min()}, {vox.max()}]"
            )
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be > 0, got {spacing}")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class ScoringPatch:
    """65x65x5 HU sub-volume (row, col, slice) used for calcium scoring."""

    voxels: np.ndarray
    spacing: tuple

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels)
        expected = (SCORING_PATCH_SIZE, SCORING_PATCH_SIZE, SCORING_PATCH_SLICES)
        if vox.shape != expected:
            raise ValueError(f"scoring patch must be {expected}, got {vox.shape}")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


@dataclass(frozen=True)
class PatchStack:
    """H x W x C stack of real-valued pixels fed to the risk networks.

    provenance records (subject id, center row, center col, center slice)
    so batches keep a stable, auditable ordering.
    """

    pixels: np.ndarray
    provenance: tuple = field(default=("", -1, -1, -1))

    def __post_init__(self):
        pix = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if pix.ndim != 3:
            raise ValueError(f"patch stack must be H x W x C, got shape {pix.shape}")
        pix.flags.writeable = False
        object.__setattr__(self, "pixels", pix)

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _check_window(center: int, half: int, n: int, axis: str):
    if center - half < 0 or center + half >= n:
        raise ValueError(
            f"{axis}-window [{center - half}, {center + half}] out of bounds "
            f"for axis of length {n}"
        )


def extract_scoring_patch(volume: CtVolume, center, center_slice: int,
                          boundary: str = "reject") -> ScoringPatch:
    """Extract the 65x65x5 scoring window centered at (row, col, slice).

    The window spans slices [center_slice-2, center_slice+2]. With the
    default "reject" policy the whole window must lie inside the volume;
    with "clamp", out-of-range slice indices are replicated from the edge
    (in-plane bounds are always enforced).
    """
    if boundary not in ("reject", "clamp"):
        raise ValueError(f"unknown boundary policy {boundary!r}")
    row, col = int(center[0]), int(center[1])
    center_slice = int(center_slice)
    nr, nc, ns = volume.voxels.shape
    half = SCORING_PATCH_SIZE // 2
    _check_window(row, half, nr, "row")
    _check_window(col, half, nc, "col")
    zhalf = SCORING_PATCH_SLICES // 2
    if boundary == "reject":
        _check_window(center_slice, zhalf, ns, "slice")
        zs = np.arange(center_slice - zhalf, center_slice + zhalf + 1)
    else:
        if not 0 <= center_slice < ns:
            raise ValueError(f"slice index {center_slice} outside [0, {ns - 1}]")
        zs = np.clip(np.arange(center_slice - zhalf, center_slice + zhalf + 1), 0, ns - 1)
    window = volume.voxels[row - half:row + half + 1, col - half:col + half + 1, zs]
    return ScoringPatch(voxels=window.copy(), spacing=volume.spacing)


def extract_network_patch(volume: CtVolume, center, slice_index: int,
                          boundary: str = "clamp") -> PatchStack:
    """Extract the 161x161x3 network patch: three neighboring slices
    cropped to the window centered at (row, col).

    Channels 0/1/2 hold slices (slice_index-1, slice_index, slice_index+1).
    The default "clamp" policy replicates the first/last slice so edge
    slices remain usable; "reject" raises instead.
    """
    if boundary not in ("reject", "clamp"):
        raise ValueError(f"unknown boundary policy {boundary!r}")
    row, col = int(center[0]), int(center[1])
    slice_index = int(slice_index)
    nr, nc, ns = volume.voxels.shape
    half = NETWORK_PATCH_SIZE // 2
    _check_window(row, half, nr, "row")
    _check_window(col, half, nc, "col")
    if boundary == "reject":
        _check_window(slice_index, 1, ns, "slice")
        zs = np.arange(slice_index - 1, slice_index + 2)
    else:
        if not 0 <= slice_index < ns:
            raise ValueError(f"slice index {slice_index} outside [0, {ns - 1}]")
        zs = np.clip(np.arange(slice_index - 1, slice_index + 2), 0, ns - 1)
    window = volume.voxels[row - half:row + half + 1, col - half:col + half + 1, zs]
    return PatchStack(
        pixels=window.astype(np.float64),
        provenance=(volume.id, row, col, slice_index),
    )


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the align-corners=false (half-pixel centers)
    convention, applied identically to every channel."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    in_h, in_w = img.shape[:2]

    def _axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, rf = _axis_coords(in_h, out_h)
    c0, c1, cf = _axis_coords(in_w, out_w)
    rows = img[r0] * (1.0 - rf)[:, None, None] + img[r1] * rf[:, None, None]
    out = rows[:, c0] * (1.0 - cf)[None, :, None] + rows[:, c1] * cf[None, :, None]
    return out[:, :, 0] if squeeze else out


def augment(patch: PatchStack, rng: np.random.Generator,
            scale_range=(0.6, 0.8), out_size: int = NETWORK_INPUT_SIZE) -> PatchStack:
    """Random crop-and-rescale augmentation of a raw 161x161x3 patch.

    Draws a scaling ratio s uniformly from scale_range, crops a
    floor(161*s)-square window at a uniform in-bounds offset, and
    bilinearly resizes it to out_size (224 for the standard networks).
    The same crop is applied to all three channels.
    """
    expected = (NETWORK_PATCH_SIZE, NETWORK_PATCH_SIZE, NETWORK_PATCH_CHANNELS)
    if patch.pixels.shape != expected:
        raise ValueError(f"augment expects shape {expected}, got {patch.pixels.shape}")
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
    s = rng.uniform(lo, hi)
    side = int(np.floor(NETWORK_PATCH_SIZE * s))
    max_off = NETWORK_PATCH_SIZE - side
    off_r = int(rng.integers(0, max_off + 1))
    off_c = int(rng.integers(0, max_off + 1))
    crop = patch.pixels[off_r:off_r + side, off_c:off_c + side, :]
    resized = resize_bilinear(crop, out_size, out_size)
    return PatchStack(pixels=resized, provenance=patch.provenance)


EVAL_SCALE = 0.7                 # midpoint of the augmentation scale range
EVAL_SCALES = (0.6, 0.7, 0.8)    # deterministic multi-scale evaluation set


def center_view(patch: PatchStack, out_size: int = NETWORK_INPUT_SIZE,
                scale: float = EVAL_SCALE) -> PatchStack:
    """Deterministic evaluation-time transform: central crop at the given
    scale fraction, resized to the network input size.

    The default scale is the midpoint of the training augmentation's
    scale range; feeding the full patch instead would present objects
    ~30% smaller than anything the network saw during training.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    side = int(np.floor(NETWORK_PATCH_SIZE * scale))
    off = (NETWORK_PATCH_SIZE - side) // 2
    crop = patch.pixels[off:off + side, off:off + side, :]
    resized = resize_bilinear(crop, out_size, out_size)
    return PatchStack(pixels=resized, provenance=patch.provenance)


def _as_channel_vector(value, channels: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.full(channels, arr[0])
    if arr.size != channels:
        raise ValueError(f"{name} must be scalar or length-{channels}, got size {arr.size}")
    return arr


def normalize_patch(patch: PatchStack, mean, std) -> PatchStack:
    """Standardize per channel: out = (in - mean[c]) / std[c]."""
    mean = _as_channel_vector(mean, patch.channels, "mean")
    std = _as_channel_vector(std, patch.channels, "std")
    if np.any(std <= 0):
        raise ValueError(f"std components must be > 0, got {std.tolist()}")
    return PatchStack(pixels=(patch.pixels - mean) / std, provenance=patch.provenance)


def denormalize_patch(patch: PatchStack, mean, std) -> PatchStack:
    """Inverse of normalize_patch for the same (mean, std)."""
    mean = _as_channel_vector(mean, patch.channels, "mean")
    std = _as_channel_vector(std, patch.channels, "std")
    if np.any(std <= 0):
        raise ValueError(f"std components must be > 0, got {std.tolist()}")
    return PatchStack(pixels=patch.pixels * std + mean, provenance=patch.provenance)


def channel_stats(patches) -> tuple:
    """Per-channel mean and standard deviation pooled over a collection of
    patches (the training split of a fold, by convention)."""
    patches = list(patches)
    if not patches:
        raise ValueError("channel_stats needs at least one patch")
    stacked = np.stack([p.pixels for p in patches])
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    if np.any(std <= 0):
        raise ValueError("degenerate channel (zero variance) in stats computation")
    return mean, std
