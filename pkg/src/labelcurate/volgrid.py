"""
Voxel grids with physical geometry, and the standardization steps applied to
every incoming CT volume and label map: RAS reorientation, isotropic
resampling, affine simplification and regional Gaussian blurring.

Grids are immutable. Every operation returns a new grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import GridMismatch, InvalidInterpolation, InvalidOrientation

__all__ = [
    "AffineSummary",
    "LabelGrid",
    "ScalarGrid",
    "axis_directions",
    "blur_region",
    "check_same_geometry",
    "gaussian_kernel",
    "parse_orientation",
    "reorient_to_ras",
    "resample_isotropic",
    "simplify_affine",
]

# letter -> (world axis, direction); world frame is RAS+
_LETTERS = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


def parse_orientation(code: str) -> list[tuple[int, int]]:
    """Return ``(world_axis, sign)`` for each voxel axis of an axis code like ``"LPS"``."""
    if not isinstance(code, str) or len(code) != 3:
        raise InvalidOrientation(f"orientation code must be 3 letters, got {code!r}")
    out = []
    for ch in code.upper():
        if ch not in _LETTERS:
            raise InvalidOrientation(f"invalid axis letter {ch!r} in {code!r}")
        out.append(_LETTERS[ch])
    if len({ax for ax, _ in out}) != 3:
        raise InvalidOrientation(f"orientation {code!r} repeats a world axis")
    return out


def axis_directions(code: str) -> np.ndarray:
    """3x3 matrix whose column j is the world unit vector of voxel axis j."""
    mat = np.zeros((3, 3))
    for j, (ax, sign) in enumerate(parse_orientation(code)):
        mat[ax, j] = sign
    return mat


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = "RAS"
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    _dtype = None

    def __post_init__(self):
        data = np.array(self.data, dtype=self._dtype, copy=True)
        if data.ndim != 3:
            raise ValueError(f"grid data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"grid dims must be >= 1, got {data.shape}")
        data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have 3 components, got {self.origin}")
        parse_orientation(self.orientation)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", self.orientation.upper())

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing)

    def diagonal_mm(self) -> float:
        """Length of the image bounding-box diagonal, in mm."""
        return float(np.sqrt(np.sum(self.extent_mm**2)))

    def with_data(self, data):
        return replace(self, data=data)

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and self.orientation == other.orientation
        )

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.orientation == other.orientation
            and self.origin == other.origin
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScalarGrid(_Grid):
    """Intensity volume (HU). Values are held as float32."""

    _dtype = np.float32

    @property
    def values(self) -> np.ndarray:
        return self.data


@dataclass(frozen=True, eq=False)
class LabelGrid(_Grid):
    """Structure-label volume. Values are uint16 label indices, 0 = background."""

    _dtype = np.uint16

    @property
    def labels(self) -> np.ndarray:
        return self.data

    def mask(self, label) -> np.ndarray:
        if np.ndim(label) == 0:
            return self.data == label
        return np.isin(self.data, np.asarray(label))

    def present_labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True)
class AffineSummary:
    scale: tuple[float, float, float]
    shear: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_removed: bool = True
    rotation_removed: bool = True


def check_same_geometry(*grids) -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise GridMismatch(
                f"grid geometry differs: dims {first.dims} vs {g.dims}, "
                f"spacing {first.spacing} vs {g.spacing}, "
                f"orientation {first.orientation} vs {g.orientation}"
            )


def reorient_to_ras(grid):
    """Permute and flip voxel axes so that they run along R, A, S."""
    axes = parse_orientation(grid.orientation)
    if grid.orientation == "RAS":
        return grid
    perm = [0, 0, 0]
    for j, (ax, _) in enumerate(axes):
        perm[ax] = j
    data = np.transpose(grid.data, perm)
    flips = tuple(w for w in range(3) if axes[perm[w]][1] < 0)
    if flips:
        data = np.flip(data, axis=flips)

    # world position of the old voxel that becomes the new (0, 0, 0)
    origin = np.asarray(grid.origin, dtype=float)
    for j, (ax, sign) in enumerate(axes):
        if sign < 0:
            origin[ax] += sign * (grid.dims[j] - 1) * grid.spacing[j]
    spacing = tuple(grid.spacing[perm[w]] for w in range(3))
    return replace(grid, data=np.ascontiguousarray(data), spacing=spacing,
                   orientation="RAS", origin=tuple(origin))


def _out_dim(n: int, spacing: float, target: float) -> int:
    # tolerance keeps 4 * 3.0 / 1.5 from landing on 8.000000001
    return max(1, math.ceil(n * spacing / target - 1e-9))


def _sample_nearest(data, axis, coords):
    n = data.shape[axis]
    idx = np.clip(np.ceil(coords - 0.5), 0, n - 1).astype(np.intp)
    return np.take(data, idx, axis=axis)


def _sample_linear(data, axis, coords):
    n = data.shape[axis]
    u = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(u).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = u - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(data, i0, axis=axis) * (1.0 - w) + np.take(data, i1, axis=axis) * w


def resample_isotropic(grid, target_spacing: float = 1.5, mode: str = "nearest"):
    """
    Resample onto an isotropic grid with voxel size ``target_spacing``.

    Output voxel ``j`` along an axis sits at ``origin + j * target_spacing``
    and samples the input at continuous index ``j * target_spacing / spacing``.
    Samples beyond the last input voxel take the edge value. Nearest mode
    resolves exact half-way positions toward the lower index.
    """
    if mode not in ("nearest", "trilinear"):
        raise InvalidInterpolation(f"unknown interpolation mode {mode!r}")
    if mode == "trilinear" and isinstance(grid, LabelGrid):
        raise InvalidInterpolation("label grids must be resampled with nearest mode")
    t = float(target_spacing)
    if t <= 0:
        raise ValueError("target spacing must be positive")

    data = grid.data if mode == "nearest" else grid.data.astype(np.float64)
    sample = _sample_nearest if mode == "nearest" else _sample_linear
    for axis in range(3):
        n, s = grid.dims[axis], grid.spacing[axis]
        if s == t:
            continue
        coords = np.arange(_out_dim(n, s, t)) * (t / s)
        data = sample(data, axis, coords)
    return replace(grid, data=data, spacing=(t, t, t))


def simplify_affine(grid):
    """Drop translation (and rotation, already absorbed by reorientation) from the affine."""
    summary = AffineSummary(scale=tuple(grid.spacing))
    if grid.origin == (0.0, 0.0, 0.0):
        return grid, summary
    return replace(grid, origin=(0.0, 0.0, 0.0)), summary


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian truncated at ``ceil(3 * sigma)``."""
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_region(img: ScalarGrid, region, sigma: float = 5.0) -> ScalarGrid:
    """Replace voxels inside ``region`` by their Gaussian-smoothed value (e.g. facial de-identification)."""
    check_same_geometry(img, region)
    inside = np.asarray(region.data) != 0
    if not inside.any():
        return img
    kernel = gaussian_kernel(sigma)
    smooth = img.data.astype(np.float64)
    for axis in range(3):
        smooth = ndimage.correlate1d(smooth, kernel, axis=axis, mode="reflect")
    out = np.where(inside, smooth.astype(np.float32), img.data)
    return img.with_data(out)
