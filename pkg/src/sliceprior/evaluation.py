"""Overlap, surface-distance and volume metrics, and Simpson's biplane rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .model import CLASS_NAMES, LA, LV
from .views import SliceMask
from .volume import GridMismatchError, LabelVolume

SIMPSON_DISKS = 20
CHORD_STEP = 0.25  # chord sampling step, pixels
CHORD_SMOOTH = 3.0  # Gaussian sigma, pixels; wide enough to average out the pixel staircase


class MissingStructureError(ValueError):
    pass


@dataclass
class StructureMetrics:
    dice: float
    assd: float
    mae_ml: float
    mae_pct: float


def _check_grids(pred: LabelVolume, ref: LabelVolume):
    if not pred.same_grid(ref):
        raise GridMismatchError(f"grids differ: {pred.grid_spec()} vs {ref.grid_spec()}")


def dice(pred: LabelVolume, ref: LabelVolume, cls: int) -> float:
    _check_grids(pred, ref)
    p = pred.labels == cls
    r = ref.labels == cls
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & r)) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices of mask voxels with a face neighbour outside the mask (grid edge counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _mean_nn(src: np.ndarray, dst: np.ndarray) -> float:
    d, _ = cKDTree(dst).query(src, k=1)
    return float(np.sum(d))


def assd(pred: LabelVolume, ref: LabelVolume, cls: int) -> float:
    """Average symmetric surface distance in millimetres."""
    _check_grids(pred, ref)
    sp = surface_voxels(pred.labels == cls) * pred.spacing
    sr = surface_voxels(ref.labels == cls) * ref.spacing
    if len(sp) == 0 or len(sr) == 0:
        raise MissingStructureError(f"class {CLASS_NAMES[cls]} is empty in "
                                    f"{'prediction' if len(sp) == 0 else 'reference'}")
    return (_mean_nn(sp, sr) + _mean_nn(sr, sp)) / (len(sp) + len(sr))


def volume_ml(vol: LabelVolume, cls: int) -> float:
    return int(np.count_nonzero(vol.labels == cls)) * vol.voxel_volume / 1000.0


def volume_mae(pred: LabelVolume, ref: LabelVolume, cls: int) -> tuple[float, float]:
    if not np.array_equal(pred.spacing, ref.spacing):
        raise GridMismatchError("volume comparison needs identical spacing")
    vp, vr = volume_ml(pred, cls), volume_ml(ref, cls)
    if vr == 0:
        raise MissingStructureError(f"reference volume of {CLASS_NAMES[cls]} is zero")
    err = abs(vp - vr)
    return err, 100.0 * err / vr


def structure_metrics(pred: LabelVolume, ref: LabelVolume, cls: int) -> StructureMetrics:
    try:
        dist = assd(pred, ref, cls)
    except MissingStructureError:
        dist = float("nan")
    ml, pct = volume_mae(pred, ref, cls)
    return StructureMetrics(dice(pred, ref, cls), dist, ml, pct)


# -- Simpson's biplane --------------------------------------------------------

_PARTNER = {LV: LA, LA: LV}


def _as_labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, SliceMask) else np.asarray(mask)


def _anchor_pixel(plane) -> np.ndarray:
    """(row, col) position of the plane anchor, i.e. the apex, in pixel units."""
    col = -plane.alphas[0] / (plane.alphas[1] - plane.alphas[0])
    row = -plane.betas[0] / (plane.betas[1] - plane.betas[0])
    return np.array([row, col])


def _fallback_base(mask, lab: np.ndarray, inside: np.ndarray, cls: int) -> np.ndarray:
    """Base estimate for a view that cuts past the mitral opening.

    If the partner chamber is visible, take the ``cls`` pixels closest to it
    (within half a pixel of the minimum distance).  Otherwise take the end of the
    chamber away from the apex for the LV, or towards it for the LA.
    """
    pix = np.argwhere(inside)
    partner = lab == _PARTNER[cls]
    if partner.any():
        d = ndimage.distance_transform_edt(~partner)[inside]
        return pix[d <= d.min() + 0.5].mean(axis=0)
    if not isinstance(mask, SliceMask):
        raise MissingStructureError(f"{CLASS_NAMES[_PARTNER[cls]]} absent and no plane to locate the apex")
    d = np.linalg.norm(pix - _anchor_pixel(mask.plane), axis=1)
    keep = d >= d.max() - 1.0 if cls == LV else d <= d.min() + 1.0
    return pix[keep].mean(axis=0)


def biplane_long_axis(mask, cls: int, fallback: bool = False):
    """Base midpoint, apex pixel and unit axis (base -> apex) in pixel (row, col) units.

    The base is the centroid of ``cls`` pixels that share an edge with the
    partner chamber (LA for the LV and vice versa).  A view without such an
    interface is an error unless ``fallback`` is set; see ``_fallback_base``.
    """
    lab = _as_labels(mask)
    inside = lab == cls
    if not inside.any():
        raise MissingStructureError(f"class {CLASS_NAMES[cls]} absent from the view")
    partner = np.pad(lab == _PARTNER[cls], 1, constant_values=False)
    touches = (partner[:-2, 1:-1] | partner[2:, 1:-1] | partner[1:-1, :-2] | partner[1:-1, 2:])
    iface = np.argwhere(inside & touches)
    if len(iface):
        base = iface.mean(axis=0)
    elif fallback:
        base = _fallback_base(mask, lab, inside, cls)
    else:
        raise MissingStructureError(f"no {CLASS_NAMES[cls]}-{CLASS_NAMES[_PARTNER[cls]]} interface in the view")
    pix = np.argwhere(inside)
    d2 = ((pix - base) ** 2).sum(axis=1)
    apex = pix[int(np.argmax(d2))].astype(np.float64)
    axis = apex - base
    n = np.linalg.norm(axis)
    if n == 0:
        raise MissingStructureError("degenerate long axis")
    return base, apex, axis / n


def _chord_lengths(lab: np.ndarray, cls: int, start, axis, positions) -> np.ndarray:
    """Extent (pixels) of ``cls`` along lines perpendicular to ``axis``.

    The class indicator is smoothed with a Gaussian and each
    chord runs between the outermost 0.5 crossings, located by linear
    interpolation between samples.  This puts the extreme points on the
    pixel edges with sub-pixel accuracy instead of snapping to pixel centres.
    """
    soft = ndimage.gaussian_filter((lab == cls).astype(np.float64), CHORD_SMOOTH, mode="constant")
    perp = np.array([-axis[1], axis[0]])
    reach = float(np.hypot(*lab.shape))
    taus = np.arange(-reach, reach + CHORD_STEP, CHORD_STEP)
    centres = start[None, :] + positions[:, None] * axis[None, :]
    pts = centres[:, None, :] + taus[None, :, None] * perp[None, None, :]
    # pixel (r, c) has its centre at (r, c) in these coordinates
    vals = ndimage.map_coordinates(soft, [pts[..., 0].ravel(), pts[..., 1].ravel()],
                                   order=1, mode="constant").reshape(pts.shape[:2]) - 0.5
    out = np.zeros(len(positions))
    for k in range(len(positions)):
        above = np.flatnonzero(vals[k] >= 0)
        if len(above) == 0:
            continue
        i0, i1 = above[0], above[-1]
        lo = taus[i0]
        if i0 > 0:
            f = vals[k, i0 - 1] / (vals[k, i0 - 1] - vals[k, i0])
            lo = taus[i0 - 1] + f * CHORD_STEP
        hi = taus[i1]
        if i1 < len(taus) - 1:
            f = vals[k, i1] / (vals[k, i1] - vals[k, i1 + 1])
            hi = taus[i1] + f * CHORD_STEP
        out[k] = hi - lo
    return out


def _edge_axis(mask, cls, fallback):
    """Long axis stretched half a pixel at both ends to the pixel edges."""
    base, apex, axis = biplane_long_axis(mask, cls, fallback)
    start = base - 0.5 * axis
    length = float(np.linalg.norm(apex - base)) + 1.0
    return start, axis, length


def simpson_biplane(a2c, a4c, cls: int, spacing_a2c: float | None = None,
                    spacing_a4c: float | None = None, n_disks: int = SIMPSON_DISKS,
                    fallback: bool = False) -> float:
    """Method-of-disks volume (mL) from two orthogonal apical masks.

    The shorter of the two long axes is cut into ``n_disks`` equal segments
    and each disk takes its diameters at the apical end of its segment
    (chords at ``k * dl`` from the base, ``k = 1..n_disks``).  ``fallback``
    is passed on to ``biplane_long_axis``.
    """
    sa = spacing_a2c if spacing_a2c is not None else a2c.pixel_spacing
    sb = spacing_a4c if spacing_a4c is not None else a4c.pixel_spacing
    la, lb = _as_labels(a2c), _as_labels(a4c)
    start_a, axis_a, len_a = _edge_axis(a2c, cls, fallback)
    start_b, axis_b, len_b = _edge_axis(a4c, cls, fallback)
    length_mm = min(len_a * sa, len_b * sb)
    step_mm = length_mm / n_disks
    pos_mm = np.arange(1, n_disks + 1) * step_mm
    da = _chord_lengths(la, cls, start_a, axis_a, pos_mm / sa) * sa
    db = _chord_lengths(lb, cls, start_b, axis_b, pos_mm / sb) * sb
    return float(np.sum(np.pi / 4.0 * da * db * step_mm) / 1000.0)
