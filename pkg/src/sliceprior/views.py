"""Landmarks, apical view planes, slice rendering and the perturbed-view protocol."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geom
from .geometry import DegenerateGeometryError, RigidParams, ViewPlane
from .model import CLASS_NAMES, LA, LV, RA, RV
from .volume import LabelVolume

VIEW_NAMES = ("A2C", "A3C", "A4C", "A5C")
IMAGE_SIZE = 256
EXTENT_FACTOR = 1.5
LONG_AXIS_RANGE = (-0.1, 0.9)
VIEW_ROTATION_DEG = {"A3C": 45.0, "A2C": 90.0}
A5C_TILT_DEG = 5.0
# sign chosen so the long axis leans towards the right heart, centring it
IN_PLANE_DEG = -10.0
CHAMBERS = (LA, LV, RA, RV)


class MissingClassError(ValueError):
    pass


@dataclass
class Landmarks:
    coms: dict[int, np.ndarray]  # class id -> centre of mass (mm)
    apex: np.ndarray

    def copy(self) -> "Landmarks":
        return Landmarks({k: v.copy() for k, v in self.coms.items()}, self.apex.copy())

    def to_dict(self) -> dict:
        return {"apex": self.apex.tolist(),
                "coms": {CLASS_NAMES[k]: v.tolist() for k, v in sorted(self.coms.items())}}

    @classmethod
    def from_dict(cls, d) -> "Landmarks":
        coms = {CLASS_NAMES.index(k): np.asarray(v, dtype=np.float64) for k, v in d["coms"].items()}
        return cls(coms, np.asarray(d["apex"], dtype=np.float64))


@dataclass
class SliceMask:
    labels: np.ndarray  # (height, width) uint8
    plane: ViewPlane  # pose assumed at reconstruction time
    view_name: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.view_name not in VIEW_NAMES:
            raise ValueError(f"unknown view {self.view_name!r}")

    @property
    def pixel_spacing(self) -> float:
        return float(self.plane.alphas[1] - self.plane.alphas[0])


def compute_landmarks(vol: LabelVolume) -> Landmarks:
    """Chamber centres of mass and the apex (LV voxel farthest from the LA CoM)."""
    coms = {}
    for cls in CHAMBERS:
        pts = vol.class_centers(cls)
        if len(pts) == 0:
            raise MissingClassError(f"class {CLASS_NAMES[cls]} is absent from the volume")
        coms[cls] = pts.mean(axis=0)
    # argwhere walks in C order; sort to x-fastest linear order so ties go to
    # the lowest linear voxel index
    idx = np.argwhere(vol.labels == LV)
    order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
    idx = idx[order]
    pts = vol.origin + (idx + 0.5) * vol.spacing
    d2 = ((pts - coms[LA]) ** 2).sum(axis=1)
    apex = pts[int(np.argmax(d2))]
    return Landmarks(coms, apex)


def _grid(extent: float, size: int = IMAGE_SIZE):
    step = extent / size
    alphas = (np.arange(size) + 0.5 - size / 2) * step
    lo = LONG_AXIS_RANGE[0] * extent
    betas = lo + (np.arange(size) + 0.5) * step
    return alphas, betas


def canonical_views(lm: Landmarks, size: int = IMAGE_SIZE) -> dict[str, ViewPlane]:
    """A2C/A3C/A4C/A5C planes anchored at the apex."""
    a = lm.apex
    long_axis = lm.coms[LV] - a
    if np.linalg.norm(long_axis) < 1e-9:
        raise DegenerateGeometryError("apex coincides with the LV centre of mass")
    ev = long_axis / np.linalg.norm(long_axis)
    eu = geom.project_orthogonal(lm.coms[RA] - a, ev)
    extent = EXTENT_FACTOR * float(np.linalg.norm(a - lm.coms[LA]))
    alphas, betas = _grid(extent, size)

    def in_plane(u, v, deg):
        n = np.cross(u, v)
        ang = np.deg2rad(deg)
        return geom.rotate_about(u, n, ang), geom.rotate_about(v, n, ang)

    planes = {}
    for name, deg in VIEW_ROTATION_DEG.items():
        planes[name] = ViewPlane(a, geom.rotate_about(eu, ev, np.deg2rad(deg)), ev, alphas, betas)
    u4, v4 = in_plane(eu, ev, IN_PLANE_DEG)
    planes["A4C"] = ViewPlane(a, u4, v4, alphas, betas)
    # tilt first, then the same in-plane rotation
    v5 = geom.rotate_about(ev, eu, np.deg2rad(A5C_TILT_DEG))
    u5, v5 = in_plane(eu, v5, IN_PLANE_DEG)
    planes["A5C"] = ViewPlane(a, u5, v5, alphas, betas)
    return {name: planes[name] for name in VIEW_NAMES}


def render_slice(vol: LabelVolume, plane: ViewPlane, rigid: RigidParams | None = None,
                 view_name: str = "A4C") -> SliceMask:
    pts = geom.plane_grid(plane, rigid)
    return SliceMask(vol.lookup(pts), plane, view_name)


def perturb_landmarks(lm: Landmarks, sigma: float, rng) -> Landmarks:
    """Add i.i.d. N(0, sigma^2) noise to every landmark component."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = lm.copy()
    if sigma == 0:
        return out
    for k in sorted(out.coms):
        out.coms[k] = out.coms[k] + rng.normal(0.0, sigma, 3)
    out.apex = out.apex + rng.normal(0.0, sigma, 3)
    return out


def replace_pose(acquired: ViewPlane, assumed: ViewPlane) -> ViewPlane:
    """Keep the acquired pixel grid but swap in the assumed anchor and basis."""
    return acquired.with_pose(assumed.anchor, assumed.basis_u, assumed.basis_v)


@dataclass
class SliceBundle:
    """Rendered views of one case with assumed and true poses."""

    case_id: str
    masks: dict[str, SliceMask]
    true_planes: dict[str, ViewPlane]
    sigma: float = 0.0
    seed: int | None = None
    anchored_view: str = "A4C"
    landmarks: dict = field(default_factory=dict)
    class_names: tuple[str, ...] = CLASS_NAMES

    def subset(self, views) -> "SliceBundle":
        views = list(views)
        return SliceBundle(self.case_id, {v: self.masks[v] for v in views},
                           {v: self.true_planes[v] for v in views}, self.sigma, self.seed,
                           self.anchored_view, self.landmarks, self.class_names)


def acquire_views(vol: LabelVolume, case_id: str = "case", sigma: float = 0.0, seed: int = 0,
                  anchored_view: str = "A4C", size: int = IMAGE_SIZE) -> SliceBundle:
    """Render the four apical views.

    With ``sigma > 0`` each view is acquired from independently perturbed
    landmarks, and its stored pose is then reset to the ideal canonical
    pose.  The anchored view keeps its true (perturbed) pose.
    """
    lm = compute_landmarks(vol)
    ideal = canonical_views(lm, size)
    rng = np.random.default_rng(seed)
    masks, true_planes = {}, {}
    for name in VIEW_NAMES:
        if sigma > 0:
            noisy = perturb_landmarks(lm, sigma, rng)
            acquired = canonical_views(noisy, size)[name]
        else:
            acquired = ideal[name]
        labels = render_slice(vol, acquired).labels
        assumed = acquired if name == anchored_view else replace_pose(acquired, ideal[name])
        masks[name] = SliceMask(labels, assumed, name)
        true_planes[name] = acquired
    return SliceBundle(case_id, masks, true_planes, sigma, seed, anchored_view, lm.to_dict())
