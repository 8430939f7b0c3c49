"""Procedural four-chamber heart phantoms.

Shapes are built in a heart frame (u, v, w) where w runs from the apex
towards the base.  The LV blood pool is a perturbed ellipsoid truncated at
a base plane, the myocardium is a constant-thickness shell around it below
that plane, and a thin cap above the plane (the mitral opening) joins the
pool to the left atrium.  The right heart sits on the +u side.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import rodrigues
from .model import BACKGROUND, LA, LV, MYO, RA, RV
from .volume import LabelVolume

Range = tuple[float, float]


class PhantomBoundsError(ValueError):
    pass


@dataclass
class PhantomParams:
    lv_semi_axes: tuple[Range, Range, Range] = ((18.0, 25.0), (18.0, 25.0), (34.0, 44.0))
    base_cut: Range = (0.45, 0.6)  # base plane height as a fraction of the LV long semi-axis
    myo_thickness: Range = (7.0, 10.0)
    la_semi_axes: tuple[Range, Range, Range] = ((16.0, 23.0), (16.0, 23.0), (16.0, 23.0))
    rv_semi_axes: tuple[Range, Range, Range] = ((13.0, 19.0), (22.0, 30.0), (28.0, 38.0))
    ra_semi_axes: tuple[Range, Range, Range] = ((15.0, 21.0), (15.0, 21.0), (16.0, 22.0))
    rv_overlap: Range = (0.35, 0.55)  # fraction of the RV u semi-axis pushed into the LV wall
    la_drop: Range = (0.35, 0.5)  # LA centre above base plane, fraction of LA w semi-axis
    bump_amplitude: Range = (0.04, 0.12)
    rotation_deg: float = 12.0  # per-axis jitter of the heart orientation
    translation_mm: float = 4.0
    base_orientation_deg: tuple[float, float, float] = (25.0, -20.0, 35.0)
    grid: int = 96
    spacing: float = 2.0
    max_bump: float = 0.15
    enforce_topology: bool = True  # redraw shapes until the contact graph is the canonical one

    def validate(self):
        ranges = [*self.lv_semi_axes, self.base_cut, self.myo_thickness, *self.la_semi_axes,
                  *self.rv_semi_axes, *self.ra_semi_axes, self.rv_overlap, self.la_drop]
        for lo, hi in ranges:
            if not (0 < lo <= hi):
                raise ValueError(f"invalid range ({lo}, {hi})")
        lo, hi = self.bump_amplitude
        if not (0 <= lo <= hi <= self.max_bump):
            raise ValueError("bump amplitude must lie in [0, max_bump]")
        if self.myo_thickness[1] >= min(r[0] for r in self.lv_semi_axes):
            raise ValueError("myocardial thickness must be below the smallest LV semi-axis")
        if self.grid < 8 or self.spacing <= 0:
            raise ValueError("grid must be >= 8 voxels with positive spacing")

    @classmethod
    def fixed(cls, **values) -> "PhantomParams":
        """Params with every range collapsed to a single value (no randomness)."""
        p = cls(bump_amplitude=(0.0, 0.0), rotation_deg=0.0, translation_mm=0.0, enforce_topology=False)
        for key, val in values.items():
            if isinstance(val, (int, float)) and not isinstance(val, bool) and key not in (
                    "rotation_deg", "translation_mm", "grid", "spacing", "max_bump"):
                val = (float(val), float(val))
            elif isinstance(val, tuple) and val and isinstance(val[0], (int, float)) and key.endswith("axes"):
                val = tuple((float(x), float(x)) for x in val)
            setattr(p, key, val)
        return p


def _fibonacci_sphere(n: int = 1024) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _harmonics(d: np.ndarray) -> np.ndarray:
    """Low-order polynomial basis on the unit sphere (degrees 2 and 3)."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        x * y, y * z, x * z, x * x - y * y, 3 * z * z - 1,
        x * (5 * z * z - 1), y * (5 * z * z - 1), z * (5 * z * z - 3),
        x * (x * x - 3 * y * y), y * (3 * x * x - y * y),
    ], axis=-1)


@dataclass
class Bumps:
    coeffs: np.ndarray

    @classmethod
    def sample(cls, rng, amplitude: float, cap: float) -> "Bumps":
        c = rng.normal(size=10)
        peak = np.abs(_harmonics(_fibonacci_sphere()) @ c).max()
        c *= min(amplitude, cap) / peak if peak > 0 else 0.0
        return cls(c)

    def __call__(self, d: np.ndarray) -> np.ndarray:
        return _harmonics(d) @ self.coeffs


@dataclass
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    bumps: Bumps | None = None

    def inside(self, p: np.ndarray) -> np.ndarray:
        q = (p - self.center) / self.semi_axes
        r = np.linalg.norm(q, axis=-1)
        if self.bumps is None:
            return r <= 1.0
        d = q / np.maximum(r, 1e-12)[..., None]
        return r <= 1.0 + self.bumps(d)


@dataclass
class HeartGeometry:
    """Sampled shape parameters for one phantom (heart frame, mm)."""

    rotation: np.ndarray
    offset: np.ndarray  # world position of the heart-frame origin
    lv: Ellipsoid
    base_height: float
    myo_thickness: float
    la: Ellipsoid
    rv: Ellipsoid
    ra: Ellipsoid
    extra: dict = field(default_factory=dict)


def _uniform(rng, r: Range) -> float:
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_geometry(params: PhantomParams, rng) -> HeartGeometry:
    u = lambda r: _uniform(rng, r)  # noqa: E731
    amp = lambda: u(params.bump_amplitude)  # noqa: E731
    bumps = lambda: Bumps.sample(rng, amp(), params.max_bump) if params.bump_amplitude[1] > 0 else None  # noqa: E731

    lv_axes = np.array([u(r) for r in params.lv_semi_axes])
    h = u(params.base_cut) * lv_axes[2]
    t = u(params.myo_thickness)
    lv = Ellipsoid(np.zeros(3), lv_axes, bumps())

    la_axes = np.array([u(r) for r in params.la_semi_axes])
    la = Ellipsoid(np.array([0.0, 0.0, h + u(params.la_drop) * la_axes[2]]), la_axes, bumps())

    rv_axes = np.array([u(r) for r in params.rv_semi_axes])
    rv_u = lv_axes[0] + t + (1.0 - u(params.rv_overlap)) * rv_axes[0]
    rv_w = 0.5 * (h - lv_axes[2]) + 0.15 * rv_axes[2]
    rv = Ellipsoid(np.array([rv_u, 0.0, rv_w]), rv_axes, bumps())

    ra_axes = np.array([u(r) for r in params.ra_semi_axes])
    ra = Ellipsoid(np.array([rv_u, 0.0, h + 0.6 * ra_axes[2]]), ra_axes, bumps())

    base = np.deg2rad(params.base_orientation_deg)
    rot = rodrigues([base[0], 0, 0]) @ rodrigues([0, base[1], 0]) @ rodrigues([0, 0, base[2]])
    if params.rotation_deg:
        rot = rodrigues(np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg, 3))) @ rot

    # centre the nominal bounding box of the heart on the world origin
    lo = np.array([-(lv_axes[0] + t), -max(lv_axes[1] + t, rv_axes[1]), -(lv_axes[2] + t)])
    hi = np.array([rv_u + rv_axes[0], max(lv_axes[1] + t, rv_axes[1]),
                   max(la.center[2] + la_axes[2], ra.center[2] + ra_axes[2])])
    offset = -rot @ (0.5 * (lo + hi))
    if params.translation_mm:
        offset = offset + rng.uniform(-params.translation_mm, params.translation_mm, 3)
    return HeartGeometry(rot, offset, lv, h, t, la, rv, ra)


def rasterize(geo: HeartGeometry, grid: int, spacing: float) -> LabelVolume:
    origin = np.full(3, -0.5 * grid * spacing)
    idx = np.indices((grid, grid, grid)).reshape(3, -1).T
    world = origin + (idx + 0.5) * spacing
    local = (world - geo.offset) @ geo.rotation  # R^T (x - offset)
    shape = (grid, grid, grid)
    w = local[:, 2].reshape(shape)
    below = w <= geo.base_height

    pool = geo.lv.inside(local).reshape(shape) & below
    # distance (mm) from each voxel to the nearest pool voxel
    dist = ndimage.distance_transform_edt(~pool, sampling=spacing)
    near = (dist > 0) & (dist <= geo.myo_thickness)
    myo = near & below
    plug = near & ~below & (w <= geo.base_height + geo.myo_thickness)

    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    # lowest priority first so later writes win
    labels[geo.ra.inside(local).reshape(shape)] = RA
    labels[geo.rv.inside(local).reshape(shape)] = RV
    labels[geo.la.inside(local).reshape(shape) | plug] = LA
    labels[myo] = MYO
    labels[pool] = LV
    return LabelVolume(labels, np.full(3, spacing), origin)


# face contacts between classes that every phantom has (and no others)
CANONICAL_CONTACTS = frozenset({
    (BACKGROUND, LA), (BACKGROUND, RA), (BACKGROUND, RV), (BACKGROUND, MYO),
    (LA, LV), (LA, RA), (LA, MYO), (LV, MYO), (RA, RV), (RA, MYO), (RV, MYO),
})
MAX_ATTEMPTS = 64


def class_contacts(labels: np.ndarray) -> frozenset:
    """Unordered pairs of distinct classes that share at least one voxel face."""
    pairs = set()
    for axis in range(3):
        a = np.moveaxis(labels, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        diff = lo != hi
        codes = np.unique(np.minimum(lo[diff], hi[diff]).astype(np.int64) * 8 + np.maximum(lo[diff], hi[diff]))
        pairs.update((int(c) // 8, int(c) % 8) for c in codes)
    return frozenset(pairs)


def generate_phantom(params: PhantomParams, seed: int) -> LabelVolume:
    """Deterministic phantom for ``seed``; raises if the heart leaves the grid.

    With ``enforce_topology`` the shape is redrawn (continuing the same
    random stream) until its class contact graph equals
    ``CANONICAL_CONTACTS``.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        geo = sample_geometry(params, rng)
        vol = rasterize(geo, params.grid, params.spacing)
        lab = vol.labels
        faces = [lab[0], lab[-1], lab[:, 0], lab[:, -1], lab[:, :, 0], lab[:, :, -1]]
        if any(f.any() for f in faces):
            raise PhantomBoundsError("phantom structures reach the volume boundary; enlarge the grid")
        missing = [c for c in (LA, LV, RA, RV, MYO) if not (lab == c).any()]
        if missing and not params.enforce_topology:
            raise PhantomBoundsError(f"phantom is missing classes {missing}")
        if not params.enforce_topology or class_contacts(lab) == CANONICAL_CONTACTS:
            return vol
    raise PhantomBoundsError(f"no phantom with the canonical class contacts after {MAX_ATTEMPTS} draws; "
                             "the shape ranges are incompatible with the fixed anatomy")


def split_counts(n: int, split=(100, 13, 40)) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` cases to train/val/test."""
    total = sum(split)
    raw = [n * s / total for s in split]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    if n >= 1 and counts[0] == 0:
        counts[0] = 1
        counts[int(np.argmax(counts[1:])) + 1] -= 1
    return tuple(counts)


def cohort(params: PhantomParams, n: int, base_seed: int, split=(100, 13, 40)):
    """``n`` phantoms with seeds ``base_seed + k`` and a split manifest."""
    if n < 1:
        raise ValueError("cohort needs at least one case")
    n_train, n_val, _ = split_counts(n, split)
    volumes, cases = {}, []
    for k in range(n):
        cid = f"case{k:03d}"
        seed = base_seed + k
        volumes[cid] = generate_phantom(params, seed)
        split_name = "train" if k < n_train else "val" if k < n_train + n_val else "test"
        cases.append({"id": cid, "seed": seed, "split": split_name, "file": f"{cid}.lvol"})
    manifest = {"base_seed": base_seed, "params": asdict(params), "cases": cases}
    return volumes, manifest


def manifest_ids(manifest: dict, split: str) -> list[str]:
    return [c["id"] for c in manifest["cases"] if c["split"] == split]


def params_from_dict(d: dict) -> PhantomParams:
    fields = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        fields[k] = v
    return PhantomParams(**fields)


def write_manifest(path, manifest: dict):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
