"""Rotations and plane geometry.

Conventions: right-handed frames, active rotations, angles in radians,
lengths in millimetres.  A plane pixel ``(i, j)`` maps to
``anchor + alphas[j] * basis_u + betas[i] * basis_v``; under a rigid update
the basis vectors are rotated and the anchor translated.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

SMALL_ANGLE = 1e-6


class DegenerateGeometryError(ValueError):
    pass


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rodrigues_coeffs(theta_sq: float) -> tuple[float, float]:
    """Return sin(t)/t and (1 - cos t)/t^2 for t^2 = theta_sq."""
    if theta_sq < SMALL_ANGLE**2:
        return 1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0
    t = np.sqrt(theta_sq)
    return np.sin(t) / t, (1.0 - np.cos(t)) / theta_sq


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    w = np.asarray(axis_angle, dtype=np.float64)
    if w.shape != (3,) or not np.all(np.isfinite(w)):
        raise ValueError(f"axis-angle must be a finite 3-vector, got {w!r}")
    a, b = _rodrigues_coeffs(float(w @ w))
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def rotate_about(vec, axis, angle: float) -> np.ndarray:
    """Rotate ``vec`` about the unit ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError(f"rotation axis must be unit length, |axis| = {np.linalg.norm(axis)}")
    return rodrigues(axis * angle) @ np.asarray(vec, dtype=np.float64)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateGeometryError("cannot normalize a zero vector")
    return v / n


def project_orthogonal(v, axis) -> np.ndarray:
    """Unit component of ``v`` orthogonal to the unit ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise DegenerateGeometryError("zero vector has no orthogonal component")
    p = v - (v @ axis) * axis
    # angle between v and the axis line; sin(angle) = |p| / |v|
    if np.linalg.norm(p) / nv <= np.sin(1e-6):
        raise DegenerateGeometryError("vector is parallel to the projection axis")
    return p / np.linalg.norm(p)


@dataclass
class ViewPlane:
    """Anchor, orthonormal in-plane basis and the pixel coordinate grid."""

    anchor: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray
    alphas: np.ndarray  # per column, mm
    betas: np.ndarray  # per row, mm

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        self.basis_u = np.asarray(self.basis_u, dtype=np.float64)
        self.basis_v = np.asarray(self.basis_v, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)

    @property
    def width(self) -> int:
        return len(self.alphas)

    @property
    def height(self) -> int:
        return len(self.betas)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.basis_u, self.basis_v)

    def validate(self, tol: float = 1e-9):
        if abs(np.linalg.norm(self.basis_u) - 1) > tol or abs(np.linalg.norm(self.basis_v) - 1) > tol:
            raise DegenerateGeometryError("plane basis vectors must be unit length")
        if abs(self.basis_u @ self.basis_v) > tol:
            raise DegenerateGeometryError("plane basis vectors must be orthogonal")

    def with_pose(self, anchor, basis_u, basis_v) -> "ViewPlane":
        return replace(self, anchor=anchor, basis_u=basis_u, basis_v=basis_v)

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor.tolist(),
            "basis_u": self.basis_u.tolist(),
            "basis_v": self.basis_v.tolist(),
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "ViewPlane":
        return cls(d["anchor"], d["basis_u"], d["basis_v"], d["alphas"], d["betas"])


@dataclass
class RigidParams:
    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def is_identity(self) -> bool:
        return not self.axis_angle.any() and not self.translation.any()


def _check_index(plane: ViewPlane, i: int, j: int):
    if not (0 <= i < plane.height and 0 <= j < plane.width):
        raise IndexError(f"pixel ({i}, {j}) outside {plane.height}x{plane.width} grid")


def plane_point(plane: ViewPlane, i: int, j: int) -> np.ndarray:
    _check_index(plane, i, j)
    return plane.anchor + plane.alphas[j] * plane.basis_u + plane.betas[i] * plane.basis_v


def rigid_plane_point(plane: ViewPlane, rigid: RigidParams, i: int, j: int) -> np.ndarray:
    _check_index(plane, i, j)
    if rigid.is_identity():
        return plane_point(plane, i, j)
    r = rodrigues(rigid.axis_angle)
    return (plane.anchor + rigid.translation) + plane.alphas[j] * (r @ plane.basis_u) \
        + plane.betas[i] * (r @ plane.basis_v)


def plane_grid(plane: ViewPlane, rigid: RigidParams | None = None, rows=None, cols=None) -> np.ndarray:
    """World coordinates of a (sub)grid of pixels, shape ``(len(rows), len(cols), 3)``."""
    alphas = plane.alphas if cols is None else plane.alphas[cols]
    betas = plane.betas if rows is None else plane.betas[rows]
    anchor, eu, ev = plane.anchor, plane.basis_u, plane.basis_v
    if rigid is not None and not rigid.is_identity():
        r = rodrigues(rigid.axis_angle)
        anchor, eu, ev = anchor + rigid.translation, r @ eu, r @ ev
    return (anchor[None, None, :] + alphas[None, :, None] * eu[None, None, :]
            + betas[:, None, None] * ev[None, None, :])


# -- differentiable versions -------------------------------------------------

def rotate_vectors_tape(axis_angle: ad.Var, vectors: np.ndarray) -> list[ad.Var]:
    """Rotate constant 3-vectors by R(axis_angle) on the tape.

    Uses ``v + A (w x v) + B (w x (w x v))`` with the same small-angle
    series as :func:`rodrigues`, so gradients stay finite at ``w = 0``.
    """
    tape = axis_angle.tape
    theta_sq = (axis_angle * axis_angle).sum()
    if float(theta_sq.value) < SMALL_ANGLE**2:
        a = 1.0 - theta_sq * (1.0 / 6.0)
        b = 0.5 - theta_sq * (1.0 / 24.0)
    else:
        theta = ad.sqrt(theta_sq)
        a = ad.sin(theta) / theta
        b = (1.0 - ad.cos(theta)) / theta_sq
    out = []
    for v in vectors:
        v = tape.constant(v)
        wv = ad.cross(axis_angle, v)
        wwv = ad.cross(axis_angle, wv)
        out.append(v + a * wv + b * wwv)
    return out


def plane_points_tape(plane: ViewPlane, axis_angle: ad.Var, translation: ad.Var,
                      rows: np.ndarray, cols: np.ndarray) -> ad.Var:
    """Differentiable world coordinates of pixels ``(rows[k], cols[k])``, shape ``(n, 3)``."""
    tape = axis_angle.tape
    ru, rv = rotate_vectors_tape(axis_angle, [plane.basis_u, plane.basis_v])
    basis = ad.concat([ru, rv]).reshape(2, 3)
    ab = np.stack([plane.alphas[cols], plane.betas[rows]], axis=1)
    return (tape.constant(plane.anchor) + translation) + tape.constant(ab) @ basis
