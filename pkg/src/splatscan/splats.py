"""2D Gaussian surface splats and their array-of-structs container.

A splat is a Gaussian patch on a plane: centroid ``mu``, orthonormal
in-plane tangents ``t_alpha``/``t_beta``, per-axis standard deviations
``scales`` and an ``opacity`` in (0, 1).  The patch normal is
``t_alpha x t_beta``.  Local splat coordinates (a, b) are measured in
units of one standard deviation, so the density kernel is

    G(a, b) = exp(-(a^2 + b^2) / 2)

and the world point of (a, b) is ``mu + a*s_a*t_alpha + b*s_b*t_beta``.

For optimization the model stores scales in log space, opacity in logit
space and the tangent frame as two unconstrained vectors that are
orthonormalized by Gram-Schmidt on read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .se3 import SE3Pose

__all__ = [
    "Splat",
    "SplatModel",
    "SplatTransform",
    "gaussian_kernel",
    "orthonormal_tangents",
    "tangent_raw_gradients",
]


def gaussian_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian density at splat coordinates (a, b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.exp(-0.5 * (a * a + b * b))


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class Splat:
    """A single splat with explicit (already orthonormal) tangents."""

    centroid: np.ndarray
    t_alpha: np.ndarray
    t_beta: np.ndarray
    scales: np.ndarray
    opacity: float

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=float).reshape(3)
        self.t_alpha = np.asarray(self.t_alpha, dtype=float).reshape(3)
        self.t_beta = np.asarray(self.t_beta, dtype=float).reshape(3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(2)
        self.opacity = float(self.opacity)
        for name, t in (("t_alpha", self.t_alpha), ("t_beta", self.t_beta)):
            if abs(np.linalg.norm(t) - 1.0) > 1e-6:
                raise GeometryError(f"{name} is not unit length")
        if abs(float(self.t_alpha @ self.t_beta)) > 1e-6:
            raise GeometryError("tangents are not orthogonal")
        if np.any(self.scales <= 0):
            raise GeometryError("scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise GeometryError("opacity must lie strictly in (0, 1)")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.t_alpha, self.t_beta)

    def world_point(self, a: float, b: float) -> np.ndarray:
        return (
            self.centroid
            + a * self.scales[0] * self.t_alpha
            + b * self.scales[1] * self.t_beta
        )


@dataclass
class SplatTransform:
    """Homogeneous map from splat coordinates (a, b, 0, 1) to world points."""

    H: np.ndarray

    @classmethod
    def from_splat(cls, s: Splat) -> "SplatTransform":
        H = np.eye(4)
        H[:3, 0] = s.scales[0] * s.t_alpha
        H[:3, 1] = s.scales[1] * s.t_beta
        H[:3, 2] = 0.0
        H[:3, 3] = s.centroid
        return cls(H)


def orthonormal_tangents(
    raw_a: np.ndarray, raw_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt: unit first tangent, second made orthonormal to it.

    Accepts (..., 3) arrays.  Raises when a vector vanishes or the pair is
    parallel.
    """
    a = np.asarray(raw_a, dtype=float)
    b = np.asarray(raw_b, dtype=float)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12):
        raise GeometryError("first tangent has zero norm")
    u = a / na
    w = b - np.sum(u * b, axis=-1, keepdims=True) * u
    nw = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(nw < 1e-12):
        raise GeometryError("tangents are parallel")
    return u, w / nw


def tangent_raw_gradients(
    raw_a: np.ndarray,
    raw_b: np.ndarray,
    grad_u: np.ndarray,
    grad_v: np.ndarray,
    grad_n: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate frame gradients through the Gram-Schmidt map.

    ``grad_u``/``grad_v``/``grad_n`` are d(loss)/d(column) for the frame
    (u, v, u x v).  Returns gradients w.r.t. the raw tangent vectors.
    """
    a = np.asarray(raw_a, dtype=float)
    b = np.asarray(raw_b, dtype=float)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    u = a / na
    ub = np.sum(u * b, axis=-1, keepdims=True)
    w = b - ub * u
    nw = np.linalg.norm(w, axis=-1, keepdims=True)
    v = w / nw

    # fold the normal's gradient into the frame columns: n = u x v
    gu = grad_u + np.cross(v, grad_n)
    gv = grad_v + np.cross(grad_n, u)

    # v = w/|w|: project out the radial part, then w = b - (u.b) u
    q = (gv - np.sum(v * gv, axis=-1, keepdims=True) * v) / nw
    gb = q - np.sum(q * u, axis=-1, keepdims=True) * u
    inner = gu - ub * q - np.sum(q * u, axis=-1, keepdims=True) * b
    ga = (inner - np.sum(u * inner, axis=-1, keepdims=True) * u) / na
    return ga, gb


class SplatModel:
    """Structure-of-arrays splat set used by the renderer and optimizer.

    Raw optimization storage: ``raw_t_alpha``/``raw_t_beta`` are free
    vectors, ``log_scales`` and ``logit_opacity`` keep scales positive and
    opacity in (0, 1).  ``epochs`` tags each splat with the keyframe index
    that created it.  ``version`` increments on every mutation so cached
    render records can detect staleness.
    """

    def __init__(
        self,
        centers=None,
        raw_t_alpha=None,
        raw_t_beta=None,
        log_scales=None,
        logit_opacity=None,
        epochs=None,
    ):
        z3 = np.zeros((0, 3))
        self.centers = np.array(centers if centers is not None else z3, dtype=float).reshape(-1, 3)
        n = self.centers.shape[0]
        self.raw_t_alpha = np.array(
            raw_t_alpha if raw_t_alpha is not None else np.tile([1.0, 0, 0], (n, 1))
        , dtype=float).reshape(-1, 3)
        self.raw_t_beta = np.array(
            raw_t_beta if raw_t_beta is not None else np.tile([0.0, 1, 0], (n, 1))
        , dtype=float).reshape(-1, 3)
        self.log_scales = np.array(
            log_scales if log_scales is not None else np.zeros((n, 2))
        , dtype=float).reshape(-1, 2)
        self.logit_opacity = np.array(
            logit_opacity if logit_opacity is not None else np.zeros(n)
        , dtype=float).reshape(-1)
        self.epochs = np.array(
            epochs if epochs is not None else np.zeros(n, dtype=int)
        ).reshape(-1).astype(int)
        shapes = {
            self.raw_t_alpha.shape[0],
            self.raw_t_beta.shape[0],
            self.log_scales.shape[0],
            self.logit_opacity.shape[0],
            self.epochs.shape[0],
        }
        if shapes != {n}:
            raise GeometryError("splat arrays have inconsistent lengths")
        self.version = 0

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.logit_opacity)

    def tangent_frames(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormalized (t_alpha, t_beta, normal) arrays, each (N, 3)."""
        if len(self) == 0:
            z = np.zeros((0, 3))
            return z, z.copy(), z.copy()
        ta, tb = orthonormal_tangents(self.raw_t_alpha, self.raw_t_beta)
        return ta, tb, np.cross(ta, tb)

    def touch(self):
        self.version += 1

    def append(
        self,
        centers: np.ndarray,
        t_alpha: np.ndarray,
        t_beta: np.ndarray,
        scales: np.ndarray,
        opacities: np.ndarray,
        epoch: int,
    ) -> None:
        """Add splats given plain-space parameters."""
        centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        m = centers.shape[0]
        if m == 0:
            return
        scales = np.asarray(scales, dtype=float).reshape(m, 2)
        opac = np.asarray(opacities, dtype=float).reshape(m)
        if np.any(scales <= 0) or np.any((opac <= 0) | (opac >= 1)):
            raise GeometryError("new splats need positive scales and opacity in (0,1)")
        self.centers = np.concatenate([self.centers, centers])
        self.raw_t_alpha = np.concatenate(
            [self.raw_t_alpha, np.asarray(t_alpha, dtype=float).reshape(m, 3)]
        )
        self.raw_t_beta = np.concatenate(
            [self.raw_t_beta, np.asarray(t_beta, dtype=float).reshape(m, 3)]
        )
        self.log_scales = np.concatenate([self.log_scales, np.log(scales)])
        self.logit_opacity = np.concatenate([self.logit_opacity, _logit(opac)])
        self.epochs = np.concatenate([self.epochs, np.full(m, epoch, dtype=int)])
        self.touch()

    def prune(self, keep: np.ndarray) -> int:
        """Keep the masked splats; returns how many were removed."""
        keep = np.asarray(keep, dtype=bool).reshape(-1)
        removed = int(len(self) - keep.sum())
        if removed == 0:
            return 0
        self.centers = self.centers[keep]
        self.raw_t_alpha = self.raw_t_alpha[keep]
        self.raw_t_beta = self.raw_t_beta[keep]
        self.log_scales = self.log_scales[keep]
        self.logit_opacity = self.logit_opacity[keep]
        self.epochs = self.epochs[keep]
        self.touch()
        return removed

    def splat(self, i: int) -> Splat:
        ta, tb, _ = self.tangent_frames()
        return Splat(
            self.centers[i], ta[i], tb[i], self.scales[i], float(self.opacities[i])
        )

    @classmethod
    def from_splats(cls, splats: list[Splat], epoch: int = 0) -> "SplatModel":
        m = cls()
        if splats:
            m.append(
                np.array([s.centroid for s in splats]),
                np.array([s.t_alpha for s in splats]),
                np.array([s.t_beta for s in splats]),
                np.array([s.scales for s in splats]),
                np.array([s.opacity for s in splats]),
                epoch,
            )
        return m

    def copy(self) -> "SplatModel":
        m = SplatModel(
            self.centers.copy(),
            self.raw_t_alpha.copy(),
            self.raw_t_beta.copy(),
            self.log_scales.copy(),
            self.logit_opacity.copy(),
            self.epochs.copy(),
        )
        return m

    def transformed(self, T: SE3Pose) -> "SplatModel":
        """The same model expressed after a rigid remap of the world frame."""
        m = self.copy()
        m.centers = T.apply(m.centers)
        m.raw_t_alpha = m.raw_t_alpha @ T.rotation.T
        m.raw_t_beta = m.raw_t_beta @ T.rotation.T
        m.touch()
        return m

    def memory_bytes(self) -> int:
        return sum(
            a.nbytes
            for a in (
                self.centers,
                self.raw_t_alpha,
                self.raw_t_beta,
                self.log_scales,
                self.logit_opacity,
                self.epochs,
            )
        )
