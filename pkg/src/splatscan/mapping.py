"""Local splat map construction and photometric refinement.

A local map is a splat model plus the keyframes that shaped it.  Each
keyframe stores its estimated camera, the measured range image and the
normals derived from it.  Refinement renders the model at a sampled
keyframe, scores it against that keyframe's images and follows analytic
gradients with Adam.

The objective per keyframe, summed over pixels of the valid mask:

    L = sum w(D_kf) * |D - D_kf|                (range, w = 1/max(D_kf, 1m))
      + w_o * sum -log(max(O, 1e-6))            (opacity: surfaces should be solid)
      + w_n * sum (1 - N_render . N_kf)         (normal alignment)
      + w_s * sum max(0, max(s_a, s_b) - cap)   (scale regularizer, per splat)

New splats are spawned at keyframe pixels drawn by range-gradient weight
(depth edges first), seeded on the back-projected surface with the
keyframe normal, pixel-footprint scales and opacity 0.5.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .geometry import (
    NormalImage,
    RangeImage,
    SphericalCamera,
    build_range_image,
    estimate_camera,
    range_image_normals,
    smooth_range_image,
)
from .rasterizer import (
    PixelGradients,
    RasterConfig,
    RenderOutput,
    rasterize_backward,
    rasterize_forward,
)
from .se3 import SE3Pose
from .splats import SplatModel, orthonormal_tangents, tangent_raw_gradients

__all__ = [
    "MappingConfig",
    "Keyframe",
    "LocalMap",
    "make_keyframe",
    "range_loss",
    "normal_loss",
    "opacity_loss",
    "scale_loss",
    "mapping_loss",
    "MappingLoss",
    "spawn_splats",
    "densify_mask",
    "add_keyframe",
    "refine",
    "sample_keyframe_index",
    "coverage",
    "should_reset_local_map",
]


@dataclass
class MappingConfig:
    """Weights, thresholds and optimizer settings for map refinement."""

    n_spawn: int = 20000          # cap on splats spawned per keyframe event
    refine_iters: int = 10        # optimizer iterations per keyframe event
    w_opacity: float = 0.05
    w_normal: float = 0.1
    w_scale: float = 1.0
    scale_cap: float = 0.5        # meters; hinge above this
    densify_opacity: float = 0.5  # rendered opacity below -> under-covered
    densify_range_err: float = 0.1
    kf_sample_p: float = 0.4      # geometric bias toward recent keyframes
    max_keyframes: int = 100
    prune_opacity: float = 0.005
    coverage_min: float = 0.3
    reset_radius: float = 50.0
    lr_centers: float = 1e-3      # multiplied by the map's scene scale
    lr_tangents: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_logit_opacity: float = 5e-2
    scale_floor: float = 1e-4
    opacity_init: float = 0.5
    footprint_gain: float = 1.0
    range_weight_floor: float = 1.0  # meters


@dataclass
class Keyframe:
    index: int
    cloud: np.ndarray
    pose: SE3Pose
    camera: SphericalCamera
    range_image: RangeImage
    normal_image: NormalImage


def make_keyframe(
    index: int, cloud: np.ndarray, pose: SE3Pose, width: int, height: int
) -> Keyframe:
    """Build a keyframe: estimate its camera, range image and normals."""
    cam = estimate_camera(cloud, width, height)
    rimg = build_range_image(cam, cloud)
    # noise in raw ranges becomes orientation noise; smooth for normals only
    nimg = range_image_normals(cam, smooth_range_image(rimg, cam.full_circle))
    return Keyframe(index, np.asarray(cloud, dtype=float), pose.copy(), cam, rimg, nimg)


# --- losses -----------------------------------------------------------------


@dataclass
class MappingLoss:
    total: float
    pixel_grads: PixelGradients
    d_scales: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)


def range_loss(
    render: RenderOutput, kf: Keyframe, floor: float = 1.0
) -> tuple[float, np.ndarray]:
    """Range-weighted L1 on the range channel over the keyframe's valid mask."""
    M = kf.range_image.valid
    w = 1.0 / np.maximum(kf.range_image.range, floor)
    diff = render.range - kf.range_image.range
    L = float(np.sum(w[M] * np.abs(diff[M])))
    g = np.where(M, w * np.sign(diff), 0.0)
    return L, g


def normal_loss(render: RenderOutput, kf: Keyframe) -> tuple[float, np.ndarray]:
    """One minus dot product against the keyframe normals where both exist.

    The keyframe normals are unit and fixed; the rendered normal is the
    raw blend (not re-normalized), so the gradient is just the negated
    target.
    """
    M = kf.range_image.valid & kf.normal_image.valid
    dots = np.sum(render.normal * kf.normal_image.normals, axis=-1)
    L = float(np.sum(1.0 - dots[M]))
    g = np.where(M[..., None], -kf.normal_image.normals, 0.0)
    return L, g


def opacity_loss(
    render: RenderOutput, kf: Keyframe, eps: float = 1e-6
) -> tuple[float, np.ndarray]:
    """Negative log opacity over valid pixels; pushes surfaces opaque."""
    M = kf.range_image.valid
    O = render.opacity
    clamped = np.maximum(O, eps)
    L = float(np.sum(-np.log(clamped[M])))
    g = np.where(M & (O > eps), -1.0 / clamped, 0.0)
    return L, g


def scale_loss(model: SplatModel, cap: float) -> tuple[float, np.ndarray]:
    """Hinge on the larger scale above ``cap``; gradient on that axis only."""
    s = model.scales
    if s.shape[0] == 0:
        return 0.0, np.zeros((0, 2))
    mx = s.max(axis=1)
    over = mx - cap
    L = float(np.sum(np.maximum(over, 0.0)))
    g = np.zeros_like(s)
    hot = over > 0
    arg = s.argmax(axis=1)
    g[hot, arg[hot]] = 1.0
    return L, g


def mapping_loss(
    render: RenderOutput, model: SplatModel, kf: Keyframe, cfg: MappingConfig
) -> MappingLoss:
    """Combined per-keyframe objective with pixel and scale gradients."""
    L_d, g_d = range_loss(render, kf, cfg.range_weight_floor)
    L_o, g_o = opacity_loss(render, kf)
    L_n, g_n = normal_loss(render, kf)
    L_s, g_s = scale_loss(model, cfg.scale_cap)
    total = L_d + cfg.w_opacity * L_o + cfg.w_normal * L_n + cfg.w_scale * L_s
    grads = PixelGradients(g_d, cfg.w_normal * g_n, cfg.w_opacity * g_o)
    return MappingLoss(
        total,
        grads,
        cfg.w_scale * g_s,
        {"range": L_d, "opacity": L_o, "normal": L_n, "scale": L_s},
    )


# --- spawning ---------------------------------------------------------------


def _range_gradient_weights(kf: Keyframe) -> np.ndarray:
    """Magnitude of the range image gradient, zero at invalid pixels."""
    D = kf.range_image.range
    V = kf.range_image.valid
    wrap = kf.camera.full_circle

    def shift(a, d, axis):
        if wrap and axis == 1:
            return np.roll(a, d, axis=axis)
        out = np.zeros_like(a)
        if axis == 1:
            if d > 0:
                out[:, d:] = a[:, :-d]
            else:
                out[:, :d] = a[:, -d:]
        else:
            if d > 0:
                out[d:] = a[:-d]
            else:
                out[:d] = a[-d:]
        return out

    gx = np.zeros_like(D)
    gy = np.zeros_like(D)
    for g, axis in ((gx, 1), (gy, 0)):
        plus = shift(D, -1, axis)
        minus = shift(D, 1, axis)
        pv = shift(V, -1, axis)
        mv = shift(V, 1, axis)
        both = pv & mv
        one_p = pv & ~mv
        one_m = mv & ~pv
        g[both] = 0.5 * (plus[both] - minus[both])
        g[one_p] = plus[one_p] - D[one_p]
        g[one_m] = D[one_m] - minus[one_m]
    mag = np.hypot(gx, gy)
    mag[~V] = 0.0
    return mag


def _complete_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangents for unit normals (t_alpha x t_beta = n)."""
    n = np.asarray(normals, dtype=float)
    ref = np.tile([0.0, 0.0, 1.0], (n.shape[0], 1))
    steep = np.abs(n[:, 2]) > 0.9
    ref[steep] = [1.0, 0.0, 0.0]
    ta = np.cross(n, ref)
    ta /= np.linalg.norm(ta, axis=1, keepdims=True)
    tb = np.cross(n, ta)
    return ta, tb


def spawn_splats(
    model: SplatModel,
    kf: Keyframe,
    mask: np.ndarray,
    n_max: int,
    cfg: MappingConfig,
    rng: np.random.Generator,
) -> int:
    """Create splats at up to ``n_max`` masked keyframe pixels.

    Pixels are drawn without replacement, weighted by the range-gradient
    magnitude (uniform when it vanishes everywhere).  Each splat sits on
    the back-projected surface point, aligned to the keyframe normal
    (falling back to facing the sensor), scaled to the pixel footprint.
    Returns the number spawned.
    """
    mask = mask & kf.range_image.valid
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0
    if idx.size > n_max:
        w = _range_gradient_weights(kf).ravel()[idx]
        total = w.sum()
        p = w / total if total > 0 else None
        idx = rng.choice(idx, size=n_max, replace=False, p=p)
    rows, cols = np.unravel_index(idx, kf.range_image.shape)
    uv = kf.camera.sample_grid[rows, cols]
    d = kf.range_image.range[rows, cols]
    pts_s = kf.camera.back_project(uv, d)

    dirs = pts_s / np.linalg.norm(pts_s, axis=1, keepdims=True)
    n_s = np.where(
        kf.normal_image.valid[rows, cols][:, None],
        kf.normal_image.normals[rows, cols],
        -dirs,
    )
    n_s /= np.linalg.norm(n_s, axis=1, keepdims=True)

    centers = kf.pose.apply(pts_s)
    n_w = n_s @ kf.pose.rotation.T
    ta, tb = _complete_frames(n_w)

    pitch_az = 1.0 / abs(kf.camera.fx)
    pitch_el = 1.0 / abs(kf.camera.fy)
    scales = np.stack(
        [cfg.footprint_gain * d * pitch_az, cfg.footprint_gain * d * pitch_el], axis=1
    )
    scales = np.maximum(scales, cfg.scale_floor)
    model.append(centers, ta, tb, scales, np.full(idx.size, cfg.opacity_init), kf.index)
    return idx.size


def densify_mask(render: RenderOutput, kf: Keyframe, cfg: MappingConfig) -> np.ndarray:
    """Valid pixels the current model explains poorly (thin or wrong range)."""
    M = kf.range_image.valid
    thin = render.opacity <= cfg.densify_opacity
    wrong = np.abs(render.range - kf.range_image.range) >= cfg.densify_range_err
    return M & (thin | wrong)


def coverage(render: RenderOutput, kf: Keyframe) -> float:
    """Mean rendered opacity over the keyframe's valid pixels."""
    M = kf.range_image.valid
    if not M.any():
        return 0.0
    return float(render.opacity[M].mean())


def should_reset_local_map(lmap: "LocalMap", kf: Keyframe, cfg: MappingConfig,
                           raster: RasterConfig | None = None) -> bool:
    """Whether ``kf`` should open a fresh local map instead of joining.

    Three triggers: the keyframe budget is exhausted, the model barely
    covers the new view, or the sensor has left the map's neighborhood.
    """
    if len(lmap.keyframes) >= cfg.max_keyframes:
        return True
    if np.linalg.norm(kf.pose.translation - lmap.origin.translation) > cfg.reset_radius:
        return True
    if len(lmap.model) == 0:
        return False
    render, _ = rasterize_forward(kf.camera, kf.pose, lmap.model, raster)
    return coverage(render, kf) < cfg.coverage_min


# --- optimizer --------------------------------------------------------------


class _Adam:
    """Adam moments for the four parameter groups, resized with the model."""

    def __init__(self, n: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.slots = {
            "centers": (np.zeros((n, 3)), np.zeros((n, 3))),
            "raw_t_alpha": (np.zeros((n, 3)), np.zeros((n, 3))),
            "raw_t_beta": (np.zeros((n, 3)), np.zeros((n, 3))),
            "log_scales": (np.zeros((n, 2)), np.zeros((n, 2))),
            "logit_opacity": (np.zeros(n), np.zeros(n)),
        }

    def grow(self, extra: int):
        if extra <= 0:
            return
        for k, (m, v) in self.slots.items():
            pad = ((0, extra),) + ((0, 0),) * (m.ndim - 1)
            self.slots[k] = (np.pad(m, pad), np.pad(v, pad))

    def prune(self, keep: np.ndarray):
        for k, (m, v) in self.slots.items():
            self.slots[k] = (m[keep], v[keep])

    def step(self, model: SplatModel, grads: dict[str, np.ndarray], lrs: dict[str, float]):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.slots[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = lrs[name] * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            getattr(model, name)[...] -= upd
        model.touch()


@dataclass
class LocalMap:
    """Active splat model, its keyframes and the shared optimizer state."""

    model: SplatModel
    keyframes: list[Keyframe] = field(default_factory=list)
    origin: SE3Pose = field(default_factory=SE3Pose.identity)
    scene_scale: float = 1.0
    optimizer: _Adam | None = None

    @classmethod
    def start(cls, kf: Keyframe, cfg: MappingConfig, rng: np.random.Generator) -> "LocalMap":
        """Open a new map seeded from one keyframe."""
        model = SplatModel()
        ranges = kf.range_image.range[kf.range_image.valid]
        scale = float(np.median(ranges)) if ranges.size else 1.0
        lmap = cls(model, [], kf.pose.copy(), max(scale, 1e-3), _Adam(0))
        add_keyframe(lmap, kf, cfg, rng)
        return lmap

    def lr_table(self, cfg: MappingConfig) -> dict[str, float]:
        return {
            "centers": cfg.lr_centers * self.scene_scale,
            "raw_t_alpha": cfg.lr_tangents,
            "raw_t_beta": cfg.lr_tangents,
            "log_scales": cfg.lr_log_scales,
            "logit_opacity": cfg.lr_logit_opacity,
        }


def add_keyframe(
    lmap: LocalMap,
    kf: Keyframe,
    cfg: MappingConfig,
    rng: np.random.Generator,
    raster: RasterConfig | None = None,
) -> dict:
    """Append a keyframe: prune dead splats, then densify where it is unexplained.

    The first keyframe of a map seeds splats at every valid pixel (up to
    the spawn cap).  Opacities are never reset here, only pruned.
    """
    stats = {"pruned": 0, "spawned": 0}
    if len(lmap.model) == 0:
        mask = kf.range_image.valid.copy()
    else:
        render, _ = rasterize_forward(kf.camera, kf.pose, lmap.model, raster)
        mask = densify_mask(render, kf, cfg)
        keep = lmap.model.opacities >= cfg.prune_opacity
        if not keep.all():
            stats["pruned"] = lmap.model.prune(keep)
            lmap.optimizer.prune(keep)
    before = len(lmap.model)
    stats["spawned"] = spawn_splats(lmap.model, kf, mask, cfg.n_spawn, cfg, rng)
    lmap.optimizer.grow(len(lmap.model) - before)
    lmap.keyframes.append(kf)
    return stats


def sample_keyframe_index(n: int, p: float, rng: np.random.Generator) -> int:
    """Truncated geometric draw over keyframe ages (0 = most recent).

    Returns an index into the keyframe list (n-1 is the newest).
    """
    if n <= 0:
        raise GeometryError("no keyframes to sample")
    ages = np.arange(n)
    w = p * (1.0 - p) ** ages
    w /= w.sum()
    age = int(rng.choice(n, p=w))
    return n - 1 - age


def refine(
    lmap: LocalMap,
    cfg: MappingConfig,
    iters: int,
    rng: np.random.Generator,
    raster: RasterConfig | None = None,
) -> list[float]:
    """Adam refinement over randomly sampled keyframes; returns loss values.

    Each iteration renders one keyframe, backpropagates the mapping loss
    and steps all four parameter groups, then clamps scales into
    ``[scale_floor, 10 * scale_cap]``.
    """
    losses: list[float] = []
    if len(lmap.model) == 0 or not lmap.keyframes:
        return losses
    lrs = lmap.lr_table(cfg)
    lo = np.log(cfg.scale_floor)
    hi = np.log(10.0 * cfg.scale_cap)
    for _ in range(iters):
        kf = lmap.keyframes[sample_keyframe_index(len(lmap.keyframes), cfg.kf_sample_p, rng)]
        render, rec = rasterize_forward(kf.camera, kf.pose, lmap.model, raster)
        ml = mapping_loss(render, lmap.model, kf, cfg)
        g = rasterize_backward(lmap.model, rec, render, ml.pixel_grads)
        ga, gb = tangent_raw_gradients(
            lmap.model.raw_t_alpha,
            lmap.model.raw_t_beta,
            g.d_t_alpha,
            g.d_t_beta,
            g.d_normal,
        )
        s = lmap.model.scales
        o = lmap.model.opacities
        grads = {
            "centers": g.d_centers,
            "raw_t_alpha": ga,
            "raw_t_beta": gb,
            "log_scales": (g.d_scales + ml.d_scales) * s,
            "logit_opacity": g.d_opacity * o * (1.0 - o),
        }
        lmap.optimizer.step(lmap.model, grads, lrs)
        np.clip(lmap.model.log_scales, lo, hi, out=lmap.model.log_scales)
        losses.append(ml.total)
    return losses


def map_loss_at(
    lmap: LocalMap,
    kf: Keyframe,
    cfg: MappingConfig,
    raster: RasterConfig | None = None,
) -> float:
    """Objective value of the current model at one keyframe (no gradients)."""
    render, _ = rasterize_forward(kf.camera, kf.pose, lmap.model, raster)
    return mapping_loss(render, lmap.model, kf, cfg).total
