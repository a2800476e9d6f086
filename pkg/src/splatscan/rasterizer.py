"""Differentiable tiled rasterizer for splats on a spherical image.

Forward model, per pixel ray ``v``:

  * Each pixel owns two planes through the sensor origin,
    ``h_x = (v x z)/|v x z|`` and ``h_y = h_x x v``; their intersection is
    the ray itself.
  * A splat defines the map ``H`` from splat coordinates (a, b, 0, 1) to
    world points.  Pulling both pixel planes back through the camera pose
    and ``H`` gives two lines in splat coordinates; their intersection
    (via the homogeneous cross product) is the ray/splat hit point
    ``(s_a, s_b)``, with camera-frame location
    ``nu = s_a*B_a + s_b*B_b + B_c`` where ``B_a = s_alpha*R_wc t_alpha``,
    ``B_b = s_beta*R_wc t_beta`` and ``B_c`` is the camera-frame centroid.
  * The hit contributes ``alpha = opacity * exp(-(s_a^2 + s_b^2)/2)``,
    range ``|nu|`` and the splat normal, alpha-blended front to back in
    order of increasing centroid range.

Intersections behind the pixel (``nu . v <= 0``) belong to the antipodal
ray and are discarded.  Hits with ``alpha < 1/255`` are skipped, alpha is
clamped to 0.99, and blending along a pixel stops once transmittance
drops below 1e-4.

Tiling: splats are binned to 16 x 16 pixel tiles using a conservative
angular bound: every point of the splat with non-negligible density lies
inside a ball of radius ``3.33 * max(scale)`` around the centroid (3.33
sigma is where a fully opaque splat falls to alpha = 1/255), and the
image footprint of that ball is a closed-form box in azimuth/elevation.
Tiles are matched against that box by circular interval overlap in
azimuth, which handles the seam of full-circle cameras for free.

The backward pass replays each tile's blend with the stored splat order
and accumulates analytic gradients of any scalar loss on the rendered
range/normal/opacity images w.r.t. splat centroids, tangent frames,
scales and opacities.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRayError, GeometryError, NoIntersectionError
from .geometry import SphericalCamera
from .se3 import SE3Pose
from .splats import SplatModel, SplatTransform

__all__ = [
    "RasterConfig",
    "RenderOutput",
    "BlendRecords",
    "PixelGradients",
    "SplatGradients",
    "PixelRayPlanes",
    "pixel_ray_planes",
    "ray_splat_intersect",
    "splat_bbox_tiles",
    "rasterize_forward",
    "rasterize_backward",
    "reference_rasterize",
]

# alpha = 1/255 is reached at |s| = sqrt(2 ln 255) sigma for opacity 1
_CUTOFF_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 8
    chunk_size: int = 256
    alpha_cutoff: float = 1.0 / 255.0
    alpha_clamp: float = 0.99
    min_transmittance: float = 1e-4
    denom_eps: float = 1e-12
    cutoff_sigma: float = _CUTOFF_SIGMA
    bbox_pad_px: float = 0.5


@dataclass
class RenderOutput:
    """Blended range, camera-frame normal and opacity images."""

    range: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray


@dataclass
class PixelGradients:
    """d(loss)/d(rendered image) for each channel; zeros where unused."""

    d_range: np.ndarray
    d_normal: np.ndarray
    d_opacity: np.ndarray


@dataclass
class SplatGradients:
    """Per-splat loss gradients in plain parameter space.

    Tangent-frame gradients are w.r.t. the orthonormal world-frame columns
    (t_alpha, t_beta, normal); chain through the Gram-Schmidt retraction to
    reach raw storage vectors.
    """

    d_centers: np.ndarray
    d_t_alpha: np.ndarray
    d_t_beta: np.ndarray
    d_normal: np.ndarray
    d_scales: np.ndarray
    d_opacity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 3)),
            np.zeros((n, 3)),
            np.zeros((n, 3)),
            np.zeros((n, 2)),
            np.zeros(n),
        )


@dataclass
class PixelRayPlanes:
    """Unit ray of a pixel and its two origin planes as homogeneous 4-vectors."""

    direction: np.ndarray
    h_x: np.ndarray
    h_y: np.ndarray


@dataclass
class BlendRecords:
    """Binning and identity snapshot that lets the backward pass replay a render."""

    cam: SphericalCamera
    pose: SE3Pose
    config: RasterConfig
    n_splats: int
    model_version: int
    tile_ptr: np.ndarray
    pair_splats: np.ndarray
    tiles_x: int
    tiles_y: int


# --- pixel planes -----------------------------------------------------------

_plane_cache: "weakref.WeakKeyDictionary[SphericalCamera, tuple]" = (
    weakref.WeakKeyDictionary()
)


def _plane_images(cam: SphericalCamera):
    """(dirs, h_x, h_y, ray_ok) images for every pixel center, cached per camera."""
    hit = _plane_cache.get(cam)
    if hit is not None:
        return hit
    dirs = cam.pixel_directions
    hx = np.stack(
        [dirs[..., 1], -dirs[..., 0], np.zeros(dirs.shape[:2])], axis=-1
    )
    n = np.linalg.norm(hx, axis=-1)
    ok = n > 1e-9
    hx = hx / np.maximum(n, 1e-9)[..., None]
    hy = np.cross(hx, dirs)
    hx[~ok] = 0.0
    hy[~ok] = 0.0
    out = (dirs, hx, hy, ok)
    _plane_cache[cam] = out
    return out


def pixel_ray_planes(cam: SphericalCamera, col: int, row: int) -> PixelRayPlanes:
    """Ray and plane pair of one pixel; raises near the poles."""
    if not (0 <= col < cam.width and 0 <= row < cam.height):
        raise GeometryError("pixel outside the image")
    dirs, hx, hy, ok = _plane_images(cam)
    if not ok[row, col]:
        raise DegenerateRayError("pixel ray too close to a pole")
    return PixelRayPlanes(
        dirs[row, col].copy(),
        np.append(hx[row, col], 0.0),
        np.append(hy[row, col], 0.0),
    )


def ray_splat_intersect(
    planes: PixelRayPlanes,
    tf: SplatTransform,
    pose: SE3Pose,
    denom_eps: float = 1e-12,
) -> tuple[float, float, np.ndarray]:
    """Intersect one pixel ray with one splat.

    Returns splat coordinates (a, b) and the camera-frame hit point.
    Raises :class:`NoIntersectionError` for degenerate geometry or hits
    behind the pixel direction.
    """
    Tcw = pose.inverse().matrix()
    M = (Tcw @ tf.H)[:3]  # columns: B_a, B_b, 0, B_c
    hx3 = planes.h_x[:3]
    hy3 = planes.h_y[:3]
    la = np.array([M[:, 0] @ hx3, M[:, 1] @ hx3, M[:, 3] @ hx3])
    lb = np.array([M[:, 0] @ hy3, M[:, 1] @ hy3, M[:, 3] @ hy3])
    p = np.cross(la, lb)
    if abs(p[2]) < denom_eps:
        raise NoIntersectionError("ray and splat plane are near parallel")
    a, b = p[0] / p[2], p[1] / p[2]
    point = a * M[:, 0] + b * M[:, 1] + M[:, 3]
    if point @ planes.direction <= 0:
        raise NoIntersectionError("intersection lies behind the pixel ray")
    return float(a), float(b), point


# --- splat preparation and tile binning ------------------------------------


def _splat_camera_arrays(model: SplatModel, pose: SE3Pose) -> dict:
    """Per-splat camera-frame quantities for a render from ``pose``."""
    R = pose.rotation
    ta, tb, tn = model.tangent_frames()
    s = model.scales
    ta_c = ta @ R
    tb_c = tb @ R
    Bc = (model.centers - pose.translation) @ R
    return {
        "Ba": s[:, :1] * ta_c,
        "Bb": s[:, 1:] * tb_c,
        "Bc": Bc,
        "ncam": tn @ R,
        "ta_cam": ta_c,
        "tb_cam": tb_c,
        "opac": model.opacities,
        "scales": s,
        "ranges": np.linalg.norm(Bc, axis=1),
    }


def _tile_hits(cam: SphericalCamera, arrays: dict, cfg: RasterConfig):
    """Boolean splat/tile-row and splat/tile-column incidence matrices.

    A splat's support is bounded by the cone subtending its cutoff ball
    (radius ``cutoff_sigma * max(scale)`` around the centroid); a tile is
    hit when the cone's azimuth interval overlaps the tile's azimuth
    interval (circularly) and likewise in elevation.
    """
    T = cfg.tile_size
    tiles_x = (cam.width + T - 1) // T
    tiles_y = (cam.height + T - 1) // T

    Bc = arrays["Bc"]
    r = arrays["ranges"]
    reach = cfg.cutoff_sigma * arrays["scales"].max(axis=1)
    near = r <= reach + 1e-12  # ball contains the sensor: whole image
    sin_om = np.clip(reach / np.maximum(r, 1e-12), 0.0, 1.0)
    omega = np.arcsin(sin_om)

    az_c = np.arctan2(Bc[:, 1], Bc[:, 0])
    el_c = np.arctan2(Bc[:, 2], np.hypot(Bc[:, 0], Bc[:, 1]))

    # azimuth half-extent of the cone; saturates past the poles
    pole = np.abs(el_c) + omega >= np.pi / 2 - 1e-9
    cos_el = np.maximum(np.cos(el_c), 1e-12)
    dgam = np.arcsin(np.clip(sin_om / cos_el, 0.0, 1.0))
    dgam = np.where(near | pole, np.pi, dgam)
    omega = np.where(near, np.pi, omega)

    pitch_az = 1.0 / abs(cam.fx)
    pitch_el = 1.0 / abs(cam.fy)
    pad_az = cfg.bbox_pad_px * pitch_az
    pad_el = cfg.bbox_pad_px * pitch_el

    # angular interval of each tile column / row (sample locations)
    off_u, off_v = cam.grid_offset
    tc_idx = np.arange(tiles_x)
    c_first = tc_idx * T
    c_last = np.minimum(c_first + T, cam.width) - 1
    az_first = (c_first + off_u - cam.cx) / cam.fx
    az_last = (c_last + off_u - cam.cx) / cam.fx
    col_center = 0.5 * (az_first + az_last)
    col_hw = 0.5 * np.abs(az_first - az_last)

    tr_idx = np.arange(tiles_y)
    r_first = tr_idx * T
    r_last = np.minimum(r_first + T, cam.height) - 1
    el_first = (r_first + off_v - cam.cy) / cam.fy
    el_last = (r_last + off_v - cam.cy) / cam.fy
    row_center = 0.5 * (el_first + el_last)
    row_hw = 0.5 * np.abs(el_first - el_last)

    dc = az_c[:, None] - col_center[None, :]
    dc = np.abs(np.mod(dc + np.pi, 2.0 * np.pi) - np.pi)
    col_hit = dc <= dgam[:, None] + col_hw[None, :] + pad_az

    dr = np.abs(el_c[:, None] - row_center[None, :])
    row_hit = dr <= omega[:, None] + row_hw[None, :] + pad_el

    alive = r > 1e-9
    col_hit &= alive[:, None]
    row_hit &= alive[:, None]
    return row_hit, col_hit, tiles_x, tiles_y


def _ragged_arange(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For counts [2,3] returns (owner [0,0,1,1,1], within [0,1,0,1,2])."""
    total = int(counts.sum())
    owner = np.repeat(np.arange(counts.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(starts, counts)
    return owner, within


def _bin_splats(cam: SphericalCamera, arrays: dict, cfg: RasterConfig):
    """Assign splats to tiles; per tile the list is sorted by centroid range."""
    row_hit, col_hit, tiles_x, tiles_y = _tile_hits(cam, arrays, cfg)
    n = row_hit.shape[0]
    nr = row_hit.sum(axis=1)
    nc = col_hit.sum(axis=1)
    rows_owner, rows_tile = np.nonzero(row_hit)
    cols_owner, cols_tile = np.nonzero(col_hit)
    rstart = np.searchsorted(rows_owner, np.arange(n))
    cstart = np.searchsorted(cols_owner, np.arange(n))

    owner, within = _ragged_arange(nr * nc)
    tr = rows_tile[rstart[owner] + within // nc[owner]]
    tc = cols_tile[cstart[owner] + within % nc[owner]]
    tile_id = tr * tiles_x + tc
    order = np.lexsort((owner, arrays["ranges"][owner], tile_id))
    tile_id = tile_id[order]
    pair_splats = owner[order]
    tile_ptr = np.concatenate(
        [[0], np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y))]
    )
    return tile_ptr.astype(np.int64), pair_splats.astype(np.int64), tiles_x, tiles_y


def splat_bbox_tiles(
    cam: SphericalCamera,
    splat,
    pose: SE3Pose,
    cfg: RasterConfig | None = None,
) -> list[tuple[int, int]]:
    """Tiles a single splat may touch, as sorted (tile_row, tile_col) pairs."""
    cfg = cfg or RasterConfig()
    model = SplatModel.from_splats([splat])
    arrays = _splat_camera_arrays(model, pose)
    tile_ptr, pair_splats, tiles_x, _ = _bin_splats(cam, arrays, cfg)
    out = []
    for t in range(tile_ptr.shape[0] - 1):
        if tile_ptr[t + 1] > tile_ptr[t]:
            out.append((t // tiles_x, t % tiles_x))
    return sorted(out)


# --- pair geometry ----------------------------------------------------------


def _pair_geometry(Hx, Hy, V, ray_ok, Ba, Bb, Bc, opac, cfg: RasterConfig):
    """Intersection quantities for P pixels x T splats.

    All (P, T) outputs are zeroed where the pair is unusable; ``use``
    marks pairs that survive every cutoff.
    """
    a1 = Hx @ Ba.T
    a2 = Hx @ Bb.T
    a4 = Hx @ Bc.T
    b1 = Hy @ Ba.T
    b2 = Hy @ Bb.T
    b4 = Hy @ Bc.T
    denom = a1 * b2 - a2 * b1
    ok = (np.abs(denom) >= cfg.denom_eps) & ray_ok[:, None]
    safe = np.where(np.abs(denom) >= cfg.denom_eps, denom, 1.0)
    sa = (a2 * b4 - a4 * b2) / safe
    sb = (a4 * b1 - a1 * b4) / safe
    nu = sa[..., None] * Ba + sb[..., None] * Bb + Bc
    ok &= np.einsum("ptk,pk->pt", nu, V) > 0
    d = np.linalg.norm(nu, axis=-1)
    G = np.exp(-0.5 * (sa * sa + sb * sb))
    a_raw = opac[None, :] * G
    clamped = a_raw > cfg.alpha_clamp
    alpha = np.minimum(a_raw, cfg.alpha_clamp)
    use = ok & (alpha >= cfg.alpha_cutoff)
    alpha = np.where(use, alpha, 0.0)
    return {
        "a1": a1, "a2": a2, "a4": a4,
        "b1": b1, "b2": b2, "b4": b4,
        "denom": safe,
        "sa": sa, "sb": sb, "nu": nu,
        "d": np.where(use, d, 0.0),
        "G": G,
        "alpha": alpha,
        "use": use,
        "clamped": clamped,
    }


def _chunk_transmittance(alpha: np.ndarray, t_in: np.ndarray, stop: float):
    """Per-pair transmittance, blend weights and the carried-out value."""
    one_m = 1.0 - alpha
    prod = np.cumprod(one_m, axis=1)
    excl = np.empty_like(prod)
    excl[:, 0] = 1.0
    excl[:, 1:] = prod[:, :-1]
    t_pair = t_in[:, None] * excl
    live = t_pair >= stop
    w = alpha * t_pair * live
    return w, t_pair, live, t_in * prod[:, -1]


# --- forward ---------------------------------------------------------------


def _render_tile_lists(cam, pose, model, cfg, tile_iter, D, Nimg, O):
    """Shared blend loop: ``tile_iter`` yields (row-slice, col-slice, splat ids)."""
    arrays = _splat_camera_arrays(model, pose)
    dirs, hx, hy, ray_ok = _plane_images(cam)
    for rows, cols, ids in tile_iter:
        if ids.shape[0] == 0:
            continue
        V = dirs[rows, cols].reshape(-1, 3)
        PHx = hx[rows, cols].reshape(-1, 3)
        PHy = hy[rows, cols].reshape(-1, 3)
        Pok = ray_ok[rows, cols].reshape(-1)
        P = V.shape[0]
        t_carry = np.ones(P)
        d_acc = np.zeros(P)
        o_acc = np.zeros(P)
        n_acc = np.zeros((P, 3))
        for k0 in range(0, ids.shape[0], cfg.chunk_size):
            sub = ids[k0 : k0 + cfg.chunk_size]
            g = _pair_geometry(
                PHx, PHy, V, Pok,
                arrays["Ba"][sub], arrays["Bb"][sub], arrays["Bc"][sub],
                arrays["opac"][sub], cfg,
            )
            w, _, _, t_carry = _chunk_transmittance(
                g["alpha"], t_carry, cfg.min_transmittance
            )
            d_acc += np.sum(w * g["d"], axis=1)
            o_acc += np.sum(w, axis=1)
            n_acc += w @ arrays["ncam"][sub]
            if t_carry.max() < cfg.min_transmittance:
                break
        shape = D[rows, cols].shape
        D[rows, cols] = d_acc.reshape(shape)
        O[rows, cols] = o_acc.reshape(shape)
        Nimg[rows, cols] = n_acc.reshape(shape + (3,))


def rasterize_forward(
    cam: SphericalCamera,
    pose: SE3Pose,
    model: SplatModel,
    cfg: RasterConfig | None = None,
) -> tuple[RenderOutput, BlendRecords]:
    """Render the model from ``pose`` (sensor-in-world) onto the camera grid."""
    cfg = cfg or RasterConfig()
    H, W = cam.height, cam.width
    D = np.zeros((H, W))
    O = np.zeros((H, W))
    Nimg = np.zeros((H, W, 3))
    if len(model) == 0:
        T = cfg.tile_size
        records = BlendRecords(
            cam, pose.copy(), cfg, 0, model.version,
            np.zeros(((H + T - 1) // T) * ((W + T - 1) // T) + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            (W + T - 1) // T, (H + T - 1) // T,
        )
        return RenderOutput(D, Nimg, O), records

    arrays = _splat_camera_arrays(model, pose)
    tile_ptr, pair_splats, tiles_x, tiles_y = _bin_splats(cam, arrays, cfg)
    T = cfg.tile_size

    def tiles():
        for t in range(tiles_x * tiles_y):
            lo, hi = tile_ptr[t], tile_ptr[t + 1]
            if lo == hi:
                continue
            r0 = (t // tiles_x) * T
            c0 = (t % tiles_x) * T
            yield (
                slice(r0, min(r0 + T, H)),
                slice(c0, min(c0 + T, W)),
                pair_splats[lo:hi],
            )

    _render_tile_lists(cam, pose, model, cfg, tiles(), D, Nimg, O)
    records = BlendRecords(
        cam, pose.copy(), cfg, len(model), model.version,
        tile_ptr, pair_splats, tiles_x, tiles_y,
    )
    return RenderOutput(D, Nimg, O), records


def reference_rasterize(
    cam: SphericalCamera,
    pose: SE3Pose,
    model: SplatModel,
    cfg: RasterConfig | None = None,
) -> RenderOutput:
    """Brute-force renderer: every splat against every pixel, no tiling.

    Same intersection math, cutoffs and blend order as the tiled path;
    used as the correctness oracle.
    """
    cfg = cfg or RasterConfig()
    H, W = cam.height, cam.width
    D = np.zeros((H, W))
    O = np.zeros((H, W))
    Nimg = np.zeros((H, W, 3))
    if len(model) == 0:
        return RenderOutput(D, Nimg, O)
    arrays = _splat_camera_arrays(model, pose)
    order = np.lexsort((np.arange(len(model)), arrays["ranges"]))

    def bands():
        for r0 in range(0, H, cfg.tile_size):
            yield slice(r0, min(r0 + cfg.tile_size, H)), slice(0, W), order

    _render_tile_lists(cam, pose, model, cfg, bands(), D, Nimg, O)
    return RenderOutput(D, Nimg, O)


# --- backward ---------------------------------------------------------------


def rasterize_backward(
    model: SplatModel,
    records: BlendRecords,
    render: RenderOutput,
    pixel_grads: PixelGradients,
) -> SplatGradients:
    """Gradients of a pixel-space loss w.r.t. splat parameters.

    ``records`` and ``render`` must come from :func:`rasterize_forward` on
    the same (unmodified) model; a changed model raises ``GeometryError``.
    Splats touching no pixel get zero gradients.
    """
    if records.n_splats != len(model) or records.model_version != model.version:
        raise GeometryError("blend records are stale for this model")
    cam, pose, cfg = records.cam, records.pose, records.config
    H, W = cam.height, cam.width
    N = len(model)
    out = SplatGradients.zeros(N)
    if N == 0 or records.pair_splats.shape[0] == 0:
        return out

    arrays = _splat_camera_arrays(model, pose)
    dirs, hx, hy, ray_ok = _plane_images(cam)
    Ts = cfg.tile_size
    gD_img, gN_img, gO_img = (
        pixel_grads.d_range,
        pixel_grads.d_normal,
        pixel_grads.d_opacity,
    )

    # camera-frame accumulators, reduced to parameters at the end
    acc_ba = np.zeros((N, 3))
    acc_bb = np.zeros((N, 3))
    acc_bc = np.zeros((N, 3))
    acc_n = np.zeros((N, 3))
    acc_o = np.zeros(N)

    for t in range(records.tiles_x * records.tiles_y):
        lo, hi = records.tile_ptr[t], records.tile_ptr[t + 1]
        if lo == hi:
            continue
        ids_all = records.pair_splats[lo:hi]
        r0 = (t // records.tiles_x) * Ts
        c0 = (t % records.tiles_x) * Ts
        rows = slice(r0, min(r0 + Ts, H))
        cols = slice(c0, min(c0 + Ts, W))
        V = dirs[rows, cols].reshape(-1, 3)
        PHx = hx[rows, cols].reshape(-1, 3)
        PHy = hy[rows, cols].reshape(-1, 3)
        Pok = ray_ok[rows, cols].reshape(-1)
        gD = gD_img[rows, cols].reshape(-1)
        gN = gN_img[rows, cols].reshape(-1, 3)
        gO = gO_img[rows, cols].reshape(-1)
        D_tot = render.range[rows, cols].reshape(-1)
        N_tot = render.normal[rows, cols].reshape(-1, 3)
        O_tot = render.opacity[rows, cols].reshape(-1)
        P = V.shape[0]

        t_carry = np.ones(P)
        pre_d = np.zeros(P)
        pre_o = np.zeros(P)
        pre_n = np.zeros((P, 3))

        for k0 in range(0, ids_all.shape[0], cfg.chunk_size):
            sub = ids_all[k0 : k0 + cfg.chunk_size]
            Ba, Bb, Bc = arrays["Ba"][sub], arrays["Bb"][sub], arrays["Bc"][sub]
            ncam = arrays["ncam"][sub]
            g = _pair_geometry(PHx, PHy, V, Pok, Ba, Bb, Bc, arrays["opac"][sub], cfg)
            alpha = g["alpha"]
            w, t_pair, live, t_next = _chunk_transmittance(
                alpha, t_carry, cfg.min_transmittance
            )
            active = w > 0.0
            d = g["d"]
            wd = w * d
            wn = w[..., None] * ncam[None, :, :]

            # suffix sums of later contributions per channel
            B_d = D_tot[:, None] - (pre_d[:, None] + np.cumsum(wd, axis=1))
            B_o = O_tot[:, None] - (pre_o[:, None] + np.cumsum(w, axis=1))
            B_n = N_tot[:, None, :] - (
                pre_n[:, None, :] + np.cumsum(wn, axis=1)
            )

            one_m = np.where(active, 1.0 - alpha, 1.0)
            d_alpha = (
                gD[:, None] * (d * t_pair - B_d / one_m)
                + gO[:, None] * (t_pair - B_o / one_m)
                + np.einsum(
                    "pc,ptc->pt",
                    gN,
                    ncam[None, :, :] * t_pair[..., None] - B_n / one_m[..., None],
                )
            )
            d_alpha = np.where(active, d_alpha, 0.0)

            # alpha routes: kernel coordinates and opacity (dead where clamped)
            free = active & ~g["clamped"]
            dd = gD[:, None] * w
            d_safe = np.where(d > 0, d, 1.0)
            sa, sb, nu = g["sa"], g["sb"], g["nu"]
            nu_ba = np.einsum("ptk,tk->pt", nu, Ba)
            nu_bb = np.einsum("ptk,tk->pt", nu, Bb)
            dsa = np.where(free, -d_alpha * alpha * sa, 0.0) + dd * nu_ba / d_safe
            dsb = np.where(free, -d_alpha * alpha * sb, 0.0) + dd * nu_bb / d_safe
            acc_o[sub] += np.sum(np.where(free, d_alpha * g["G"], 0.0), axis=0)

            # homogeneous intersection point route
            den = g["denom"]
            gp1 = dsa / den
            gp2 = dsb / den
            gp3 = -(sa * dsa + sb * dsb) / den
            a1, a2, a4 = g["a1"], g["a2"], g["a4"]
            b1, b2, b4 = g["b1"], g["b2"], g["b4"]
            # rho_a = gp x l_a, rho_b = gp x l_b, componentwise
            ra0 = gp2 * a4 - gp3 * a2
            ra1 = gp3 * a1 - gp1 * a4
            ra2 = gp1 * a2 - gp2 * a1
            rb0 = gp2 * b4 - gp3 * b2
            rb1 = gp3 * b1 - gp1 * b4
            rb2 = gp1 * b2 - gp2 * b1

            dnu_scale = dd / d_safe
            gba = (
                -rb0[..., None] * PHx[:, None, :]
                + ra0[..., None] * PHy[:, None, :]
                + (dnu_scale * sa)[..., None] * nu
            )
            gbb = (
                -rb1[..., None] * PHx[:, None, :]
                + ra1[..., None] * PHy[:, None, :]
                + (dnu_scale * sb)[..., None] * nu
            )
            gbc = (
                -rb2[..., None] * PHx[:, None, :]
                + ra2[..., None] * PHy[:, None, :]
                + dnu_scale[..., None] * nu
            )

            # ids are unique within a tile, so fancy-index add is safe
            acc_ba[sub] += np.einsum("ptc->tc", gba)
            acc_bb[sub] += np.einsum("ptc->tc", gbb)
            acc_bc[sub] += np.einsum("ptc->tc", gbc)
            acc_n[sub] += np.einsum("pt,pc->tc", w, gN)

            pre_d += wd.sum(axis=1)
            pre_o += w.sum(axis=1)
            pre_n += wn.sum(axis=1)
            t_carry = t_next
            if t_carry.max() < cfg.min_transmittance:
                break

    # camera-frame accumulators to world-frame parameter gradients
    R = pose.rotation
    s = arrays["scales"]
    out.d_centers = acc_bc @ R.T
    out.d_t_alpha = s[:, :1] * (acc_ba @ R.T)
    out.d_t_beta = s[:, 1:] * (acc_bb @ R.T)
    out.d_normal = acc_n @ R.T
    out.d_scales = np.stack(
        [
            np.einsum("nc,nc->n", acc_ba, arrays["ta_cam"]),
            np.einsum("nc,nc->n", acc_bb, arrays["tb_cam"]),
        ],
        axis=1,
    )
    out.d_opacity = acc_o
    return out
