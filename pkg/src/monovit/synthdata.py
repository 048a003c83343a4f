"""Synthetic training data: ray-cast scenes with exact depth and poses.

Scenes are a textured corridor: infinite ground plane, an infinite back
wall, and a few axis-aligned boxes resting on the ground, so every ray hits
textured geometry and depth stays in roughly [2, 20] scene units.  Surfaces
are Lambertian with a procedural 3-D value-noise texture evaluated at the
world-space hit point, which makes the views photometrically consistent by
construction — the basis of the dataset's self-consistency certificate.

Files: 8-bit binary PPM images, little-endian PFM depth, a `key=value`
manifest, and per-triplet pose text files (axis-angle + translation).
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import DepthRange, Intrinsics, backproject, project, warp
from .losses import photometric
from .posenet import SE3, Pose6DoF, se3_exp

AA_TAPS = 5               # 5x5 subpixel taps per output pixel
AA_SPACING = 0.35         # tap pitch in pixels
AA_SIGMA = 1.1            # Gaussian prefilter width in pixels
TEXTURE_AMP = 0.85        # noise amplitude around each surface's base color
OCTAVE_FREQS = (0.2, 0.4, 0.8, 1.6)   # world-space cycles per unit
OCTAVE_AMPS = (1.0, 0.55, 0.5, 0.35)  # relative octave weights; the upper
# octaves carry most of the pose-error response on distant surfaces, where
# the low octave spans tens of pixels and barely reacts to a 1 px shift
ANTIALIAS_B = 4.8         # octave weight exp(-(B/wavelength_px)^2)
NEAR_CLIP = 0.1
BACKGROUND = 0.5          # used only if a ray escapes the corridor
GROUND_Y = 2.5            # camera height above the ground plane (y down)


# ------------------------------------------------------------ small SO(3)


def rot_from_aa(aa):
    """Rodrigues: axis-angle (3,) -> rotation matrix (3,3), plain numpy."""
    aa = np.asarray(aa, float)
    th = np.linalg.norm(aa)
    if th < 1e-12:
        return np.eye(3)
    k = aa / th
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(th) * kx + (1 - np.cos(th)) * (kx @ kx)


def aa_from_rot(r):
    """Log map for rotations comfortably below pi (generated motions are)."""
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    cos_th = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    sin_th = np.linalg.norm(w) / 2.0
    th = np.arctan2(sin_th, cos_th)
    if th < 1e-12:
        return w / 2.0
    return w * (th / (2.0 * sin_th))


def relative_pose(r_tgt, t_tgt, r_src, t_src):
    """T mapping target-camera points into the source camera: (R, t)."""
    r_rel = r_src.T @ r_tgt
    t_rel = r_src.T @ (t_tgt - t_src)
    return r_rel, t_rel


# ------------------------------------------------------------ texture


def _hash01(ix, iy, iz, seed):
    """Integer lattice -> [0,1), stateless and order-independent."""
    seed_mix = (int(seed) * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF
    x = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(seed_mix))
    x ^= x >> np.uint64(33)
    x *= np.uint64(0xFF51AFD7ED558CCD)
    x ^= x >> np.uint64(29)
    x *= np.uint64(0xC4CEB9FE1A85EC53)
    x ^= x >> np.uint64(32)
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def _value_noise(p, seed):
    """Smooth lattice noise in [-1, 1] at points p [...,3]."""
    cell = np.floor(p)
    frac = p - cell
    i = cell.astype(np.int64)
    u = _fade(frac)
    acc = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(i[..., 0] + dx, i[..., 1] + dy,
                                 i[..., 2] + dz, seed)
                wx = u[..., 0] if dx else 1.0 - u[..., 0]
                wy = u[..., 1] if dy else 1.0 - u[..., 1]
                wz = u[..., 2] if dz else 1.0 - u[..., 2]
                acc += corner * wx * wy * wz
    return 2.0 * acc - 1.0


def _slant(points, normal_axis):
    """Foreshortening |n-hat . p-hat| of the hit surface, in [0.05, 1].

    Uses the ray from the world origin rather than from the camera, so the
    value depends only on the 3-D point and the surface (all cameras sit
    within a couple of units of the origin).
    """
    r = np.linalg.norm(points, axis=-1)
    comp = np.take_along_axis(np.abs(points), normal_axis[..., None],
                              axis=-1)[..., 0]
    return np.clip(comp / np.maximum(r, 1e-9), 0.05, 1.0)


def _texture(points, seed, fx, slant):
    """Band-limited multi-octave noise in [-1,1] at world points [...,3].

    Each octave is attenuated by its worst-case on-screen wavelength: the
    frontal wavelength fx/(f*z) shrunk by the foreshortening factor `slant`
    (cosine between surface normal and the ray from the world origin, so a
    grazing ground plane attenuates much earlier than a frontal wall).
    Both z and slant are functions of the 3-D point and surface alone, not
    of the camera, so the texture stays identical across views.
    """
    z = np.maximum(points[..., 2], 1.0)
    total = np.zeros(points.shape[:-1])
    norm = 0.0
    for o, (f, amp) in enumerate(zip(OCTAVE_FREQS, OCTAVE_AMPS)):
        wavelength_px = slant * fx / (f * z)
        w = np.exp(-((ANTIALIAS_B / wavelength_px) ** 2))
        total += amp * w * _value_noise(points * f, seed * 1000003 + o)
        norm += amp
    return total / norm


# ------------------------------------------------------------ scene


@dataclass(frozen=True)
class Box:
    lo: np.ndarray   # (3,) min corner
    hi: np.ndarray   # (3,) max corner
    seed: int


@dataclass(frozen=True)
class Scene:
    """World model: y points down, ground below the camera, wall ahead."""

    ground_y: float
    wall_z: float
    boxes: tuple
    surface_colors: tuple   # base RGB + tint RGB per surface id
    seed: int


def random_scene(rng) -> Scene:
    n_boxes = int(rng.integers(2, 4))
    boxes = []
    for b in range(n_boxes):
        sx, sy, sz = rng.uniform(0.7, 1.4, size=3)
        cx = rng.uniform(-2.2, 2.2)
        cz = rng.uniform(6.5, 9.5)
        cy = GROUND_Y - sy / 2.0   # resting on the ground plane
        lo = np.array([cx - sx / 2, cy - sy / 2, cz - sz / 2])
        hi = np.array([cx + sx / 2, cy + sy / 2, cz + sz / 2])
        boxes.append(Box(lo=lo, hi=hi, seed=b + 2))
    colors = []
    for _ in range(2 + n_boxes):   # ground, wall, boxes
        # Surfaces share a near-identical base albedo: silhouette edges then
        # step only by the texture difference, keeping the warp residual of
        # edge pixels at the same scale as everywhere else.
        base = rng.uniform(0.47, 0.53, size=3)
        tint = rng.uniform(0.7, 1.0, size=3)
        colors.append((base, tint))
    return Scene(ground_y=GROUND_Y, wall_z=float(rng.uniform(12.0, 16.0)),
                 boxes=tuple(boxes), surface_colors=tuple(colors),
                 seed=int(rng.integers(1, 2 ** 31)))


def _intersect(scene, origin, dirs):
    """Nearest hit along rays origin + t*dirs; t is z-depth (dirs_cam.z = 1).

    dirs: [...,3] world directions with unit camera-z component.
    Returns (t [...], surface_id [...], normal_axis [...]); id -1 means no
    hit.  normal_axis is the world axis (0/1/2) of the hit face's normal.
    """
    sh = dirs.shape[:-1]
    best_t = np.full(sh, np.inf)
    best_id = np.full(sh, -1, dtype=np.int64)
    best_ax = np.zeros(sh, dtype=np.int64)

    def consider(t, mask, sid, axis):
        better = mask & (t > NEAR_CLIP) & (t < best_t)
        best_t[better] = t[better]
        best_id[better] = sid
        best_ax[better] = axis[better] if isinstance(axis, np.ndarray) else axis

    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (scene.ground_y - origin[1]) / dy
        consider(np.where(dy > 1e-12, t_ground, np.inf), dy > 1e-12, 0, 1)
        dz = dirs[..., 2]
        t_wall = (scene.wall_z - origin[2]) / dz
        consider(np.where(dz > 1e-12, t_wall, np.inf), dz > 1e-12, 1, 2)
        for i, box in enumerate(scene.boxes):
            t_lo = (box.lo - origin) / dirs
            t_hi = (box.hi - origin) / dirs
            t_axis = np.minimum(t_lo, t_hi)
            t_near = t_axis.max(axis=-1)
            t_far = np.maximum(t_lo, t_hi).min(axis=-1)
            hit = (t_far >= t_near) & (t_far > NEAR_CLIP)
            t_enter = np.where(t_near > NEAR_CLIP, t_near, t_far)
            consider(np.where(hit, t_enter, np.inf), hit, 2 + i,
                     t_axis.argmax(axis=-1))
    return best_t, best_id, best_ax


def render(scene: Scene, cam_r, cam_t, k: Intrinsics, size):
    """Ray-cast one view: returns (image [3,H,W] in [0,1], depth [H,W]).

    cam_r/cam_t are camera-to-world.  The image is a Gaussian-weighted
    average over an AA_TAPS x AA_TAPS subpixel tap grid (an antialiasing
    prefilter, so resampling the image at fractional offsets stays
    accurate); the depth map is the exact center sample.
    """
    h, w = size
    ss = AA_TAPS
    offs = (np.arange(ss) - (ss - 1) / 2.0) * AA_SPACING
    wgt1 = np.exp(-offs ** 2 / (2.0 * AA_SIGMA ** 2))
    wgt = wgt1[:, None] * wgt1[None, :]         # [ss,ss]
    wgt = wgt / wgt.sum()
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    du, dv = np.meshgrid(offs, offs)            # [ss,ss]
    us = u[None, None] + du[:, :, None, None]   # [ss,ss,H,W]
    vs = v[None, None] + dv[:, :, None, None]
    dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy,
                         np.ones_like(us)], axis=-1)
    dirs = dirs_cam @ cam_r.T                   # world directions
    t, sid, nax = _intersect(scene, cam_t, dirs)
    miss = sid < 0
    t_safe = np.where(miss, 1.0, t)
    points = cam_t + t_safe[..., None] * dirs
    slant = _slant(points, nax)

    img = np.full(t.shape + (3,), BACKGROUND)
    for s in range(2 + len(scene.boxes)):
        sel = sid == s
        if not sel.any():
            continue
        base, tint = scene.surface_colors[s]
        noise = _texture(points[sel], scene.seed * 31 + s, k.fx, slant[sel])
        img[sel] = np.clip(base + TEXTURE_AMP * noise[:, None] * tint, 0.0, 1.0)

    image = np.tensordot(wgt, img, axes=([0, 1], [0, 1]))  # [H,W,3]
    image = image.transpose(2, 0, 1)                       # [3,H,W]
    center = ss // 2
    depth = t[center, center].copy()
    depth[miss[center, center]] = 100.0
    return image, depth


# ------------------------------------------------------------ file formats


def write_ppm(path, image):
    """image [3,H,W] floats in [0,1] -> binary 8-bit P6."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """-> [3,H,W] float64 in [0,1]."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pfm(path, depth):
    """depth [H,W] -> grayscale PFM, little-endian (negative scale)."""
    arr = np.asarray(depth, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(arr[::-1].tobytes())    # PFM stores rows bottom-to-top


def read_pfm(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError(f"{path}: not a grayscale PFM")
    w, h = map(int, parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=h * w)
    return data.reshape(h, w)[::-1].astype(np.float64)


# ------------------------------------------------------------ triplets


@dataclass
class Triplet:
    """One training sample; images quantized exactly as stored on disk."""

    target: np.ndarray      # [3,H,W]
    src_fwd: np.ndarray
    src_bwd: np.ndarray
    gt_depth: np.ndarray    # [H,W]
    pose_fwd: np.ndarray    # 6 floats: axis-angle + translation, target->src
    pose_bwd: np.ndarray
    k: Intrinsics

    def se3_fwd(self) -> SE3:
        return _se3_of(self.pose_fwd)

    def se3_bwd(self) -> SE3:
        return _se3_of(self.pose_bwd)


def _se3_of(vec6):
    with ad.no_grad():
        return se3_exp(Pose6DoF(Tensor(vec6[None, :3].copy()),
                                Tensor(vec6[None, 3:].copy())))


def default_intrinsics(h, w) -> Intrinsics:
    return Intrinsics(fx=0.9 * w, fy=0.9 * w,
                      cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def _quantize(image):
    return np.clip(np.round(image * 255.0), 0, 255) / 255.0


def _camera_track(rng, motion):
    """Three camera-to-world poses: a sideways-leaning dolly.

    The lateral component produces image flow of roughly constant magnitude
    across the frame, which keeps the photometric loss responsive to pose
    errors everywhere (pure forward motion has zero flow at the image
    center).  Its sign is drawn once per track so the two source views
    occlude complementary sides of every silhouette.  The forward component
    stays below the lateral one: forward motion rescales texture footprints
    by t_z/z per frame, and resampling across that scale change is the
    costliest term in the self-consistency residual.
    """
    poses = []
    r = rot_from_aa(rng.normal(0.0, 0.02, size=3))
    t = np.zeros(3)
    lateral = rng.choice([-1.0, 1.0]) * rng.uniform(0.7, 0.95)
    for _ in range(3):
        poses.append((r, t.copy()))
        step_cam = np.array([lateral + rng.normal(0.0, 0.05),
                             rng.normal(0.0, 0.08),
                             rng.uniform(0.55, 0.85)]) * motion
        t = t + r @ step_cam
        r = r @ rot_from_aa(rng.normal(0.0, 0.03, size=3) * motion)
    # recenter so the middle (target) camera sits at the origin, where the
    # texture band-limit's canonical-ray approximation is tightest
    mid = poses[1][1].copy()
    return [(r, t - mid) for r, t in poses]


def make_triplet(rng, k, size, motion):
    scene = random_scene(rng)
    track = _camera_track(rng, motion)
    frames = [render(scene, r, t, k, size) for r, t in track]
    (r_bwd, t_bwd), (r_tgt, t_tgt), (r_fwd, t_fwd) = track
    rf, tf = relative_pose(r_tgt, t_tgt, r_fwd, t_fwd)
    rb, tb = relative_pose(r_tgt, t_tgt, r_bwd, t_bwd)
    return Triplet(
        target=_quantize(frames[1][0]),
        src_fwd=_quantize(frames[2][0]),
        src_bwd=_quantize(frames[0][0]),
        gt_depth=frames[1][1].astype(np.float32).astype(np.float64),
        pose_fwd=np.concatenate([aa_from_rot(rf), tf]),
        pose_bwd=np.concatenate([aa_from_rot(rb), tb]),
        k=k,
    )


def _consistent_mask(depth, rel_step=0.08, crease_step=0.02, radius=None):
    """Pixels whose neighbourhood is free of depth discontinuities.

    Photometric consistency cannot hold near an occlusion boundary: the
    pixel mixes two surfaces with different parallax, so even a perfect
    renderer disagrees with the warp there.  Surface junctions (wall meets
    ground, box meets ground) misbehave the same way although depth runs
    continuously through them: the junction line shifts between views, and
    pixels whose antialiasing footprint straddles it mix the two textures
    in view-dependent proportions.  Those creases show up as slope breaks,
    so the mask drops both relative depth steps above `rel_step` and
    relative second differences above `crease_step` (the ground's own
    perspective curvature stays well below it), each dilated by `radius`.
    The default radius grows with resolution because the disoccluded band
    is a fixed angular width, hence a fixed fraction of the image.
    """
    if radius is None:
        radius = max(4, round(depth.shape[0] / 8))
    jump_x = np.abs(np.diff(depth, axis=1)) / np.minimum(depth[:, 1:],
                                                         depth[:, :-1])
    jump_y = np.abs(np.diff(depth, axis=0)) / np.minimum(depth[1:],
                                                         depth[:-1])
    edge = np.zeros(depth.shape, dtype=bool)
    edge[:, 1:] |= jump_x > rel_step
    edge[:, :-1] |= jump_x > rel_step
    edge[1:] |= jump_y > rel_step
    edge[:-1] |= jump_y > rel_step
    crease_x = np.abs(np.diff(depth, 2, axis=1)) / depth[:, 1:-1]
    crease_y = np.abs(np.diff(depth, 2, axis=0)) / depth[1:-1]
    edge[:, 1:-1] |= crease_x > crease_step
    edge[1:-1] |= crease_y > crease_step
    return ~ndimage.binary_dilation(edge, iterations=radius)


def reprojection_residual(trip: Triplet) -> float:
    """Mean photometric loss of gt-depth/gt-pose warping: the certificate.

    Per pixel the better of the two source frames is kept (a pixel hidden
    behind a box in one source is visible in the other), and occlusion
    neighbourhoods are excluded entirely; see _consistent_mask.
    """
    with ad.no_grad():
        target = Tensor(trip.target[None])
        depth = Tensor(trip.gt_depth[None, None])
        pts = backproject(depth, trip.k)
        maps, valids = [], []
        for src, pose in ((trip.src_fwd, trip.se3_fwd()),
                          (trip.src_bwd, trip.se3_bwd())):
            grid, valid = project(pts, pose, trip.k)
            loss = photometric(warp(Tensor(src[None]), grid), target)
            maps.append(np.where(valid, loss.data, np.inf))
            valids.append(valid)
        both = np.minimum(maps[0], maps[1])
        keep = (valids[0] | valids[1]) & _consistent_mask(trip.gt_depth)
        return float(both[keep].mean())


def make_dataset(out_dir, seed, n_triplets, size=(128, 128), motion=1.3):
    """Render and write a dataset; returns (triplets, certificate mean)."""
    if n_triplets < 1:
        raise ValueError("n_triplets must be >= 1")
    h, w = size
    k = default_intrinsics(h, w)
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    triplets, residuals = [], []
    records = []
    for i in range(n_triplets):
        trip = make_triplet(rng, k, size, motion)
        triplets.append(trip)
        residuals.append(reprojection_residual(trip))
        stem = f"{i:03d}"
        files = [f"{stem}_target.ppm", f"{stem}_src_fwd.ppm",
                 f"{stem}_src_bwd.ppm", f"{stem}_depth.pfm", f"{stem}_pose.txt"]
        write_ppm(os.path.join(out_dir, files[0]), trip.target)
        write_ppm(os.path.join(out_dir, files[1]), trip.src_fwd)
        write_ppm(os.path.join(out_dir, files[2]), trip.src_bwd)
        write_pfm(os.path.join(out_dir, files[3]), trip.gt_depth)
        with open(os.path.join(out_dir, files[4]), "w") as f:
            for vec in (trip.pose_fwd, trip.pose_bwd):
                f.write(" ".join(f"{v:.17g}" for v in vec) + "\n")
        records.append(f"triplet={stem} " + " ".join(files))
    cert = float(np.mean(residuals))
    lines = [
        "version=1", f"width={w}", f"height={h}",
        f"fx={k.fx:.17g}", f"fy={k.fy:.17g}",
        f"cx={k.cx:.17g}", f"cy={k.cy:.17g}",
        "d_min=0.1", "d_max=100.0",
        f"n_triplets={n_triplets}", f"seed={seed}", f"motion={motion:.17g}",
        f"certificate_mean={cert:.17g}",
        f"certificate_max={max(residuals):.17g}",
    ] + records
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return triplets, cert


def load_dataset(data_dir):
    """Read a generated dataset back: (list of Triplet, DepthRange)."""
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.txt under {data_dir}")
    kv, records = {}, []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, value = line.split("=", 1)
            if key == "triplet":
                records.append(value.split())
            else:
                kv[key] = value
    k = Intrinsics(fx=float(kv["fx"]), fy=float(kv["fy"]),
                   cx=float(kv["cx"]), cy=float(kv["cy"]))
    depth_range = DepthRange(float(kv["d_min"]), float(kv["d_max"]))
    triplets = []
    for rec in records:
        _, f_tgt, f_fwd, f_bwd, f_depth, f_pose = rec
        poses = np.loadtxt(os.path.join(data_dir, f_pose)).reshape(2, 6)
        triplets.append(Triplet(
            target=read_ppm(os.path.join(data_dir, f_tgt)),
            src_fwd=read_ppm(os.path.join(data_dir, f_fwd)),
            src_bwd=read_ppm(os.path.join(data_dir, f_bwd)),
            gt_depth=read_pfm(os.path.join(data_dir, f_depth)),
            pose_fwd=poses[0], pose_bwd=poses[1], k=k,
        ))
    if len(triplets) != int(kv.get("n_triplets", len(triplets))):
        raise ValueError("manifest n_triplets disagrees with records")
    return triplets, depth_range
