"""Synthetic two-room RGB-D simulator.

Axis-aligned box scenes rendered by a slab-test raycaster, parametric
circuit trajectories with drifted odometry, and a plain on-disk dataset
format (binary PPM color, 16-bit PGM depth in millimeters).

World frame follows the camera convention: x right, y down, z across
the room, so the floor sits at positive y.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, matrix_to_quat, se3_exp


class SceneSimError(Exception):
    pass


class EmptySpec(SceneSimError):
    pass


class MalformedFile(SceneSimError):
    pass


# Fake per-face lighting: shade[axis, 0] for a -axis outward normal,
# shade[axis, 1] for +axis. Keeps adjacent faces distinguishable.
_FACE_SHADE = np.array([[1.0, 0.82], [0.92, 0.70], [0.88, 0.76]])


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box with a constant or checkered surface color."""

    bmin: np.ndarray
    bmax: np.ndarray
    color: np.ndarray
    color2: np.ndarray | None = None
    checker_scale: float | None = None


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    diameter: float


@dataclass
class Frame:
    """One RGB-D observation. color is (H,W,3) in [0,1], depth (H,W) meters, 0 = invalid."""

    color: np.ndarray
    depth: np.ndarray
    index: int
    agent_id: int


@dataclass
class AgentTrajectory:
    agent_id: int
    gt: list
    odom: list | None = None


def build_scene(spec):
    """Build a Scene from a config dict with ``diameter`` and ``primitives``."""
    prims = spec.get("primitives", [])
    if not prims:
        raise EmptySpec("scene spec lists no primitives")
    out = []
    for p in prims:
        bmin = np.asarray(p["box"][0], dtype=np.float64)
        bmax = np.asarray(p["box"][1], dtype=np.float64)
        if bmin.shape != (3,) or bmax.shape != (3,) or not np.all(bmax > bmin):
            raise SceneSimError(f"degenerate box {p['box']}")
        checker = p.get("checker")
        color2 = scale = None
        if checker is not None:
            color2 = np.asarray(checker["color2"], dtype=np.float64)
            scale = float(checker["scale"])
            if scale <= 0:
                raise SceneSimError("checker scale must be positive")
        out.append(Primitive(bmin, bmax, np.asarray(p["color"], dtype=np.float64), color2, scale))
    diameter = float(spec["diameter"])
    lo = np.min([p.bmin for p in out], axis=0)
    hi = np.max([p.bmax for p in out], axis=0)
    if np.max(hi - lo) > diameter + 1e-9:
        raise SceneSimError("primitives exceed declared scene diameter")
    return Scene(tuple(out), diameter)


def _slab_hit(prim, o, d):
    """Vectorized ray/AABB slab test.

    Returns (hit mask, t, face axis, face sign) for rays o + t*d. t is in
    units of d, so unnormalized camera rays give z-depth directly.
    """
    zero = np.abs(d) < 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (prim.bmin - o) * inv
        t2 = (prim.bmax - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    inside = (o >= prim.bmin) & (o <= prim.bmax)
    lo = np.where(zero, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(zero, np.where(inside, np.inf, -np.inf), hi)
    t_enter = lo.max(axis=-1)
    t_exit = hi.min(axis=-1)
    eps = 1e-9
    hit = (t_enter <= t_exit) & (t_exit > eps)
    entering = t_enter > eps
    t = np.where(entering, t_enter, t_exit)
    axis = np.where(entering, np.argmax(lo, axis=-1), np.argmin(hi, axis=-1))
    d_axis = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0]
    sign = np.where(entering, -np.sign(d_axis), np.sign(d_axis))
    return hit, t, axis, sign.astype(np.int64)


def raycast_frame(scene, intr, pose_gt, index=0, agent_id=0):
    """Render one RGB-D frame; misses get depth 0 and black color."""
    H, W = intr.height, intr.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    d_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones((H, W))], axis=-1
    ).reshape(-1, 3)
    d = d_cam @ pose_gt.rotation.T
    o = pose_gt.t
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    best_p = np.full(n, -1, dtype=np.int64)
    best_axis = np.zeros(n, dtype=np.int64)
    best_sign = np.zeros(n, dtype=np.int64)
    for pi, prim in enumerate(scene.primitives):
        hit, t, axis, sign = _slab_hit(prim, o, d)
        upd = hit & (t < best_t)
        best_t[upd] = t[upd]
        best_p[upd] = pi
        best_axis[upd] = axis[upd]
        best_sign[upd] = sign[upd]

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    pts = o + d * depth[:, None]
    color = np.zeros((n, 3))
    for pi, prim in enumerate(scene.primitives):
        m = best_p == pi
        if not np.any(m):
            continue
        if prim.checker_scale is not None:
            cell = np.floor(pts[m] / prim.checker_scale).astype(np.int64)
            k = cell.shape[0]
            par = (cell.sum(axis=1) - cell[np.arange(k), best_axis[m]]) % 2
            base = np.where(par[:, None] == 1, prim.color2, prim.color)
        else:
            base = np.broadcast_to(prim.color, (int(m.sum()), 3))
        shade = _FACE_SHADE[best_axis[m], (best_sign[m] + 1) // 2]
        color[m] = base * shade[:, None]
    return Frame(color.reshape(H, W, 3), depth.reshape(H, W), index, agent_id)


def look_at(pos, target):
    """Camera-to-world pose at pos with +z toward target, y kept downward."""
    pos = np.asarray(pos, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - pos
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise SceneSimError("look_at target coincides with position")
    z = z / nz
    x = np.cross([0.0, 1.0, 0.0], z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose(matrix_to_quat(R), pos)


def gen_trajectory(scene, agent_spec, n_frames):
    """Ground-truth circuit: ellipse in the xz plane, gaze toward the interior.

    With a ``gaze`` spec the camera looks through the circuit center at a
    point reflected across it (beta scales the reflection, height sets
    the vertical aim); with a ``target`` spec it looks at a fixed point.
    """
    if n_frames < 1:
        raise SceneSimError("n_frames must be >= 1")
    ell = agent_spec["ellipse"]
    c = np.asarray(ell["center"], dtype=np.float64)
    rx, rz = float(ell["radius_x"]), float(ell["radius_z"])
    bob = float(ell.get("bob", 0.0))
    phase = float(agent_spec.get("phase", 0.0))
    laps = float(agent_spec.get("laps", 1.0))
    gaze = agent_spec.get("gaze")
    gt = []
    for i in range(n_frames):
        th = phase + 2.0 * np.pi * laps * i / n_frames
        pos = c + np.array([rx * np.cos(th), bob * np.sin(2.0 * th), rz * np.sin(th)])
        if gaze is not None:
            beta = float(gaze["beta"])
            target = c - beta * (pos - c)
            target[1] = float(gaze["height"])
        else:
            target = np.asarray(agent_spec["target"], dtype=np.float64)
        gt.append(look_at(pos, target))
    return AgentTrajectory(int(agent_spec.get("agent_id", 0)), gt, None)


def perturb_odometry(traj, sigma_rot, sigma_trans, seed):
    """Drifted odometry: odom_i = odom_{i-1} * (gt_{i-1}^-1 gt_i) * exp(noise).

    odom_0 is the identity, so odometry lives in the agent-local frame
    anchored at the first ground-truth pose.
    """
    rng = np.random.default_rng(seed)
    odom = [Pose.identity()]
    for i in range(1, len(traj.gt)):
        rel = traj.gt[i - 1].inverse().compose(traj.gt[i])
        twist = np.concatenate(
            [rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3)]
        )
        odom.append(odom[-1].compose(rel).compose(se3_exp(twist)))
    return AgentTrajectory(traj.agent_id, list(traj.gt), odom)


def frustum_sees(intr, pose, point_world, near=0.05):
    """True when a world point projects inside the image at depth > near."""
    p = pose.inverse().apply(np.asarray(point_world, dtype=np.float64))
    if p[2] <= near:
        return False
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    return 0.0 <= u < intr.width and 0.0 <= v < intr.height


def _write_ppm(path, color):
    img = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def _write_pgm(path, depth_m):
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(mm.tobytes())


def _read_pnm(path, want_magic):
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            c = data[pos]
            if c in b" \t\r\n":
                pos += 1
            elif c == ord("#"):
                while pos < len(data) and data[pos] != ord("\n"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise MalformedFile(f"{path}: truncated header")
        return data[start:pos]

    try:
        magic = token()
        if magic != want_magic:
            raise MalformedFile(f"{path}: bad magic {magic!r}")
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise MalformedFile(f"{path}: bad header field: {e}") from e
    pos += 1
    return w, h, maxval, data[pos:]


def read_ppm(path):
    w, h, maxval, raster = _read_pnm(path, b"P6")
    if maxval != 255:
        raise MalformedFile(f"{path}: expected maxval 255, got {maxval}")
    need = w * h * 3
    if len(raster) < need:
        raise MalformedFile(f"{path}: raster has {len(raster)} bytes, needs {need}")
    img = np.frombuffer(raster[:need], dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def read_pgm(path):
    w, h, maxval, raster = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise MalformedFile(f"{path}: expected maxval 65535, got {maxval}")
    need = w * h * 2
    if len(raster) < need:
        raise MalformedFile(f"{path}: raster has {len(raster)} bytes, needs {need}")
    mm = np.frombuffer(raster[:need], dtype=">u2").reshape(h, w)
    return mm.astype(np.float64) / 1000.0


def _pose_line(idx, pose):
    t, q = pose.t, pose.q
    vals = [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    return f"{idx} " + " ".join(f"{v:.9f}" for v in vals)


def _parse_pose_line(line, path):
    parts = line.split()
    if len(parts) != 8:
        raise MalformedFile(f"{path}: expected 8 fields, got {len(parts)}")
    try:
        idx = int(parts[0])
        vals = [float(x) for x in parts[1:]]
    except ValueError as e:
        raise MalformedFile(f"{path}: {e}") from e
    t = np.array(vals[:3])
    q = np.array(vals[3:])
    return idx, Pose.from_qt(q, t)


def read_poses(path):
    poses = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        poses.append(_parse_pose_line(line, path))
    return poses


def export_dataset(out_dir, intr, trajectories, frames_by_agent):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "intrinsics.txt").write_text(
        f"{intr.fx:.9f} {intr.fy:.9f} {intr.cx:.9f} {intr.cy:.9f} {intr.width} {intr.height}\n"
    )
    wf_lines = []
    for traj in trajectories:
        wf_lines.append(_pose_line(traj.agent_id, traj.gt[0]))
        adir = out / f"agent_{traj.agent_id}"
        adir.mkdir(exist_ok=True)
        for fr in frames_by_agent[traj.agent_id]:
            _write_ppm(adir / f"frame_{fr.index:06d}.ppm", fr.color)
            _write_pgm(adir / f"depth_{fr.index:06d}.pgm", fr.depth)
        (adir / "poses_odom.txt").write_text(
            "\n".join(_pose_line(i, p) for i, p in enumerate(traj.odom)) + "\n"
        )
        (adir / "poses_gt.txt").write_text(
            "\n".join(_pose_line(i, p) for i, p in enumerate(traj.gt)) + "\n"
        )
    (out / "world_frames.txt").write_text("\n".join(wf_lines) + "\n")


def read_intrinsics(path):
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise MalformedFile(f"{path}: expected 6 fields")
    try:
        fx, fy, cx, cy = (float(x) for x in parts[:4])
        w, h = int(parts[4]), int(parts[5])
    except ValueError as e:
        raise MalformedFile(f"{path}: {e}") from e
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def load_agent_data(agent_dir):
    """Frames plus odometry for one agent directory. Never touches ground truth."""
    adir = Path(agent_dir)
    agent_id = int(adir.name.split("_")[1]) if "_" in adir.name else 0
    odom_entries = read_poses(adir / "poses_odom.txt")
    frames = []
    for idx, _ in odom_entries:
        cpath = adir / f"frame_{idx:06d}.ppm"
        dpath = adir / f"depth_{idx:06d}.pgm"
        if not cpath.exists() or not dpath.exists():
            raise MalformedFile(f"{adir}: missing files for frame {idx}")
        frames.append(Frame(read_ppm(cpath), read_pgm(dpath), idx, agent_id))
    odom = [p for _, p in odom_entries]
    return frames, odom


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics
    frames: dict
    odom: dict
    gt: dict
    world_frames: dict


def import_dataset(dataset_dir):
    """Full dataset view including evaluation-only ground truth."""
    root = Path(dataset_dir)
    intr = read_intrinsics(root / "intrinsics.txt")
    frames, odom, gt = {}, {}, {}
    for adir in sorted(root.glob("agent_*")):
        aid = int(adir.name.split("_")[1])
        frames[aid], odom[aid] = load_agent_data(adir)
        gt_entries = read_poses(adir / "poses_gt.txt")
        if len(gt_entries) != len(odom[aid]):
            raise MalformedFile(f"{adir}: gt/odom length mismatch")
        gt[aid] = [p for _, p in gt_entries]
    world = {idx: p for idx, p in read_poses(root / "world_frames.txt")}
    return Dataset(intr, frames, odom, gt, world)


def make_dataset(cfg, out_dir):
    """Generate and export the synthetic dataset described by a run config."""
    scene = build_scene(cfg["scene"])
    cam = cfg["camera"]
    intr = CameraIntrinsics(
        cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["width"], cam["height"]
    )
    seed = int(cfg["seed"])
    sig = cfg["odometry"]
    trajs, frames = [], {}
    for aspec in cfg["agents"]:
        traj = gen_trajectory(scene, aspec, int(aspec["n_frames"]))
        traj = perturb_odometry(
            traj, sig["sigma_rot"], sig["sigma_trans"], [seed, traj.agent_id]
        )
        trajs.append(traj)
        frames[traj.agent_id] = [
            raycast_frame(scene, intr, p, i, traj.agent_id)
            for i, p in enumerate(traj.gt)
        ]
    export_dataset(out_dir, intr, trajs, frames)
    return {t.agent_id: len(t.gt) for t in trajs}
