"""Server-side map backend: loop detection over keyframe features,
loop-edge estimation in three payload modes, robust pose-graph
optimization, and two-stage fusion of submaps into one global map.

Each submap contributes one graph node, an SE(3) correction ΔX_k applied
on the left of its first-keyframe odometry pose P_k. Consecutive submaps
of an agent are tied by identity odometry constraints; loop registrations
add edges with measured relative transforms. The robust cost

    L = sum ||log(ΔX_{i+1}^-1 ΔX_i)||^2_Λ
      + sum s_kj ||log(T_kj^-1 (ΔX_j P_j)^-1 (ΔX_k P_k))||^2_Λ

is minimized by Levenberg-Marquardt with right-multiplicative updates,
alternated with closed-form Geman-McClure line-process reweighting of
the s_kj. Fusion then moves every surviving Gaussian by ΔX_k ∘ P_k and
briefly refines colors and positions against renders of the submaps'
own keyframe views.
"""

import logging
import struct
from collections import deque
from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from .comms import MODE_CD, MODE_PCD, MODE_RD
from .geometry import AngleAtPi, Pose, quat_multiply_batch, quat_normalize, se3_exp, se3_log
from .mapper import _Adam, compute_loss
from .registration import PointCloud, depth_to_cloud, register
from .splatrender import GaussianCloud, backward, contributing_mask, render

log = logging.getLogger("magsplat.backend")


class BackendError(Exception):
    pass


class SubmapTooSmall(BackendError):
    """Submap has too few keyframes for within-submap similarity ranking."""


class DisconnectedAgent(BackendError):
    """An agent's odometry chain has no path to the gauge node."""


class SingularNormalEquations(BackendError):
    """LM normal equations stayed singular through all damping escalations."""


class SplatFileError(BackendError):
    pass


# ---------------------------------------------------------------------------
# loop detection


@dataclass
class LoopCandidate:
    """One proposed submap pair, with the triggering keyframe on each side."""

    agent_s: int
    submap_s: int
    agent_t: int
    submap_t: int
    keyframe_s: int
    keyframe_t: int
    s_cross: float
    s_self: float

    @property
    def key_s(self):
        return (self.agent_s, self.submap_s)

    @property
    def key_t(self):
        return (self.agent_t, self.submap_t)

    @property
    def margin(self):
        return self.s_cross - self.s_self


def _feature_matrix(submap):
    rows = [np.asarray(kf.feature, dtype=np.float64) for kf in submap.keyframes]
    F = np.stack(rows)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return F / np.maximum(norms, 1e-12)


def _percentile(values, p):
    return float(np.percentile(values, p, method="nearest"))


def detect_loops(submaps, p=90.0):
    """Rank cosine similarities and propose loop candidates.

    For each keyframe k of a submap, s_self(k) is the p-th percentile of
    its similarities to the submap's other keyframes; against another
    submap, s_cross(k) is the p-th percentile of its similarities to that
    submap's keyframes. A pair is proposed when s_cross > s_self for any
    keyframe of either side; the max-margin keyframe is kept, one
    candidate per pair. Single-keyframe submaps are skipped (logged);
    adjacent submaps of one agent are never paired.
    """
    ordered = sorted(submaps, key=lambda s: (s.agent_id, s.submap_id))
    keys, feats, thresholds = [], [], []
    for s in ordered:
        if len(s.keyframes) < 2:
            log.info(
                "agent %d submap %d skipped for loop detection: %s",
                s.agent_id, s.submap_id, SubmapTooSmall("single keyframe"),
            )
            continue
        F = _feature_matrix(s)
        sims = F @ F.T
        thr = np.array(
            [_percentile(np.delete(sims[k], k), p) for k in range(len(F))]
        )
        keys.append((s.agent_id, s.submap_id))
        feats.append(F)
        thresholds.append(thr)

    out = []
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            ka, kb = keys[a], keys[b]
            if ka[0] == kb[0] and abs(ka[1] - kb[1]) <= 1:
                continue
            C = feats[a] @ feats[b].T
            best = None
            for k in range(C.shape[0]):
                sc = _percentile(C[k], p)
                if sc > thresholds[a][k]:
                    cand = LoopCandidate(
                        *ka, *kb, k, int(np.argmax(C[k])), sc, float(thresholds[a][k])
                    )
                    if best is None or cand.margin > best.margin:
                        best = cand
            for k in range(C.shape[1]):
                sc = _percentile(C[:, k], p)
                if sc > thresholds[b][k]:
                    cand = LoopCandidate(
                        *kb, *ka, k, int(np.argmax(C[:, k])), sc, float(thresholds[b][k])
                    )
                    if best is None or cand.margin > best.margin:
                        best = cand
            if best is not None:
                out.append(best)
    return out


# ---------------------------------------------------------------------------
# loop edges


def _first_view_cloud(submap, mode, intr):
    """Point cloud of the submap's first-keyframe view, in the submap frame.

    RD renders depth from the transmitted Gaussians (the submap frame is
    the first keyframe's camera frame, so the view pose is identity); CD
    back-projects the stored camera depth; PCD uses the raw cloud.
    """
    if mode == MODE_RD:
        out = render(submap.gaussians, Pose.identity(), intr)
        depth = np.where(out.valid_mask, out.depth, 0.0)
        return depth_to_cloud(depth, intr)
    if mode == MODE_CD:
        if submap.depth_mm is None:
            raise BackendError("CD loop edge needs the stored first-keyframe depth")
        return depth_to_cloud(submap.depth_mm.astype(np.float64) / 1000.0, intr)
    if mode == MODE_PCD:
        if submap.cloud is None:
            raise BackendError("PCD loop edge needs the transmitted point cloud")
        return PointCloud(np.asarray(submap.cloud, dtype=np.float64).copy())
    raise BackendError(f"unknown mode {mode}")


def compute_loop_edge(s, t, mode, intr, cfg=None, rng=None):
    """Register the two first-keyframe views; returns (T, w).

    T maps s's submap frame into t's; the information matrix is w·I6 with
    w = fitness / max(RMSE^2, 1e-6) clamped to [1, 1e6]. Registration
    failures (LowFitness etc.) propagate to the caller for discard.
    """
    src = _first_view_cloud(s, mode, intr)
    dst = _first_view_cloud(t, mode, intr)
    res = register(src, dst, cfg=cfg, rng=rng)
    w = float(np.clip(res.fitness / max(res.rmse**2, 1e-6), 1.0, 1e6))
    log.debug(
        "loop edge (%d,%d)->(%d,%d): fitness %.3f rmse %.4f w %.1f",
        s.agent_id, s.submap_id, t.agent_id, t.submap_id, res.fitness, res.rmse, w,
    )
    return res.transform, w


def covisibility_prune(prev, next_first_kf_pose, next_depth, intr, band=None):
    """Drop Gaussians of prev that the next submap's first view re-observes.

    A Gaussian is removed when its mean projects in-frame with z > 0 onto
    a valid depth pixel within the band (default 3·exp(max log_scale)
    clamped to [2 cm, 20 cm]). Depth is in meters, 0 marks invalid, and
    invalid pixels never trigger removal. Both poses live in the agent's
    odometry frame.
    """
    g = prev.gaussians
    if len(g) == 0:
        return prev
    rel = next_first_kf_pose.inverse().compose(prev.base_pose)
    pc = g.means @ rel.rotation.T + rel.t
    z = pc[:, 2]
    front = z > 0.0
    zs = np.where(front, z, 1.0)
    u = np.round(intr.fx * pc[:, 0] / zs + intr.cx).astype(np.int64)
    v = np.round(intr.fy * pc[:, 1] / zs + intr.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    idx = np.flatnonzero(inside)
    observed = next_depth[v[idx], u[idx]]
    if band is None:
        bands = np.clip(3.0 * np.exp(g.log_scales[idx].max(axis=1)), 0.02, 0.2)
    else:
        bands = band
    removed = np.zeros(len(g), dtype=bool)
    removed[idx] = (observed > 0.0) & (np.abs(z[idx] - observed) <= bands)
    return replace(prev, gaussians=g.subset(~removed))


# ---------------------------------------------------------------------------
# pose graph


@dataclass
class LoopMeasurement:
    """A loop edge keyed by (agent, submap) pairs, before graph indexing."""

    key_s: tuple
    key_t: tuple
    transform: Pose
    info: float


@dataclass
class OdomEdge:
    i: int
    j: int
    info: float


@dataclass
class LoopEdge:
    i: int
    j: int
    transform: Pose
    info: float
    weight: float = 1.0


@dataclass
class PoseGraph:
    keys: list
    index: dict
    odom_poses: list
    odom_edges: list
    loop_edges: list
    gauge: int
    init: list
    reachable: np.ndarray
    disconnected_agents: list


def _clone(pose):
    return Pose(pose.q.copy(), pose.t.copy())


def _spanning_tree_init(n, odom_poses, odom_edges, loop_edges, gauge):
    """Odometry-first BFS: chains keep a rigid shared correction; loop
    edges only bridge components with no odometry path to the gauge."""
    odom_adj = [[] for _ in range(n)]
    for e in odom_edges:
        odom_adj[e.i].append(e.j)
        odom_adj[e.j].append(e.i)
    init = [Pose.identity() for _ in range(n)]
    reachable = np.zeros(n, dtype=bool)

    def flood(start):
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in odom_adj[u]:
                if not reachable[v]:
                    init[v] = _clone(init[u])
                    reachable[v] = True
                    queue.append(v)

    reachable[gauge] = True
    flood(gauge)
    attached = True
    while attached:
        attached = False
        for e in loop_edges:
            if reachable[e.i] == reachable[e.j]:
                continue
            if reachable[e.i]:
                # choose ΔX_j so the edge residual vanishes given ΔX_i
                init[e.j] = (
                    init[e.i]
                    .compose(odom_poses[e.i])
                    .compose(e.transform.inverse())
                    .compose(odom_poses[e.j].inverse())
                )
                reachable[e.j] = True
                flood(e.j)
            else:
                init[e.i] = (
                    init[e.j]
                    .compose(odom_poses[e.j])
                    .compose(e.transform)
                    .compose(odom_poses[e.i].inverse())
                )
                reachable[e.i] = True
                flood(e.i)
            attached = True
    return init, reachable


def build_pose_graph(submaps, loop_measurements=(), w_odom=100.0):
    """One node per submap, odometry edges per agent, loop edges attached.

    Nodes are initialized by a BFS spanning tree from the gauge node
    (lowest agent, lowest submap id) using odometry copies and loop-edge
    measurements. Agents with no path to the gauge stay at identity and
    are listed in disconnected_agents.
    """
    ordered = sorted(submaps, key=lambda s: (s.agent_id, s.submap_id))
    if not ordered:
        raise BackendError("pose graph needs at least one submap")
    keys = [(s.agent_id, s.submap_id) for s in ordered]
    if len(set(keys)) != len(keys):
        raise BackendError("duplicate (agent, submap) key")
    index = {k: i for i, k in enumerate(keys)}
    odom_poses = []
    for s in ordered:
        if not s.keyframes:
            raise BackendError(f"submap {(s.agent_id, s.submap_id)} has no keyframes")
        odom_poses.append(_clone(s.keyframes[0].pose))
    odom_edges = [
        OdomEdge(i - 1, i, float(w_odom))
        for i in range(1, len(keys))
        if keys[i][0] == keys[i - 1][0]
    ]
    loop_edges = []
    for m in loop_measurements:
        try:
            i, j = index[tuple(m.key_s)], index[tuple(m.key_t)]
        except KeyError as missing:
            raise BackendError(f"loop edge references unknown submap {missing}") from None
        if i == j:
            raise BackendError("loop edge endpoints must differ")
        loop_edges.append(LoopEdge(i, j, m.transform, float(m.info), 1.0))
    gauge = 0
    init, reachable = _spanning_tree_init(
        len(keys), odom_poses, odom_edges, loop_edges, gauge
    )
    disconnected = sorted({keys[i][0] for i in np.flatnonzero(~reachable)})
    if disconnected:
        log.warning(
            "agents %s have no path to the gauge node: %s",
            disconnected, DisconnectedAgent("left at identity"),
        )
    return PoseGraph(
        keys, index, odom_poses, odom_edges, loop_edges, gauge,
        init, reachable, disconnected,
    )


@dataclass
class PgoConfig:
    mu: float = 10.0
    rounds: int = 5
    max_inner: int = 100
    step_tol: float = 1e-8
    lm_lambda0: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 3.0
    max_escalations: int = 10
    fd_eps: float = 1e-6


def _edge_residual(poses, odom_poses, edge, is_loop):
    if is_loop:
        w_k = poses[edge.i].compose(odom_poses[edge.i])
        w_j = poses[edge.j].compose(odom_poses[edge.j])
        rel = edge.transform.inverse().compose(w_j.inverse()).compose(w_k)
    else:
        rel = poses[edge.j].inverse().compose(poses[edge.i])
    try:
        return se3_log(rel)
    except AngleAtPi:
        # antipodal residual: nudge off the cut locus; the magnitude stays
        # ~pi and the line process will down-weight the edge anyway
        bump = se3_exp(np.array([1e-5, 0.0, 0.0, 0.0, 0.0, 0.0]))
        return se3_log(rel.compose(bump))


def _stack_residuals(poses, odom_poses, edges, sqrtw):
    r = np.empty(6 * len(edges))
    for idx, (e, is_loop) in enumerate(edges):
        r[6 * idx : 6 * idx + 6] = sqrtw[idx] * _edge_residual(
            poses, odom_poses, e, is_loop
        )
    return r


def _jacobian(poses, odom_poses, edges, sqrtw, free_col, eps):
    J = np.zeros((6 * len(edges), 6 * len(free_col)))
    for idx, (e, is_loop) in enumerate(edges):
        for node in (e.i, e.j):
            col = free_col.get(node)
            if col is None:
                continue
            base = poses[node]
            for d in range(6):
                tw = np.zeros(6)
                tw[d] = eps
                poses[node] = base.compose(se3_exp(tw))
                rp = _edge_residual(poses, odom_poses, e, is_loop)
                poses[node] = base.compose(se3_exp(-tw))
                rm = _edge_residual(poses, odom_poses, e, is_loop)
                J[6 * idx : 6 * idx + 6, 6 * col + d] = (
                    sqrtw[idx] * (rp - rm) / (2.0 * eps)
                )
            poses[node] = base
    return J


def _apply_step(poses, free, delta):
    out = [_clone(p) for p in poses]
    for c, node in enumerate(free):
        out[node] = poses[node].compose(se3_exp(delta[6 * c : 6 * c + 6]))
    return out


def _lm(poses, odom_poses, edges, sqrtw, free, free_col, cfg):
    lam = cfg.lm_lambda0
    r = _stack_residuals(poses, odom_poses, edges, sqrtw)
    loss = float(r @ r)
    n_params = 6 * len(free)
    for _ in range(cfg.max_inner):
        J = _jacobian(poses, odom_poses, edges, sqrtw, free_col, cfg.fd_eps)
        g = J.T @ r
        H = J.T @ J
        step = None
        escalations = 0
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.eye(n_params), -g)
            except np.linalg.LinAlgError:
                escalations += 1
                if escalations > cfg.max_escalations:
                    raise SingularNormalEquations(
                        f"normal equations singular after {cfg.max_escalations} "
                        "damping escalations"
                    ) from None
                lam *= cfg.lm_up
                continue
            cand = _apply_step(poses, free, delta)
            rc = _stack_residuals(cand, odom_poses, edges, sqrtw)
            lc = float(rc @ rc)
            if lc <= loss:
                poses, r, loss = cand, rc, lc
                lam = max(lam / cfg.lm_down, 1e-12)
                step = delta
                break
            lam *= cfg.lm_up
            if lam > 1e12:
                break
        if step is None or np.linalg.norm(step) < cfg.step_tol:
            break
    return poses


def optimize_pose_graph(graph, cfg=None):
    """LM over SE(3) corrections with line-process reweighting.

    Right-multiplicative perturbations, central-difference Jacobians on
    the edges each node touches, damping escalation on rejected steps.
    The gauge node and nodes unreachable from it stay fixed. Loop-edge
    weights s = (mu / (mu + r'Λr))^2 are refreshed after each of the
    outer rounds and left on the edges. Returns ΔX per node.
    """
    cfg = cfg if cfg is not None else PgoConfig()
    poses = [_clone(p) for p in graph.init]
    free = [
        i for i in range(len(poses)) if i != graph.gauge and graph.reachable[i]
    ]
    edges = [(e, False) for e in graph.odom_edges] + [
        (e, True) for e in graph.loop_edges
    ]
    if not free or not edges:
        return poses
    free_col = {node: c for c, node in enumerate(free)}
    for _ in range(max(cfg.rounds, 1)):
        sqrtw = np.array(
            [
                np.sqrt(e.weight * e.info if is_loop else e.info)
                for e, is_loop in edges
            ]
        )
        poses = _lm(poses, graph.odom_poses, edges, sqrtw, free, free_col, cfg)
        for e in graph.loop_edges:
            r = _edge_residual(poses, graph.odom_poses, e, True)
            e.weight = (cfg.mu / (cfg.mu + e.info * float(r @ r))) ** 2
    return poses


# ---------------------------------------------------------------------------
# fusion


@dataclass
class GlobalMap:
    """Merged cloud in the unified world frame with per-Gaussian provenance
    (agent, submap) rows and corrected world poses per submap."""

    gaussians: GaussianCloud
    provenance: np.ndarray
    poses: dict


@dataclass
class MergeConfig:
    iterations: int = 200
    prune_opacity: float = 0.005
    lambda_color: float = 1.0
    lambda_depth: float = 0.5
    rho: float = 0.2
    lr_mean_scale: float = 1.6e-4
    lr_color: float = 2.5e-3


def merge_maps(submaps, corrected, intr, cfg=None):
    """Two-stage fusion under the corrected poses.

    Stage 1 transforms each submap's Gaussians by ΔX_k ∘ P_k, excluding
    any with opacity < prune threshold or with no compositing contribution
    to the submap's own first-keyframe render. Stage 2 runs color- and
    position-only Adam steps against renders of each submap's keyframe
    views (round-robin), then prunes sub-threshold opacities again.
    corrected is a dict keyed by (agent, submap) or a sequence parallel
    to the (agent, submap)-sorted submaps.
    """
    cfg = cfg if cfg is not None else MergeConfig()
    ordered = sorted(submaps, key=lambda s: (s.agent_id, s.submap_id))
    if not ordered:
        raise BackendError("merge needs at least one submap")
    if isinstance(corrected, dict):
        deltas = [corrected[(s.agent_id, s.submap_id)] for s in ordered]
    else:
        deltas = list(corrected)
        if len(deltas) != len(ordered):
            raise BackendError("corrected poses do not match submaps")

    merged = GaussianCloud.empty()
    prov_chunks = []
    world_poses = {}
    targets = []
    for s, dx in zip(ordered, deltas):
        key = (s.agent_id, s.submap_id)
        world = dx.compose(s.keyframes[0].pose)
        world_poses[key] = world
        g = s.gaussians
        keep = g.opacities >= cfg.prune_opacity
        if keep.any():
            keep &= contributing_mask(render(g, Pose.identity(), intr))
        sub = g.subset(keep)
        moved = GaussianCloud(
            sub.means @ world.rotation.T + world.t,
            quat_normalize(quat_multiply_batch(world.q, sub.quats)),
            sub.log_scales.copy(),
            sub.opacities.copy(),
            sub.colors.copy(),
        )
        merged = GaussianCloud.concat(merged, moved)
        prov_chunks.append(np.tile(np.array(key, dtype=np.int64), (len(moved), 1)))
        p0_inv = s.keyframes[0].pose.inverse()
        for kf in s.keyframes:
            targets.append((s, p0_inv.compose(kf.pose), dx.compose(kf.pose)))
    provenance = (
        np.concatenate(prov_chunks) if prov_chunks else np.zeros((0, 2), np.int64)
    )

    if cfg.iterations > 0 and len(merged) > 0 and targets:
        span = merged.means.max(axis=0) - merged.means.min(axis=0)
        lr_mean = cfg.lr_mean_scale * max(float(np.linalg.norm(span)), 1e-6)
        loss_cfg = SimpleNamespace(
            lambda_color=cfg.lambda_color, lambda_depth=cfg.lambda_depth,
            lambda_reg=0.0, rho=cfg.rho,
        )
        cache = {}
        opt_mean = _Adam((len(merged), 3))
        opt_color = _Adam((len(merged), 3))
        for t in range(1, cfg.iterations + 1):
            ti = (t - 1) % len(targets)
            if ti not in cache:
                s, local_cam, world_cam = targets[ti]
                ref = render(s.gaussians, local_cam, intr)
                cache[ti] = (
                    ref.color.copy(),
                    np.where(ref.valid_mask, ref.depth, 0.0),
                    world_cam,
                )
            target_color, target_depth, world_cam = cache[ti]
            out = render(merged, world_cam, intr)
            terms = compute_loss(
                out, target_color, target_depth, merged.log_scales, loss_cfg
            )
            grads = backward(
                out, terms.d_image, terms.d_depth, merged, want_scale_grad=False
            )
            merged.means -= lr_mean * opt_mean.step(grads.dmeans, t)
            merged.colors = np.clip(
                merged.colors - cfg.lr_color * opt_color.step(grads.dcolors, t),
                0.0, 1.0,
            )
        keep = merged.opacities >= cfg.prune_opacity
        merged = merged.subset(keep)
        provenance = provenance[keep]

    return GlobalMap(merged, provenance, world_poses)


# ---------------------------------------------------------------------------
# splat file export

_SPLAT_MAGIC = b"CKGS"
_SPLAT_VERSION = 1
_SPLAT_RECORD = 56


def save_splat(path, gaussians):
    """Write the binary splat file: magic, version u8, count u32 LE, then
    56-byte records (mean 3, quat 4, log_scale 3, opacity, rgb 3; all f32 LE)."""
    rec = np.empty((len(gaussians), 14), dtype="<f4")
    rec[:, 0:3] = gaussians.means
    rec[:, 3:7] = gaussians.quats
    rec[:, 7:10] = gaussians.log_scales
    rec[:, 10] = gaussians.opacities
    rec[:, 11:14] = gaussians.colors
    with open(path, "wb") as f:
        f.write(_SPLAT_MAGIC)
        f.write(struct.pack("<BI", _SPLAT_VERSION, len(gaussians)))
        f.write(rec.tobytes())


def load_splat(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 9:
        raise SplatFileError(f"truncated header: {len(blob)} bytes")
    if blob[:4] != _SPLAT_MAGIC:
        raise SplatFileError(f"bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != _SPLAT_VERSION:
        raise SplatFileError(f"unsupported version {version}")
    expect = 9 + _SPLAT_RECORD * count
    if len(blob) != expect:
        raise SplatFileError(f"expected {expect} bytes for {count} records, got {len(blob)}")
    rec = (
        np.frombuffer(blob, dtype="<f4", count=14 * count, offset=9)
        .reshape(count, 14)
        .astype(np.float64)
    )
    return GaussianCloud(
        rec[:, 0:3].copy(), rec[:, 3:7].copy(), rec[:, 7:10].copy(),
        rec[:, 10].copy(), rec[:, 11:14].copy(),
    )
