"""Guess-free rigid alignment between depth-derived point clouds.

Pipeline: voxel downsample, PCA normals, FPFH descriptors, mutual
nearest-neighbor matching, RANSAC over 3-point samples with an
edge-similarity prefilter, then a point-to-point ICP polish on the
full-resolution clouds. No initial relative pose is required.
"""

from dataclasses import dataclass

import numba
import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .geometry import (
    CameraIntrinsics,
    DegenerateGeometry,
    Pose,
    backproject_depth_map,
    umeyama_fit,
)


class RegistrationError(Exception):
    """Base for alignment failures."""


class EmptyCloud(RegistrationError):
    pass


class TooFewMatches(RegistrationError):
    pass


class LowFitness(RegistrationError):
    """Best model explains too little of the candidate set; the caller
    treats this as a rejectable edge, not a crash."""


class NoCorrespondences(RegistrationError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise RegistrationError("non-finite points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise RegistrationError("normals shape mismatch")
            lens = np.linalg.norm(self.normals, axis=1)
            if not np.all((np.abs(lens - 1.0) <= 1e-6) | (lens == 0.0)):
                raise RegistrationError("normals must be unit or zero")

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> "PointCloud":
        pts = pose.apply(self.points)
        nrm = None
        if self.normals is not None:
            nrm = self.normals @ pose.rotation.T
        return PointCloud(pts, nrm)


@dataclass
class RegistrationResult:
    transform: Pose
    fitness: float
    rmse: float
    n_inliers: int


@dataclass
class RegistrationConfig:
    """Knobs for the full register() pipeline; radii scale off the voxel."""

    voxel: float = 0.05
    normal_radius_mult: float = 2.5
    fpfh_radius_mult: float = 5.0
    tau_mult: float = 1.5
    max_corr_mult: float = 1.5
    ransac_max_iters: int = 100_000
    ransac_confidence: float = 0.999
    ransac_batch: int = 512
    min_fitness: float = 0.1
    icp_iters: int = 50
    icp_tol: float = 1e-6

    def __post_init__(self):
        if self.voxel <= 0:
            raise RegistrationError("voxel must be positive")
        if not 0 < self.ransac_confidence < 1:
            raise RegistrationError("confidence must be in (0,1)")


def depth_to_cloud(depth, intr: CameraIntrinsics, mask=None) -> PointCloud:
    """Back-project valid pixels of a depth map into a camera-frame cloud.

    mask further restricts validity (e.g. alpha coverage for rendered
    depth). Raises EmptyCloud when nothing is valid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptyCloud("no valid depth pixels")
    grid = backproject_depth_map(intr, depth)
    return PointCloud(grid[valid])


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, output ordered by voxel key."""
    if voxel <= 0:
        raise RegistrationError("voxel must be positive")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.empty((0, 3)))
    keys = np.floor(pts / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    sp = pts[order]
    first = np.ones(len(sp), dtype=bool)
    first[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.flatnonzero(first)
    sums = np.add.reduceat(sp, starts, axis=0)
    counts = np.diff(np.append(starts, len(sp)))
    return PointCloud(sums / counts[:, None])


def estimate_normals(cloud: PointCloud, radius: float) -> PointCloud:
    """Per-point PCA normal over radius neighbors, oriented toward the
    origin viewpoint. Points with fewer than 3 neighbors (self included)
    get a zero normal."""
    if radius <= 0:
        raise RegistrationError("radius must be positive")
    pts = cloud.points
    n = len(pts)
    normals = np.zeros((n, 3))
    if n == 0:
        return PointCloud(pts, normals)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    deg = np.bincount(pairs[:, 0], minlength=n) + np.bincount(pairs[:, 1], minlength=n)
    lens = deg + 1
    adj = sparse.csr_matrix(
        (
            np.ones(2 * len(pairs)),
            (
                np.concatenate([pairs[:, 0], pairs[:, 1]]),
                np.concatenate([pairs[:, 1], pairs[:, 0]]),
            ),
        ),
        shape=(n, n),
    )
    outer = (pts[:, :, None] * pts[:, None, :]).reshape(-1, 9)
    s1 = adj @ pts + pts
    s2 = adj @ outer + outer
    ok = lens >= 3
    k = np.maximum(lens, 1).astype(np.float64)
    mu = s1 / k[:, None]
    cov = s2.reshape(n, 3, 3) / k[:, None, None] - mu[:, :, None] * mu[:, None, :]
    w, v = np.linalg.eigh(cov[ok])
    nrm = v[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, pts[ok]) > 0
    nrm[flip] = -nrm[flip]
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    normals[ok] = nrm
    return PointCloud(pts, normals)


_N_BINS = 11


def _pair_features(ps, ns, pt, nt):
    """Darboux-frame (alpha, phi, theta) for point pairs, source chosen
    as the endpoint whose normal is closer to the connecting line."""
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    good = dist > 1e-12
    du = np.zeros_like(d)
    du[good] = d[good] / dist[good, None]
    # epsilon keeps the choice stable when both angles tie (flat patches)
    swap = np.abs(np.einsum("ij,ij->i", nt, du)) > np.abs(
        np.einsum("ij,ij->i", ns, du)
    ) + 1e-9
    u = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    dv = np.where(swap[:, None], -du, du)
    v = np.cross(dv, u)
    vlen = np.linalg.norm(v, axis=1)
    good &= vlen > 1e-12
    v[good] /= vlen[good, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, n2)
    phi = np.einsum("ij,ij->i", u, dv)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", u, n2))
    return alpha, phi, theta, dist, good


def _bin_index(x, lo, hi):
    b = np.floor((x - lo) / (hi - lo) * _N_BINS).astype(np.int64)
    return np.clip(b, 0, _N_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius: float) -> np.ndarray:
    """33-bin FPFH per point, L1-normalized to 100.

    SPFH histograms are raw pair counts; the final descriptor is
    SPFH_i + (1/k) sum_j SPFH_j / dist_ij over the radius neighbors.
    Zero-normal points are excluded and come back as all-zero rows.
    """
    if cloud.normals is None:
        raise RegistrationError("normals required for FPFH")
    pts = cloud.points
    nrm = cloud.normals
    n = len(pts)
    feats = np.zeros((n, 3 * _N_BINS))
    valid = np.linalg.norm(nrm, axis=1) > 0.5
    vid = np.flatnonzero(valid)
    if len(vid) == 0:
        return feats
    vp = pts[vid]
    vn = nrm[vid]
    m = len(vid)
    tree = cKDTree(vp)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    pi = pairs[:, 0]
    pj = pairs[:, 1]
    deg = np.bincount(pi, minlength=m) + np.bincount(pj, minlength=m)
    spfh = np.zeros((m, 3 * _N_BINS))
    nb = 3 * _N_BINS
    acc = np.zeros_like(spfh)
    if len(pi):
        alpha, phi, theta, dist, good = _pair_features(vp[pi], vn[pi], vp[pj], vn[pj])
        hi, hj = pi[good], pj[good]
        ba = _bin_index(alpha[good], -1.0, 1.0)
        bp = _bin_index(phi[good], -1.0, 1.0)
        bt = _bin_index(theta[good], -np.pi, np.pi)
        flat = np.zeros(m * nb)
        for off, b in ((0, ba), (_N_BINS, bp), (2 * _N_BINS, bt)):
            flat += np.bincount(hi * nb + off + b, minlength=m * nb)
            flat += np.bincount(hj * nb + off + b, minlength=m * nb)
        spfh = flat.reshape(m, nb)
        okq = dist > 1e-12
        w = 1.0 / dist[okq]
        # both directions of each pair; row i accumulates spfh[j] / d_ij
        graph = sparse.csr_matrix(
            (
                np.concatenate([w, w]),
                (
                    np.concatenate([pi[okq], pj[okq]]),
                    np.concatenate([pj[okq], pi[okq]]),
                ),
            ),
            shape=(m, m),
        )
        acc = graph @ spfh
    kcnt = np.maximum(deg, 1).astype(np.float64)
    out = spfh + acc / kcnt[:, None]
    tot = out.sum(axis=1)
    nz = tot > 0
    out[nz] *= 100.0 / tot[nz, None]
    feats[vid] = out
    return feats


def match_features(fs: np.ndarray, ft: np.ndarray) -> np.ndarray:
    """Mutual nearest neighbors in 33-D feature space as an (M,2) index
    array; all-zero features never match."""
    fs = np.asarray(fs, dtype=np.float64)
    ft = np.asarray(ft, dtype=np.float64)
    vs = np.flatnonzero(fs.sum(axis=1) > 0)
    vt = np.flatnonzero(ft.sum(axis=1) > 0)
    if len(vs) == 0 or len(vt) == 0:
        return np.empty((0, 2), dtype=np.int64)
    a = fs[vs]
    b = ft[vt]
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        - 2.0 * a @ b.T
        + np.sum(b * b, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    # ties within the cancellation noise floor resolve to the lowest index
    tie = 1e-8
    fwd = np.argmax(d2 <= d2.min(axis=1)[:, None] + tie, axis=1)
    bwd = np.argmax(d2 <= d2.min(axis=0)[None, :] + tie, axis=0)
    src = np.flatnonzero(bwd[fwd] == np.arange(len(vs)))
    return np.stack([vs[src], vt[fwd[src]]], axis=1)


def _batched_fit(sa, sb):
    """Rigid fits for stacked 3-point correspondence sets; returns
    rotations, translations, and a validity mask."""
    mu_a = sa.mean(axis=1)
    mu_b = sb.mean(axis=1)
    ca = sa - mu_a[:, None, :]
    cb = sb - mu_b[:, None, :]
    h = np.einsum("bpi,bpj->bij", cb, ca)
    u, s, vt = np.linalg.svd(h)
    ok = (s[:, 0] > 1e-15) & (s[:, 1] > 1e-9 * s[:, 0])
    det = np.linalg.det(u) * np.linalg.det(vt)
    u = u.copy()
    u[:, :, 2] *= np.sign(det)[:, None]
    r = u @ vt
    t = mu_b - np.einsum("bij,bj->bi", r, mu_a)
    return r, t, ok


def ransac_align(
    src: PointCloud,
    dst: PointCloud,
    matches: np.ndarray,
    tau: float,
    max_iters: int = 100_000,
    confidence: float = 0.999,
    rng=None,
    batch: int = 512,
    min_fitness: float = 0.1,
) -> RegistrationResult:
    """Coarse alignment from feature matches by 3-point RANSAC.

    Hypotheses failing the edge-length similarity prefilter (all three
    src/dst edge ratios >= 0.9) are discarded before fitting. The best
    model is refit on its inliers. Raises TooFewMatches below 3 matches
    and LowFitness when the final inlier fraction is under min_fitness.
    """
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    m = len(matches)
    if m < 3:
        raise TooFewMatches(f"need >=3 matches, got {m}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ps = src.points[matches[:, 0]]
    pd = dst.points[matches[:, 1]]
    tau2 = tau * tau
    edge_pairs = ((0, 1), (1, 2), (0, 2))

    best_count = 0
    best_rt = None
    done = 0
    while done < max_iters:
        b = min(batch, max_iters - done)
        tri = rng.integers(0, m, size=(b, 3))
        done += b
        distinct = (
            (tri[:, 0] != tri[:, 1])
            & (tri[:, 1] != tri[:, 2])
            & (tri[:, 0] != tri[:, 2])
        )
        sa = ps[tri]
        sb = pd[tri]
        ratio_ok = distinct
        for i, j in edge_pairs:
            ea = np.linalg.norm(sa[:, i] - sa[:, j], axis=1)
            eb = np.linalg.norm(sb[:, i] - sb[:, j], axis=1)
            hi = np.maximum(ea, eb)
            ratio_ok = ratio_ok & (hi > 1e-12) & (np.minimum(ea, eb) >= 0.9 * hi)
        if ratio_ok.any():
            idx = np.flatnonzero(ratio_ok)
            r, t, fit_ok = _batched_fit(sa[idx], sb[idx])
            idx = idx[fit_ok]
            r, t = r[fit_ok], t[fit_ok]
            if len(idx):
                proj = np.einsum("bij,mj->bmi", r, ps) + t[:, None, :]
                d2 = np.sum((proj - pd[None, :, :]) ** 2, axis=2)
                counts = np.sum(d2 <= tau2, axis=1)
                k = int(np.argmax(counts))
                if counts[k] > best_count:
                    best_count = int(counts[k])
                    best_rt = (r[k], t[k])
        if best_count > 0:
            w = best_count / m
            if w >= 1.0:
                break
            needed = np.log(1.0 - confidence) / np.log(1.0 - w**3)
            if done >= needed:
                break

    if best_rt is None or best_count == 0:
        raise LowFitness("no hypothesis produced inliers")
    r, t = best_rt
    pose = Pose.from_matrix(_rt_matrix(r, t))
    resid2 = np.sum((ps @ r.T + t - pd) ** 2, axis=1)
    inl = resid2 <= tau2
    if inl.sum() >= 3:
        try:
            refit = umeyama_fit(ps[inl], pd[inl])
            pose = refit
        except DegenerateGeometry:
            pass
    resid2 = np.sum((pose.apply(ps) - pd) ** 2, axis=1)
    inl = resid2 <= tau2
    n_inl = int(inl.sum())
    fitness = n_inl / m
    if fitness < min_fitness:
        raise LowFitness(f"fitness {fitness:.3f} below {min_fitness}")
    rmse = float(np.sqrt(resid2[inl].mean())) if n_inl else 0.0
    return RegistrationResult(pose, fitness, rmse, n_inl)


def _rt_matrix(r, t):
    mat = np.eye(4)
    mat[:3, :3] = r
    mat[:3, 3] = t
    return mat


@numba.njit(cache=True, fastmath=True)
def _grid_nn_kernel(q, pts, order, starts, dims, mins, inv_cell, mc2, out):
    dx, dy, dz = dims[0], dims[1], dims[2]
    for i in range(q.shape[0]):
        cx = int(np.floor((q[i, 0] - mins[0]) * inv_cell))
        cy = int(np.floor((q[i, 1] - mins[1]) * inv_cell))
        cz = int(np.floor((q[i, 2] - mins[2]) * inv_cell))
        best = mc2
        bj = -1
        for ax in range(cx - 1, cx + 2):
            if ax < 0 or ax >= dx:
                continue
            for ay in range(cy - 1, cy + 2):
                if ay < 0 or ay >= dy:
                    continue
                for az in range(cz - 1, cz + 2):
                    if az < 0 or az >= dz:
                        continue
                    c = (ax * dy + ay) * dz + az
                    for s in range(starts[c], starts[c + 1]):
                        j = order[s]
                        ddx = q[i, 0] - pts[j, 0]
                        ddy = q[i, 1] - pts[j, 1]
                        ddz = q[i, 2] - pts[j, 2]
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 < best or (d2 == best and (bj < 0 or j < bj)):
                            best = d2
                            bj = j
        out[i] = bj


class _NeighborGrid:
    """Uniform grid over a fixed target cloud; cell edge = max_corr, so
    the 27-cell stencil is an exact nearest-neighbor search within
    max_corr."""

    def __init__(self, pts: np.ndarray, max_corr: float):
        self.pts = np.ascontiguousarray(pts, dtype=np.float64)
        self.max_corr = float(max_corr)
        self.mins = self.pts.min(axis=0)
        keys = np.floor((self.pts - self.mins) / max_corr).astype(np.int64)
        self.dims = keys.max(axis=0) + 1
        cid = (keys[:, 0] * self.dims[1] + keys[:, 1]) * self.dims[2] + keys[:, 2]
        self.order = np.argsort(cid, kind="stable")
        ncells = int(self.dims.prod())
        counts = np.bincount(cid, minlength=ncells)
        self.starts = np.zeros(ncells + 1, dtype=np.int64)
        np.cumsum(counts, out=self.starts[1:])

    def nearest(self, q: np.ndarray) -> np.ndarray:
        """Index of the nearest target within max_corr per query, -1 if none."""
        out = np.empty(len(q), dtype=np.int64)
        _grid_nn_kernel(
            np.ascontiguousarray(q, dtype=np.float64),
            self.pts,
            self.order,
            self.starts,
            self.dims,
            self.mins,
            1.0 / self.max_corr,
            self.max_corr * self.max_corr,
            out,
        )
        return out


def icp_refine(
    src: PointCloud,
    dst: PointCloud,
    init: Pose,
    max_corr: float,
    iters: int = 50,
    tol: float = 1e-6,
) -> RegistrationResult:
    """Point-to-point ICP from an initial pose.

    Each round matches transformed source points to their nearest
    target within max_corr and refits; stops when the relative RMSE
    change drops below tol. Raises NoCorrespondences when the first
    round matches nothing.
    """
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloud("icp needs non-empty clouds")
    grid = _NeighborGrid(dst.points, max_corr)
    pose = init
    prev = None
    rmse = 0.0
    n_match = 0
    for it in range(iters):
        tp = pose.apply(src.points)
        j = grid.nearest(tp)
        mask = j >= 0
        n_match = int(mask.sum())
        if n_match == 0:
            if it == 0:
                raise NoCorrespondences("no pairs within max_corr")
            break
        if n_match >= 3:
            try:
                pose = umeyama_fit(src.points[mask], dst.points[j[mask]])
            except DegenerateGeometry:
                pass
        resid = pose.apply(src.points[mask]) - dst.points[j[mask]]
        rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
        if prev is not None and abs(prev - rmse) < tol * max(prev, 1e-12):
            break
        prev = rmse
    fitness = n_match / len(src)
    return RegistrationResult(pose, fitness, rmse, n_match)


def register(
    src: PointCloud,
    dst: PointCloud,
    cfg: RegistrationConfig | None = None,
    rng=None,
) -> RegistrationResult:
    """Full pipeline: returns the ICP-refined src-to-dst transform."""
    cfg = cfg or RegistrationConfig()
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloud("register needs non-empty clouds")
    ds = voxel_downsample(src, cfg.voxel)
    dd = voxel_downsample(dst, cfg.voxel)
    ns = estimate_normals(ds, cfg.normal_radius_mult * cfg.voxel)
    nd = estimate_normals(dd, cfg.normal_radius_mult * cfg.voxel)
    fs = compute_fpfh(ns, cfg.fpfh_radius_mult * cfg.voxel)
    ft = compute_fpfh(nd, cfg.fpfh_radius_mult * cfg.voxel)
    matches = match_features(fs, ft)
    coarse = ransac_align(
        ns,
        nd,
        matches,
        tau=cfg.tau_mult * cfg.voxel,
        max_iters=cfg.ransac_max_iters,
        confidence=cfg.ransac_confidence,
        rng=rng,
        batch=cfg.ransac_batch,
        min_fitness=cfg.min_fitness,
    )
    return icp_refine(
        src,
        dst,
        coarse.transform,
        max_corr=cfg.max_corr_mult * cfg.voxel,
        iters=cfg.icp_iters,
        tol=cfg.icp_tol,
    )
