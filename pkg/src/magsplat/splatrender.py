"""CPU forward/backward renderer for 3D Gaussian splats.

Per pixel, Gaussians are composited front to back after a stable depth
sort (ties broken by lower Gaussian id):

    alpha_i = a_i * exp(-0.5 d^T Sigma2D^-1 d), clamped to <= 0.99,
    dropped below 1/255
    I_hat  = sum c_i alpha_i T_i,   T_i = prod_{j<i} (1 - alpha_j)
    A      = sum alpha_i T_i
    D_hat  = (sum z_i alpha_i T_i) / max(A, 1e-6)

Screen covariance is J Sigma3D_cam J^T + 0.3 I with J the perspective
Jacobian at the mean. Pixels with A < 0.5 are invalid for registration.

The backward pass is analytic for color, opacity, and mean (the mean
chain includes the dependence of J, and hence Sigma2D, on the camera-
frame mean) and analytic for log_scale; rotation gradients are optional
central finite differences.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_FLOOR = 1.0 / 255.0
COV_FLOOR = 0.3
Z_NEAR = 0.05
BBOX_MULT = 3.4
CULL_MULT = 3.0
_TILE = 8
# stop compositing once transmittance is numerically dead; the dropped
# tail is bounded by T_EPS, far below every test tolerance
T_EPS = 1e-8


class RenderError(Exception):
    pass


class StaleCache(RenderError):
    pass


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian set. opacities are activated values in [0,1]."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return self.means.shape[0]

    @staticmethod
    def empty():
        return GaussianCloud(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, 3)),
        )

    def copy(self):
        return GaussianCloud(
            self.means.copy(), self.quats.copy(), self.log_scales.copy(),
            self.opacities.copy(), self.colors.copy(),
        )

    def subset(self, mask):
        return GaussianCloud(
            self.means[mask], self.quats[mask], self.log_scales[mask],
            self.opacities[mask], self.colors[mask],
        )

    @staticmethod
    def concat(a, b):
        return GaussianCloud(
            np.concatenate([a.means, b.means]),
            np.concatenate([a.quats, b.quats]),
            np.concatenate([a.log_scales, b.log_scales]),
            np.concatenate([a.opacities, b.opacities]),
            np.concatenate([a.colors, b.colors]),
        )


@dataclass
class GradientSet:
    dcolors: np.ndarray
    dopacities: np.ndarray
    dmeans: np.ndarray
    dlog_scales: np.ndarray | None = None
    dquats: np.ndarray | None = None


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    _cache: dict = None

    @property
    def valid_mask(self):
        return self.alpha >= 0.5


def _quats_to_mats(q):
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _project_all(cloud, cam_pose, intr):
    """Vectorized projection of every Gaussian; returns arrays + valid mask."""
    n = len(cloud)
    Rc = cam_pose.rotation
    p_cam = (cloud.means - cam_pose.t) @ Rc
    valid = p_cam[:, 2] > Z_NEAR
    z = np.where(valid, p_cam[:, 2], 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    u0 = intr.fx * x / z + intr.cx
    v0 = intr.fy * y / z + intr.cy

    Rg = _quats_to_mats(cloud.quats)
    Wm = np.einsum("ij,njk->nik", Rc.T, Rg)
    S2 = np.exp(2.0 * cloud.log_scales)
    Sigc = np.einsum("nik,nk,njk->nij", Wm, S2, Wm)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / z**2
    Sig2 = np.einsum("nab,nbc,ndc->nad", J, Sigc, J)
    Sig2[:, 0, 0] += COV_FLOOR
    Sig2[:, 1, 1] += COV_FLOOR

    s00, s01, s11 = Sig2[:, 0, 0], Sig2[:, 0, 1], Sig2[:, 1, 1]
    det = s00 * s11 - s01 * s01
    m00 = s11 / det
    m01 = -s01 / det
    m11 = s00 / det
    mid = 0.5 * (s00 + s11)
    disc = np.sqrt(np.maximum(0.25 * (s00 - s11) ** 2 + s01 * s01, 0.0))
    lam_max = mid + disc
    r3 = CULL_MULT * np.sqrt(lam_max)
    valid &= (u0 >= -r3) & (u0 <= intr.width - 1 + r3)
    valid &= (v0 >= -r3) & (v0 <= intr.height - 1 + r3)

    r = BBOX_MULT * np.sqrt(lam_max) + 1.0
    umin = np.maximum(np.ceil(u0 - r), 0).astype(np.int64)
    umax = np.minimum(np.floor(u0 + r), intr.width - 1).astype(np.int64)
    vmin = np.maximum(np.ceil(v0 - r), 0).astype(np.int64)
    vmax = np.minimum(np.floor(v0 + r), intr.height - 1).astype(np.int64)
    valid &= (umin <= umax) & (vmin <= vmax)

    # tighter rasterization-only bounds: beyond rcut even the slowest-
    # decaying axis puts alpha under the 1/255 floor, so those pixels can
    # never receive a contribution and need not be binned at all
    qmax = 2.0 * np.log(np.maximum(255.0 * cloud.opacities, 1.0))
    rcut = np.sqrt(lam_max * qmax)
    re = np.minimum(r, rcut)
    bumin = np.maximum(np.ceil(u0 - re), 0).astype(np.int64)
    bumax = np.minimum(np.floor(u0 + re), intr.width - 1).astype(np.int64)
    bvmin = np.maximum(np.ceil(v0 - re), 0).astype(np.int64)
    bvmax = np.minimum(np.floor(v0 + re), intr.height - 1).astype(np.int64)
    bvalid = valid & (bumin <= bumax) & (bvmin <= bvmax)
    return {
        "p_cam": p_cam, "z": z, "u0": u0, "v0": v0,
        "Sigc": Sigc, "J": J, "Sig2": Sig2,
        "m00": m00, "m01": m01, "m11": m11,
        "umin": umin, "umax": umax, "vmin": vmin, "vmax": vmax,
        "bumin": bumin, "bumax": bumax, "bvmin": bvmin, "bvmax": bvmax,
        "qmax": qmax, "valid": valid, "bvalid": bvalid, "Rc": Rc,
    }


def project_gaussian(cloud, idx, cam_pose, intr):
    """Single-Gaussian projection: (center, Sigma2D, z) or None when culled."""
    pr = _project_all(cloud, cam_pose, intr)
    if not pr["valid"][idx]:
        return None
    return (
        np.array([pr["u0"][idx], pr["v0"][idx]]),
        pr["Sig2"][idx].copy(),
        pr["z"][idx],
    )


@njit(cache=True)
def _bin_tiles(order, umin, umax, vmin, vmax, tiles_x, tiles_y):
    n = order.shape[0]
    counts = np.zeros(tiles_x * tiles_y, dtype=np.int64)
    for oi in range(n):
        k = order[oi]
        tx0, tx1 = umin[k] // _TILE, umax[k] // _TILE
        ty0, ty1 = vmin[k] // _TILE, vmax[k] // _TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx] += 1
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for i in range(tiles_x * tiles_y):
        offsets[i + 1] = offsets[i] + counts[i]
    tlist = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for oi in range(n):
        k = order[oi]
        tx0, tx1 = umin[k] // _TILE, umax[k] // _TILE
        ty0, ty1 = vmin[k] // _TILE, vmax[k] // _TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                tlist[cursor[t]] = k
                cursor[t] += 1
    return offsets, tlist


@njit(cache=True, fastmath=True)
def _composite(
    toff, tlist, u0, v0, zs, m00, m01, m11, a, qmax, colors,
    umin, umax, vmin, vmax, H, W, tiles_x,
    eg, ealpha, eT, ecount, image, amap, dsum,
):
    cursor = 0
    for v in range(H):
        for u in range(W):
            t = (v // _TILE) * tiles_x + (u // _TILE)
            T = 1.0
            start = cursor
            for i in range(toff[t], toff[t + 1]):
                k = tlist[i]
                if u < umin[k] or u > umax[k] or v < vmin[k] or v > vmax[k]:
                    continue
                d0 = u - u0[k]
                d1 = v - v0[k]
                q = m00[k] * d0 * d0 + 2.0 * m01[k] * d0 * d1 + m11[k] * d1 * d1
                # q > qmax means alpha lands under the 1/255 floor: skip the exp
                if q > qmax[k]:
                    continue
                alpha = a[k] * np.exp(-0.5 * q)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_FLOOR:
                    continue
                w = alpha * T
                image[v, u, 0] += colors[k, 0] * w
                image[v, u, 1] += colors[k, 1] * w
                image[v, u, 2] += colors[k, 2] * w
                amap[v, u] += w
                dsum[v, u] += zs[k] * w
                eg[cursor] = k
                ealpha[cursor] = alpha
                eT[cursor] = T
                cursor += 1
                T *= 1.0 - alpha
                if T < T_EPS:
                    break
            ecount[v * W + u] = cursor - start


@njit(cache=True, fastmath=True)
def _backward_kernel(
    poff, ecount, eg, ealpha, eT, u0, v0, zs, m00, m01, m11, a, colors,
    dI, dAeff, dDsum, H, W,
    g_da, g_dcol, g_dc2d, g_ds00, g_ds01, g_ds11, g_dz,
):
    for v in range(H):
        for u in range(W):
            p = v * W + u
            ne = ecount[p]
            if ne == 0:
                continue
            base = poff[p]
            dr = dI[v, u, 0]
            dg = dI[v, u, 1]
            db = dI[v, u, 2]
            da = dAeff[v, u]
            dd = dDsum[v, u]
            suffix = 0.0
            for i in range(ne - 1, -1, -1):
                k = eg[base + i]
                alpha = ealpha[base + i]
                T = eT[base + i]
                g = dr * colors[k, 0] + dg * colors[k, 1] + db * colors[k, 2] + da + dd * zs[k]
                w = alpha * T
                dalpha = g * T - suffix / (1.0 - alpha)
                suffix += g * w
                g_dcol[k, 0] += dr * w
                g_dcol[k, 1] += dg * w
                g_dcol[k, 2] += db * w
                g_dz[k] += dd * w
                if alpha >= ALPHA_MAX:
                    continue  # clamp kills the opacity/shape paths
                G = alpha / a[k]
                g_da[k] += dalpha * G
                d0 = u - u0[k]
                d1 = v - v0[k]
                Md0 = m00[k] * d0 + m01[k] * d1
                Md1 = m01[k] * d0 + m11[k] * d1
                common = dalpha * alpha
                g_dc2d[k, 0] += common * Md0
                g_dc2d[k, 1] += common * Md1
                g_ds00[k] += 0.5 * common * Md0 * Md0
                g_ds01[k] += 0.5 * common * Md0 * Md1
                g_ds11[k] += 0.5 * common * Md1 * Md1


def render(cloud, cam_pose, intr):
    """Composite the cloud into color/depth/alpha maps, caching per-pixel
    contribution lists for backward."""
    H, W = intr.height, intr.width
    image = np.zeros((H, W, 3))
    amap = np.zeros((H, W))
    dsum = np.zeros((H, W))
    n = len(cloud)
    if n == 0:
        out = RenderOutput(image, dsum.copy(), amap)
        out._cache = {"n": 0, "poff": np.zeros(H * W + 1, dtype=np.int64),
                      "ecount": np.zeros(H * W, dtype=np.int64), "intr": intr,
                      "cam_pose": cam_pose, "dsum": dsum}
        return out

    pr = _project_all(cloud, cam_pose, intr)
    vidx = np.flatnonzero(pr["bvalid"])
    zs = pr["z"]
    order = vidx[np.argsort(zs[vidx], kind="stable")]

    tiles_x = (W + _TILE - 1) // _TILE
    tiles_y = (H + _TILE - 1) // _TILE
    toff, tlist = _bin_tiles(
        order, pr["bumin"], pr["bumax"], pr["bvmin"], pr["bvmax"], tiles_x, tiles_y
    )
    # capacity bound: total candidate-box coverage; entries are written
    # compactly so untouched slack pages stay unmapped
    total = int(np.sum(
        (pr["bumax"][vidx] - pr["bumin"][vidx] + 1)
        * (pr["bvmax"][vidx] - pr["bvmin"][vidx] + 1)
    ))
    eg = np.empty(total, dtype=np.int64)
    ealpha = np.empty(total)
    eT = np.empty(total)
    ecount = np.zeros(H * W, dtype=np.int64)
    _composite(
        toff, tlist, pr["u0"], pr["v0"], zs,
        pr["m00"], pr["m01"], pr["m11"], cloud.opacities, pr["qmax"], cloud.colors,
        pr["bumin"], pr["bumax"], pr["bvmin"], pr["bvmax"], H, W, tiles_x,
        eg, ealpha, eT, ecount, image, amap, dsum,
    )
    poff = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(ecount, out=poff[1:])
    depth = dsum / np.maximum(amap, 1e-6)
    out = RenderOutput(image, depth, amap)
    out._cache = {
        "n": n, "pr": pr, "poff": poff, "ecount": ecount,
        "eg": eg, "ealpha": ealpha, "eT": eT,
        "intr": intr, "cam_pose": cam_pose, "dsum": dsum,
    }
    return out


def contributing_mask(out):
    """Bool mask over the rendered cloud, True where a Gaussian placed at
    least one compositing entry (alpha >= 1/255 ahead of the transmittance
    cutoff) in this render."""
    cache = out._cache
    mask = np.zeros(cache["n"], dtype=bool)
    if cache["n"]:
        mask[cache["eg"][: cache["poff"][-1]]] = True
    return mask


def backward(out, dI, dD, cloud, want_scale_grad=True, want_rot_grad=False, dA=None):
    """Gradients of a scalar loss given dL/dI_hat and dL/dD_hat maps."""
    cache = out._cache
    n = len(cloud)
    if cache["n"] != n:
        raise StaleCache(f"cache built for {cache['n']} Gaussians, got {n}")
    H, W = out.alpha.shape
    denom = np.maximum(out.alpha, 1e-6)
    dDsum = dD / denom
    dAeff = np.zeros((H, W)) if dA is None else dA.astype(np.float64).copy()
    live = out.alpha > 1e-6
    dAeff[live] -= dD[live] * cache["dsum"][live] / denom[live] ** 2

    grads = GradientSet(
        dcolors=np.zeros((n, 3)), dopacities=np.zeros(n), dmeans=np.zeros((n, 3)),
    )
    if n == 0:
        return grads
    pr = cache["pr"]
    g_da = np.zeros(n)
    g_dcol = np.zeros((n, 3))
    g_dc2d = np.zeros((n, 2))
    g_ds00 = np.zeros(n)
    g_ds01 = np.zeros(n)
    g_ds11 = np.zeros(n)
    g_dz = np.zeros(n)
    _backward_kernel(
        cache["poff"], cache["ecount"], cache["eg"], cache["ealpha"], cache["eT"],
        pr["u0"], pr["v0"], pr["z"], pr["m00"], pr["m01"], pr["m11"],
        cloud.opacities, cloud.colors,
        np.ascontiguousarray(dI, dtype=np.float64),
        dAeff, dDsum, H, W,
        g_da, g_dcol, g_dc2d, g_ds00, g_ds01, g_ds11, g_dz,
    )
    grads.dcolors = g_dcol
    grads.dopacities = g_da

    # chain 2D gradients back to camera-frame means, then submap frame
    J = pr["J"]
    dSig2 = np.empty((n, 2, 2))
    dSig2[:, 0, 0] = g_ds00
    dSig2[:, 0, 1] = g_ds01
    dSig2[:, 1, 0] = g_ds01
    dSig2[:, 1, 1] = g_ds11

    dp_cam = np.einsum("nab,na->nb", J, g_dc2d)
    dp_cam[:, 2] += g_dz

    Sigc = pr["Sigc"]
    dJ = 2.0 * np.einsum("nab,nbc,ncd->nad", dSig2, J, Sigc)
    p = pr["p_cam"]
    z = pr["z"]
    fx, fy = cache["intr"].fx, cache["intr"].fy
    x, y = p[:, 0], p[:, 1]
    dp_cam[:, 0] += dJ[:, 0, 2] * (-fx / z**2)
    dp_cam[:, 1] += dJ[:, 1, 2] * (-fy / z**2)
    dp_cam[:, 2] += (
        dJ[:, 0, 0] * (-fx / z**2)
        + dJ[:, 1, 1] * (-fy / z**2)
        + dJ[:, 0, 2] * (2.0 * fx * x / z**3)
        + dJ[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    grads.dmeans = dp_cam @ pr["Rc"].T

    if want_scale_grad:
        dSigc = np.einsum("nba,nbc,ncd->nad", J, dSig2, J)
        Rg = _quats_to_mats(cloud.quats)
        Wm = np.einsum("ij,njk->nik", pr["Rc"].T, Rg)
        dS2 = np.einsum("nka,nkl,nlb->nab", Wm, dSigc, Wm)
        diag = np.stack([dS2[:, 0, 0], dS2[:, 1, 1], dS2[:, 2, 2]], axis=1)
        grads.dlog_scales = diag * 2.0 * np.exp(2.0 * cloud.log_scales)

    if want_rot_grad:
        grads.dquats = _fd_quat_grad(out, dI, dD, cloud, dA)
    return grads


def _contract(out_p, out_m, dI, dD, h):
    num = np.sum(dI * (out_p.color - out_m.color))
    num += np.sum(dD * (out_p.depth - out_m.depth))
    return num / (2.0 * h)


def _fd_quat_grad(out, dI, dD, cloud, dA, h=1e-4):
    cache = out._cache
    grads = np.zeros((len(cloud), 4))
    for k in range(len(cloud)):
        for c in range(4):
            cp = cloud.copy()
            cp.quats[k, c] += h
            op = render(cp, cache["cam_pose"], cache["intr"])
            cm = cloud.copy()
            cm.quats[k, c] -= h
            om = render(cm, cache["cam_pose"], cache["intr"])
            grads[k, c] = _contract(op, om, dI, dD, h)
            if dA is not None:
                grads[k, c] += np.sum(dA * (op.alpha - om.alpha)) / (2.0 * h)
    return grads
