import time

import numpy as np
import pytest

from magsplat.geometry import CameraIntrinsics, Pose, quat_normalize, quat_to_matrix
from magsplat.splatrender import (
    GaussianCloud,
    StaleCache,
    backward,
    project_gaussian,
    render,
)

K8 = CameraIntrinsics(12.0, 12.0, 4.0, 4.0, 8, 8)
K = CameraIntrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)


def random_cloud(rng, n, z_range=(1.5, 3.0), spread=0.22, scale_range=(0.08, 0.25)):
    z = rng.uniform(*z_range, n)
    x = rng.uniform(-spread, spread, n) * z
    y = rng.uniform(-spread, spread, n) * z
    quats = quat_normalize(rng.normal(size=(n, 4)))
    return GaussianCloud(
        means=np.stack([x, y, z], axis=1),
        quats=quats,
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacities=rng.uniform(0.3, 0.9, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
    )


def oracle_render(cloud, pose, intr):
    """Straight-line per-pixel compositing; independent of the kernel code."""
    H, W = intr.height, intr.width
    Rc, t = pose.rotation, pose.t
    items = []
    for k in range(len(cloud)):
        p = Rc.T @ (cloud.means[k] - t)
        if p[2] <= 0.05:
            continue
        z = p[2]
        u0 = intr.fx * p[0] / z + intr.cx
        v0 = intr.fy * p[1] / z + intr.cy
        Rg = quat_to_matrix(cloud.quats[k])
        S2 = np.diag(np.exp(2.0 * cloud.log_scales[k]))
        Sigc = Rc.T @ Rg @ S2 @ Rg.T @ Rc
        J = np.array(
            [
                [intr.fx / z, 0.0, -intr.fx * p[0] / z**2],
                [0.0, intr.fy / z, -intr.fy * p[1] / z**2],
            ]
        )
        S = J @ Sigc @ J.T + 0.3 * np.eye(2)
        lam = np.linalg.eigvalsh(S).max()
        r3 = 3.0 * np.sqrt(lam)
        if not (-r3 <= u0 <= W - 1 + r3 and -r3 <= v0 <= H - 1 + r3):
            continue
        r = 3.4 * np.sqrt(lam) + 1.0
        box = (
            max(int(np.ceil(u0 - r)), 0),
            min(int(np.floor(u0 + r)), W - 1),
            max(int(np.ceil(v0 - r)), 0),
            min(int(np.floor(v0 + r)), H - 1),
        )
        if box[0] > box[1] or box[2] > box[3]:
            continue
        items.append((z, k, u0, v0, np.linalg.inv(S), box))
    items.sort(key=lambda it: (it[0], it[1]))
    img = np.zeros((H, W, 3))
    A = np.zeros((H, W))
    ds = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            T = 1.0
            for z, k, u0, v0, M, box in items:
                if not (box[0] <= u <= box[1] and box[2] <= v <= box[3]):
                    continue
                d = np.array([u - u0, v - v0])
                alpha = min(cloud.opacities[k] * np.exp(-0.5 * d @ M @ d), 0.99)
                if alpha < 1.0 / 255.0:
                    continue
                w = alpha * T
                img[v, u] += cloud.colors[k] * w
                A[v, u] += w
                ds[v, u] += z * w
                T *= 1.0 - alpha
    return img, ds / np.maximum(A, 1e-6), A


def sq_loss_and_adjoints(cloud, pose, intr, I_t, D_t):
    out = render(cloud, pose, intr)
    L = np.sum((out.color - I_t) ** 2) + np.sum((out.depth - D_t) ** 2)
    return L, out, 2.0 * (out.color - I_t), 2.0 * (out.depth - D_t)


def max_rel_err(analytic, fd):
    scale = np.max(np.abs(fd))
    if scale == 0:
        return np.max(np.abs(analytic))
    denom = np.maximum(np.abs(fd), 1e-3 * scale)
    return np.max(np.abs(analytic - fd) / denom)


class TestProjection:
    def test_on_axis(self):
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, 0.0, 1.0]]),
            np.log(np.full((1, 3), 0.1)), np.array([0.8]), np.array([[1.0, 0.0, 0.0]]),
        )
        res = project_gaussian(cloud, 0, Pose.identity(), K)
        assert res is not None
        center, _, z = res
        assert center == pytest.approx([32.0, 24.0])
        assert z == pytest.approx(2.0)

    def test_behind_camera_culled(self):
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, -1.0]]), np.array([[0.0, 0.0, 0.0, 1.0]]),
            np.log(np.full((1, 3), 0.1)), np.array([0.8]), np.array([[1.0, 0.0, 0.0]]),
        )
        assert project_gaussian(cloud, 0, Pose.identity(), K) is None

    def test_screen_sigma(self):
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, 0.0, 1.0]]),
            np.log(np.full((1, 3), 0.1)), np.array([0.8]), np.array([[1.0, 0.0, 0.0]]),
        )
        _, Sig2, _ = project_gaussian(cloud, 0, Pose.identity(), K)
        sigma = np.sqrt(Sig2[0, 0])
        assert abs(sigma - 2.5) / 2.5 < 0.05


class TestForward:
    def test_empty(self):
        out = render(GaussianCloud.empty(), Pose.identity(), K)
        assert np.all(out.color == 0)
        assert np.all(out.alpha == 0)
        assert np.all(out.depth == 0)

    def test_two_gaussian_compositing(self):
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
            quats=np.array([[0.0, 0.0, 0.0, 1.0]] * 2),
            log_scales=np.log(np.full((2, 3), 5.0)),  # huge: G ~= 1 at center
            opacities=np.array([0.5, 0.5]),
            colors=np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]),
        )
        out = render(cloud, Pose.identity(), K)
        assert out.color[24, 32] == pytest.approx([0.5, 0.5, 0.5], abs=1e-9)
        assert out.alpha[24, 32] == pytest.approx(0.75, abs=1e-9)
        assert out.depth[24, 32] == pytest.approx(1.0 / 0.75, abs=1e-6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(21)
        cloud = random_cloud(rng, 20)
        out = render(cloud, Pose.identity(), K8)
        img, dep, A = oracle_render(cloud, Pose.identity(), K8)
        assert np.max(np.abs(out.color - img)) < 1e-6
        assert np.max(np.abs(out.alpha - A)) < 1e-6
        assert np.max(np.abs(out.depth - dep)) < 1e-6

    def test_matches_oracle_offset_pose(self):
        rng = np.random.default_rng(22)
        cloud = random_cloud(rng, 15)
        pose = Pose.from_qt(
            quat_normalize(np.array([0.05, -0.02, 0.01, 1.0])), np.array([0.1, -0.05, -0.3])
        )
        out = render(cloud, pose, K8)
        img, dep, A = oracle_render(cloud, pose, K8)
        assert np.max(np.abs(out.color - img)) < 1e-6
        assert np.max(np.abs(out.alpha - A)) < 1e-6

    def test_order_invariance(self):
        rng = np.random.default_rng(23)
        cloud = random_cloud(rng, 30)
        out1 = render(cloud, Pose.identity(), K8)
        perm = rng.permutation(30)
        shuffled = GaussianCloud(
            cloud.means[perm], cloud.quats[perm], cloud.log_scales[perm],
            cloud.opacities[perm], cloud.colors[perm],
        )
        out2 = render(shuffled, Pose.identity(), K8)
        assert np.array_equal(out1.color, out2.color)
        assert np.array_equal(out1.depth, out2.depth)
        assert np.array_equal(out1.alpha, out2.alpha)

    def test_equal_z_tiebreak(self):
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]]),
            quats=np.array([[0.0, 0.0, 0.0, 1.0]] * 2),
            log_scales=np.log(np.full((2, 3), 5.0)),
            opacities=np.array([0.6, 0.6]),
            colors=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        )
        out = render(cloud, Pose.identity(), K)
        # id 0 in front: 0.6 red, then 0.4*0.6 green
        assert out.color[24, 32, 0] == pytest.approx(0.6, abs=1e-9)
        assert out.color[24, 32, 1] == pytest.approx(0.24, abs=1e-9)

    def test_alpha_monotone_in_opacity(self):
        rng = np.random.default_rng(24)
        cloud = random_cloud(rng, 12)
        out1 = render(cloud, Pose.identity(), K8)
        bumped = cloud.copy()
        bumped.opacities[5] = min(bumped.opacities[5] + 0.3, 1.0)
        out2 = render(bumped, Pose.identity(), K8)
        # slack covers the T_EPS compositing cutoff
        assert np.all(out2.alpha >= out1.alpha - 1e-7)

    def test_valid_mask(self):
        rng = np.random.default_rng(25)
        cloud = random_cloud(rng, 8)
        out = render(cloud, Pose.identity(), K8)
        assert np.array_equal(out.valid_mask, out.alpha >= 0.5)


class TestBackward:
    def test_zero_adjoints(self):
        rng = np.random.default_rng(31)
        cloud = random_cloud(rng, 10)
        out = render(cloud, Pose.identity(), K8)
        g = backward(out, np.zeros((8, 8, 3)), np.zeros((8, 8)), cloud)
        assert np.all(g.dcolors == 0)
        assert np.all(g.dopacities == 0)
        assert np.all(g.dmeans == 0)

    def test_single_gaussian_color_linear_term(self):
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, 0.0, 1.0]]),
            np.log(np.full((1, 3), 0.3)), np.array([0.7]), np.array([[0.2, 0.4, 0.6]]),
        )
        out = render(cloud, Pose.identity(), K8)
        dI = np.zeros((8, 8, 3))
        dI[4, 4, 0] = 1.0  # L = I_hat_red at pixel (4,4)
        g = backward(out, dI, np.zeros((8, 8)), cloud)
        # alpha*T at that pixel; single Gaussian so T=1
        c = out._cache
        p = 4 * 8 + 4
        alpha = c["ealpha"][c["poff"][p]]
        assert g.dcolors[0, 0] == pytest.approx(alpha, abs=1e-12)
        assert g.dcolors[0, 1] == 0.0

    def test_stale_cache(self):
        rng = np.random.default_rng(32)
        cloud = random_cloud(rng, 6)
        out = render(cloud, Pose.identity(), K8)
        smaller = cloud.subset(np.arange(4))
        with pytest.raises(StaleCache):
            backward(out, np.zeros((8, 8, 3)), np.zeros((8, 8)), smaller)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(33)
        cloud = random_cloud(rng, 20)
        I_t = rng.uniform(0, 1, (8, 8, 3))
        D_t = rng.uniform(1.0, 3.0, (8, 8))
        t0 = time.time()
        L0, out, dI, dD = sq_loss_and_adjoints(cloud, Pose.identity(), K8, I_t, D_t)
        g = backward(out, dI, dD, cloud, want_scale_grad=True)

        h = 1e-4

        def fd(param, k, c):
            plus = cloud.copy()
            getattr(plus, param)[k, c] += h
            Lp = sq_loss_and_adjoints(plus, Pose.identity(), K8, I_t, D_t)[0]
            minus = cloud.copy()
            getattr(minus, param)[k, c] -= h
            Lm = sq_loss_and_adjoints(minus, Pose.identity(), K8, I_t, D_t)[0]
            return (Lp - Lm) / (2 * h)

        def fd_op(k):
            plus = cloud.copy()
            plus.opacities[k] += h
            Lp = sq_loss_and_adjoints(plus, Pose.identity(), K8, I_t, D_t)[0]
            minus = cloud.copy()
            minus.opacities[k] -= h
            Lm = sq_loss_and_adjoints(minus, Pose.identity(), K8, I_t, D_t)[0]
            return (Lp - Lm) / (2 * h)

        fd_col = np.array([[fd("colors", k, c) for c in range(3)] for k in range(20)])
        fd_opa = np.array([fd_op(k) for k in range(20)])
        fd_mean = np.array([[fd("means", k, c) for c in range(3)] for k in range(20)])
        fd_ls = np.array([[fd("log_scales", k, c) for c in range(3)] for k in range(20)])
        elapsed = time.time() - t0

        assert max_rel_err(g.dcolors, fd_col) < 1e-3
        assert max_rel_err(g.dopacities, fd_opa) < 1e-3
        assert max_rel_err(g.dmeans, fd_mean) < 1e-3
        assert max_rel_err(g.dlog_scales, fd_ls) < 1e-3
        assert elapsed < 10.0

    def test_depth_quotient_gradient(self):
        # loss touching only D_hat exercises the A-path of the quotient
        rng = np.random.default_rng(34)
        cloud = random_cloud(rng, 8)
        D_t = rng.uniform(1.0, 3.0, (8, 8))

        def loss(c):
            out = render(c, Pose.identity(), K8)
            return np.sum((out.depth - D_t) ** 2), out

        L0, out = loss(cloud)
        g = backward(out, np.zeros((8, 8, 3)), 2.0 * (out.depth - D_t), cloud)
        h = 1e-4
        fd = np.zeros(8)
        for k in range(8):
            p = cloud.copy()
            p.opacities[k] += h
            m = cloud.copy()
            m.opacities[k] -= h
            fd[k] = (loss(p)[0] - loss(m)[0]) / (2 * h)
        assert max_rel_err(g.dopacities, fd) < 1e-3

    def test_quat_fd_gradient_isotropy(self):
        # rotating an isotropic Gaussian changes nothing
        cloud = GaussianCloud(
            np.array([[0.1, -0.1, 2.0]]), quat_normalize(np.array([[0.3, 0.1, -0.2, 0.9]])),
            np.log(np.full((1, 3), 0.2)), np.array([0.7]), np.array([[0.5, 0.5, 0.5]]),
        )
        out = render(cloud, Pose.identity(), K8)
        dI = np.ones((8, 8, 3))
        g = backward(out, dI, np.zeros((8, 8)), cloud, want_rot_grad=True)
        assert g.dquats is not None
        # raw-parameter FD also sees the quat norm (it scales the covariance);
        # only the tangential part is a pure rotation and must vanish
        q = cloud.quats[0]
        tangential = g.dquats[0] - (g.dquats[0] @ q) * q
        assert np.max(np.abs(tangential)) < 1e-4

    def test_quat_fd_gradient_anisotropic_nonzero(self):
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, 2.0]]), quat_normalize(np.array([[0.2, 0.0, 0.3, 0.9]])),
            np.log(np.array([[0.4, 0.1, 0.05]])), np.array([0.7]),
            np.array([[0.5, 0.5, 0.5]]),
        )
        out = render(cloud, Pose.identity(), K8)
        rng = np.random.default_rng(35)
        dI = rng.normal(size=(8, 8, 3))
        g = backward(out, dI, np.zeros((8, 8)), cloud, want_rot_grad=True)
        assert np.max(np.abs(g.dquats)) > 1e-4
