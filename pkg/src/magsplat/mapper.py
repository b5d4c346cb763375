"""Submap construction: seed Gaussians from keyframe depth, then optimize
them against the submap's keyframes.

The loss per keyframe is

    L = l_color [(1-rho) mean|I_hat - I| + rho (1 - SSIM(I_hat, I))]
      + l_depth mean|D_hat - D|          (valid-depth pixels only)
      + l_reg |K|^-1 sum_k ||s_k - s_mean||_1,   s_k = exp(log_scale_k)

optimized by Adam with per-class learning rates (the standard 3DGS
rates; plain descent at those magnitudes stalls). Keyframes are visited
round-robin and their poses are never updated. Outside the compaction
window opacity is parameterized through a sigmoid; from the window start
on it is optimized directly in [0,1] with unscaled steps so the
sparsification penalty acts at its stated strength.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose
from .metrics import ssim_with_gradient
from .splatrender import GaussianCloud, backward, render


class MapperError(Exception):
    pass


class NoValidDepth(MapperError):
    pass


@dataclass
class MappingConfig:
    lambda_color: float = 1.0
    lambda_depth: float = 0.5
    lambda_reg: float = 10.0
    rho: float = 0.2
    iterations: int = 1000
    seed_stride: int = 4
    densify_iters: tuple = (200, 400)
    lr_mean_scale: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_log_scale: float = 5e-3
    scene_diameter: float = 1.0

    def __post_init__(self):
        for name in ("lambda_color", "lambda_depth", "lambda_reg"):
            if getattr(self, name) < 0.0:
                raise MapperError(f"{name} must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise MapperError(f"rho {self.rho} outside [0,1]")
        if self.iterations < 0:
            raise MapperError("iterations must be >= 0")
        if self.seed_stride < 1:
            raise MapperError("seed_stride must be >= 1")

    @property
    def lr_mean(self):
        return self.lr_mean_scale * self.scene_diameter


@dataclass
class Submap:
    """A bounded keyframe group plus the Gaussians optimized against it.

    Gaussians and keyframe-relative camera poses live in the frame of the
    first keyframe; base_pose is that keyframe's agent-local odometry pose.
    """

    submap_id: int
    agent_id: int
    keyframes: list
    gaussians: GaussianCloud
    base_pose: Pose
    depth_image: np.ndarray | None = None

    def __post_init__(self):
        if len(self.keyframes) < 1:
            raise MapperError("submap needs at least one keyframe")

    def camera_pose(self, kf):
        """Pose of kf's camera in the submap frame."""
        return self.base_pose.inverse().compose(kf.pose)


@dataclass
class LossTerms:
    loss: float
    d_image: np.ndarray
    d_depth: np.ndarray
    d_log_scales: np.ndarray


def seed_from_keyframe(kf, stride, base_pose, intr, mask=None):
    """Back-project every stride-th valid depth pixel into the submap frame.

    Seeds carry the pixel color, opacity 0.5, identity rotation, and an
    isotropic log_scale of log(z * stride / fx). An optional pixel mask
    (full-resolution) restricts seeding, used by densification.
    """
    frame = kf.frame
    if frame is None or frame.depth is None:
        raise NoValidDepth(f"keyframe {kf.frame_index} carries no depth")
    depth = frame.depth[:: stride, :: stride]
    color = frame.color[:: stride, :: stride]
    H, W = frame.depth.shape
    vg, ug = np.mgrid[0:H:stride, 0:W:stride]
    valid = depth > 0.0
    if mask is not None:
        valid &= mask[:: stride, :: stride]
    z = depth[valid]
    if z.size == 0:
        return GaussianCloud.empty()
    u = ug[valid].astype(np.float64)
    v = vg[valid].astype(np.float64)
    p_cam = np.stack(
        [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1
    )
    rel = base_pose.inverse().compose(kf.pose)
    means = p_cam @ rel.rotation.T + rel.t
    n = z.size
    quats = np.zeros((n, 4))
    quats[:, 3] = 1.0
    log_scales = np.repeat(np.log(z * stride / intr.fx)[:, None], 3, axis=1)
    return GaussianCloud(
        means=means,
        quats=quats,
        log_scales=log_scales,
        opacities=np.full(n, 0.5),
        colors=color[valid].astype(np.float64),
    )


def build_submap(submap_id, agent_id, keyframes, intr, stride, depth_image=None):
    """Assemble a submap seeded from every keyframe."""
    base_pose = keyframes[0].pose
    clouds = [
        seed_from_keyframe(kf, stride, base_pose, intr) for kf in keyframes
    ]
    cloud = clouds[0]
    for extra in clouds[1:]:
        cloud = GaussianCloud.concat(cloud, extra)
    return Submap(
        submap_id=submap_id,
        agent_id=agent_id,
        keyframes=list(keyframes),
        gaussians=cloud,
        base_pose=base_pose,
        depth_image=depth_image,
    )


def compute_loss(out, target_color, target_depth, log_scales, cfg):
    """Joint photometric/depth/scale-regularity loss and its adjoints."""
    H, W = target_depth.shape
    diff = out.color - target_color
    n_col = diff.size
    loss = cfg.lambda_color * (1.0 - cfg.rho) * float(np.abs(diff).mean())
    d_image = cfg.lambda_color * (1.0 - cfg.rho) / n_col * np.sign(diff)
    if cfg.rho > 0.0 and cfg.lambda_color > 0.0:
        s_val, s_grad = ssim_with_gradient(out.color, target_color)
        loss += cfg.lambda_color * cfg.rho * (1.0 - s_val)
        d_image -= cfg.lambda_color * cfg.rho * s_grad

    valid = target_depth > 0.0
    nv = int(valid.sum())
    d_depth = np.zeros((H, W))
    if nv > 0 and cfg.lambda_depth > 0.0:
        ddiff = out.depth - target_depth
        loss += cfg.lambda_depth * float(np.abs(ddiff[valid]).mean())
        d_depth[valid] = cfg.lambda_depth / nv * np.sign(ddiff[valid])

    n = log_scales.shape[0]
    d_ls = np.zeros_like(log_scales)
    if n > 0 and cfg.lambda_reg > 0.0:
        s = np.exp(log_scales)
        dev = s - s.mean(axis=0)
        loss += cfg.lambda_reg / n * float(np.abs(dev).sum())
        sgn = np.sign(dev)
        # second term: each scale also moves the mean it is compared against
        d_ls = cfg.lambda_reg / n * s * (sgn - sgn.mean(axis=0))
    return LossTerms(loss=float(loss), d_image=d_image, d_depth=d_depth, d_log_scales=d_ls)


def _logit(a):
    a = np.clip(a, 1e-6, 1.0 - 1e-6)
    return np.log(a / (1.0 - a))


class _Adam:
    """Per-parameter Adam moments that survive densify/prune resizing."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad, t):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** t)
        vhat = self.v / (1.0 - self.beta2 ** t)
        return mhat / (np.sqrt(vhat) + self.eps)

    def extend(self, n_new):
        pad = (n_new,) + self.m.shape[1:]
        self.m = np.concatenate([self.m, np.zeros(pad)])
        self.v = np.concatenate([self.v, np.zeros(pad)])

    def mask(self, keep):
        self.m = self.m[keep]
        self.v = self.v[keep]


def optimize_submap(submap, cfg, intr, compaction=None, densify=True, trace=None):
    """Run the mapping loop; returns a new submap with optimized Gaussians.

    compaction, when given, is a CompactionDriver consulted every
    iteration; densification seeds new Gaussians at the configured
    iterations wherever the current keyframe's accumulated alpha is
    below 0.5.
    """
    cloud = submap.gaussians.copy()
    n_kf = len(submap.keyframes)
    logits = _logit(cloud.opacities)
    n = len(cloud)
    opt_mean = _Adam((n, 3))
    opt_color = _Adam((n, 3))
    opt_ls = _Adam((n, 3))
    opt_logit = _Adam(n)
    raw_started = False

    for t in range(1, cfg.iterations + 1):
        if compaction is not None and t == compaction.cfg.start:
            compaction.begin(cloud.opacities)
            raw_started = True
        if compaction is not None and t == compaction.cfg.prune_iter:
            keep = compaction.prune_mask(cloud.opacities)
            cloud = cloud.subset(keep)
            logits = logits[keep]
            for opt in (opt_mean, opt_color, opt_ls, opt_logit):
                opt.mask(keep)

        kf = submap.keyframes[(t - 1) % n_kf]
        cam = submap.camera_pose(kf)
        out = render(cloud, cam, intr)
        terms = compute_loss(out, kf.frame.color, kf.frame.depth, cloud.log_scales, cfg)
        if trace is not None:
            trace.append(terms.loss)
        if len(cloud) == 0:
            continue
        grads = backward(out, terms.d_image, terms.d_depth, cloud, want_scale_grad=True)

        cloud.means -= cfg.lr_mean * opt_mean.step(grads.dmeans, t)
        cloud.colors = np.clip(
            cloud.colors - cfg.lr_color * opt_color.step(grads.dcolors, t), 0.0, 1.0
        )
        cloud.log_scales -= cfg.lr_log_scale * opt_ls.step(
            grads.dlog_scales + terms.d_log_scales, t
        )

        if compaction is not None and compaction.wants_step(t):
            cloud.opacities = compaction.step(t, grads.dopacities, cfg.lr_opacity)
        elif raw_started and compaction.holding(t):
            pass
        elif raw_started:
            cloud.opacities = np.clip(
                cloud.opacities - cfg.lr_opacity * grads.dopacities, 0.0, 1.0
            )
        else:
            act = cloud.opacities
            step = opt_logit.step(grads.dopacities * act * (1.0 - act), t)
            logits -= cfg.lr_opacity * step
            cloud.opacities = 1.0 / (1.0 + np.exp(-logits))

        if densify and t in cfg.densify_iters and not raw_started:
            low = ~(out.alpha >= 0.5)
            extra = seed_from_keyframe(
                kf, cfg.seed_stride, submap.base_pose, intr, mask=low
            )
            if len(extra) > 0:
                cloud = GaussianCloud.concat(cloud, extra)
                logits = np.concatenate([logits, _logit(extra.opacities)])
                for opt in (opt_mean, opt_color, opt_ls, opt_logit):
                    opt.extend(len(extra))

    return replace(submap, gaussians=cloud)
