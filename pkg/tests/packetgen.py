"""Random submap-packet generator shared by the protocol suites.

Packets are quantized on construction so roundtrips are field-exact.
"""

import numpy as np

from magsplat.comms import (
    MODE_CD,
    MODE_PCD,
    MODE_RD,
    PacketKeyframe,
    SubmapPacket,
    quantize_packet,
)
from magsplat.geometry import Pose
from magsplat.splatrender import GaussianCloud


def random_packet(rng, mode=None, max_kf=6, max_gaussians=50):
    if mode is None:
        mode = int(rng.integers(0, 3))
    n_kf = int(rng.integers(0, max_kf + 1))
    dim = int(rng.integers(1, 40)) if n_kf else 0
    kfs = []
    for _ in range(n_kf):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        kfs.append(
            PacketKeyframe(
                int(rng.integers(0, 10_000)),
                Pose(q, rng.uniform(-5, 5, 3)),
                rng.standard_normal(dim).astype(np.float32),
            )
        )
    n_g = int(rng.integers(0, max_gaussians + 1))
    quats = rng.standard_normal((n_g, 4))
    quats /= np.maximum(np.linalg.norm(quats, axis=1, keepdims=True), 1e-9)
    gaussians = GaussianCloud(
        rng.uniform(-4, 4, (n_g, 3)),
        quats,
        rng.uniform(-5, -1, (n_g, 3)),
        rng.uniform(0, 1, n_g),
        rng.uniform(0, 1, (n_g, 3)),
    )
    depth = cloud = None
    if mode == MODE_CD:
        h, w = int(rng.integers(2, 10)), int(rng.integers(2, 12))
        depth = rng.integers(0, 9000, (h, w)).astype(np.uint16)
    elif mode == MODE_PCD:
        cloud = rng.uniform(-4, 4, (int(rng.integers(0, 80)), 3))
    p = SubmapPacket(
        int(rng.integers(0, 100)),
        int(rng.integers(0, 20)),
        mode,
        kfs,
        gaussians,
        depth,
        cloud,
    )
    return quantize_packet(p)
