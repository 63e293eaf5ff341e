"""Synthetic dataset generation for the two in-scope experiments.

Forward-kinematics fitting: inputs are the flattened root pose (free-floating
trees) plus joint angles, targets are every link's translation and rotation
entries. Motion prediction: a straight-line/slerp end-effector trajectory of
16 frames is converted to joint space by per-frame IK seeded from the
previous frame; the first 8 frames are the input, the last 8 the target.

Sampling is driven by per-sample Philox streams keyed by (seed, purpose,
sample index), so output is bit-reproducible and independent of how samples
are batched across workers.
"""

import numpy as np

from . import se3
from .container import read_container, write_container
from .errors import ConfigError, IKDidNotConverge, RejectionBudgetExceeded
from .kinematics import fk_batch, inverse_kinematics
from .rng import stream

FRAMES_TOTAL = 16
FRAMES_IN = 8
REJECTION_BUDGET = 100
ROOT_TRANSLATION_RANGE = 0.05  # meters
_POSE_TOL = 1e-6


def fk_input_dim(tree) -> int:
    return (12 if tree.free_floating else 0) + tree.dof


def sample_fk_batch(tree, n: int, rng, dtype=np.float32):
    """(inputs, targets) arrays for forward-kinematics fitting.

    Inputs: root translation uniform in [-0.05, 0.05]^3 m, rotation uniform
    over rotations, angles uniform within limits (fixed-base trees omit the
    root pose). Targets: per-link translation then row-major rotation.
    Poses are computed in double precision and stored in ``dtype``.
    """
    dof, nlinks = tree.dof, tree.num_links
    angles = rng.uniform(tree.limits_lo, tree.limits_hi, (n, dof))
    if tree.free_floating:
        trans = rng.uniform(-ROOT_TRANSLATION_RANGE, ROOT_TRANSLATION_RANGE, (n, 3))
        rots = se3.sample_rotations_uniform(rng, n)
        roots = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        roots[:, :3, :3] = rots
        roots[:, :3, 3] = trans
        inputs = np.concatenate([trans, rots.reshape(n, 9), angles], axis=1)
    else:
        roots = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        inputs = angles
    poses = fk_batch(tree, roots, angles)
    targets = np.concatenate(
        [poses[:, :, :3, 3], poses[:, :, :3, :3].reshape(n, nlinks, 9)], axis=2
    )
    return inputs.astype(dtype), targets.reshape(n, nlinks * 12).astype(dtype)


def fk_targets_to_poses(targets: np.ndarray, nlinks: int) -> np.ndarray:
    """Inverse of the target layout: (n, L*12) -> (n, L, 4, 4)."""
    n = targets.shape[0]
    flat = targets.reshape(n, nlinks, 12).astype(np.float64)
    poses = np.broadcast_to(np.eye(4), (n, nlinks, 4, 4)).copy()
    poses[:, :, :3, 3] = flat[:, :, :3]
    poses[:, :, :3, :3] = flat[:, :, 3:].reshape(n, nlinks, 3, 3)
    return poses


def generate_motion_trajectory(tree, rng) -> np.ndarray:
    """One 16-frame joint trajectory (16, D) following a straight-line,
    slerp-interpolated end-effector path. Endpoint frames are the sampled
    configurations themselves; intermediate frames are solved by IK seeded
    from the previous frame. A trajectory is rejected and resampled whenever
    any frame fails IK, exits the limits, or misses the interpolated pose;
    more than REJECTION_BUDGET consecutive rejections aborts."""
    if tree.free_floating:
        raise ConfigError("motion trajectories require a fixed-base tree")
    ee = tree.end_effector_index()
    for _ in range(REJECTION_BUDGET):
        start = rng.uniform(tree.limits_lo, tree.limits_hi)
        end = rng.uniform(tree.limits_lo, tree.limits_hi)
        endpoint_poses = fk_batch(tree, None, np.stack([start, end]))[:, ee]
        frames = np.empty((FRAMES_TOTAL, tree.dof))
        frames[0], frames[-1] = start, end
        ok = True
        for k in range(1, FRAMES_TOTAL - 1):
            target = se3.interpolate_pose(
                endpoint_poses[0], endpoint_poses[1], k / (FRAMES_TOTAL - 1)
            )
            try:
                theta = inverse_kinematics(tree, target, frames[k - 1])
            except IKDidNotConverge:
                ok = False
                break
            if np.any(theta < tree.limits_lo) or np.any(theta > tree.limits_hi):
                ok = False
                break
            pose = fk_batch(tree, None, theta[None])[0, ee]
            if (
                np.linalg.norm(pose[:3, 3] - target[:3, 3]) > _POSE_TOL
                or se3.geodesic_angle(pose[:3, :3], target[:3, :3]) > _POSE_TOL
            ):
                ok = False
                break
            frames[k] = theta
        if ok:
            return frames
    raise RejectionBudgetExceeded(
        f"{REJECTION_BUDGET} consecutive trajectory rejections; "
        "the robot description likely breaks the unique-IK assumption"
    )


def generate_motion_dataset(tree, n: int, seed: int, dtype=np.float32):
    """(inputs (n, 8, D), targets (n, 8, D)) from per-sample streams."""
    inputs = np.empty((n, FRAMES_IN, tree.dof), dtype=dtype)
    targets = np.empty((n, FRAMES_TOTAL - FRAMES_IN, tree.dof), dtype=dtype)
    for i in range(n):
        frames = generate_motion_trajectory(tree, stream(seed, "motion-traj", i))
        inputs[i] = frames[:FRAMES_IN]
        targets[i] = frames[FRAMES_IN:]
    return inputs, targets


def generate_fk_dataset(tree, n: int, seed: int, dtype=np.float32):
    return sample_fk_batch(tree, n, stream(seed, "fk-data"), dtype)


def dataset_metadata(task: str, tree, robot_text: str, seed: int, n: int) -> dict:
    meta = {
        "task": task,
        "dof": tree.dof,
        "num_links": tree.num_links,
        "robot_name": tree.name,
        "robot_description": robot_text,
        "generator_seed": seed,
        "num_samples": n,
        "precision": "single",
        "generator_precision": "double",
    }
    if task == "motion":
        meta["frames_in"] = FRAMES_IN
        meta["frames_out"] = FRAMES_TOTAL - FRAMES_IN
    return meta


def write_dataset(path, task, tree, robot_text, seed, inputs, targets) -> None:
    meta = dataset_metadata(task, tree, robot_text, seed, inputs.shape[0])
    write_container(path, "dataset", meta, [("inputs", inputs), ("targets", targets)])


def read_dataset(path):
    """(metadata, inputs, targets) for a dataset container."""
    meta, arrays = read_container(path, expect_kind="dataset")
    return meta, arrays["inputs"], arrays["targets"]
