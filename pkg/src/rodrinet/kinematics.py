"""Kinematic trees: description parsing, forward kinematics, classical
coefficient extraction, Jacobians, and damped-least-squares inverse
kinematics.

Robot descriptions are JSON documents::

    {
      "name": "arm",
      "root_mode": "fixed" | "free_floating",
      "links": ["base", "upper", ...],
      "joints": [
        {"id": "j1", "parent": "base", "child": "upper",
         "origin_translation": [x, y, z],          # meters
         "origin_rpy": [roll, pitch, yaw],          # radians, Rz*Ry*Rx
         "axis": [x, y, z],                         # unit vector
         "limits": [lo, hi]},                       # radians
        ...
      ]
    }

Two descriptions ship with the package: a 6-DoF arm with restricted joint
ranges ("ur5_arm") and a 16-joint, 17-link four-finger hand ("leap_hand").
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import se3
from ._accel import kernels
from .errors import ConfigError, IKDidNotConverge, InvalidAxis, InvalidTopology, SchemaError

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str
    child: str
    origin: np.ndarray  # 4x4 fixed transform, parent frame -> joint frame
    axis: np.ndarray  # unit rotation axis in the joint frame
    limits: tuple
    parent_index: int = -1
    child_index: int = -1


@dataclass
class KinematicTree:
    name: str
    root_mode: str
    links: list
    joints: list  # topologically ordered: parent link index < child link index
    joint_origins: np.ndarray = field(repr=False, default=None)  # (D, 4, 4)
    joint_axes: np.ndarray = field(repr=False, default=None)  # (D, 3)
    joint_parent: np.ndarray = field(repr=False, default=None)  # (D,) link indices
    joint_child: np.ndarray = field(repr=False, default=None)  # (D,) link indices
    limits_lo: np.ndarray = field(repr=False, default=None)
    limits_hi: np.ndarray = field(repr=False, default=None)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def free_floating(self) -> bool:
        return self.root_mode == "free_floating"

    def link_index(self, link_id: str) -> int:
        try:
            return self.links.index(link_id)
        except ValueError:
            raise SchemaError(f"unknown link id {link_id!r}") from None

    def leaf_indices(self) -> list:
        parents = set(self.joint_parent.tolist())
        return [i for i in range(self.num_links) if i not in parents]

    def end_effector_index(self) -> int:
        leaves = self.leaf_indices()
        if len(leaves) != 1:
            raise ConfigError(
                f"tree {self.name!r} has {len(leaves)} leaf links; an unambiguous "
                "end effector requires exactly one"
            )
        return leaves[0]

    def path_joints(self, link_index: int) -> np.ndarray:
        """Boolean mask of joints on the root -> link chain."""
        child_of = {int(c): j for j, c in enumerate(self.joint_child)}
        mask = np.zeros(self.dof, dtype=bool)
        cur = link_index
        while cur != 0:
            j = child_of[cur]
            mask[j] = True
            cur = int(self.joint_parent[j])
        return mask


@dataclass
class Configuration:
    root_pose: np.ndarray  # 4x4; identity for fixed-base trees
    joint_angles: np.ndarray  # (D,) radians

    @classmethod
    def from_angles(cls, angles) -> "Configuration":
        return cls(np.eye(4), np.asarray(angles, dtype=np.float64))


def parse_robot(text: str) -> KinematicTree:
    """Parse and validate a robot description document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"robot description is not valid JSON: {exc}") from None
    for key in ("name", "root_mode", "links", "joints"):
        if key not in doc:
            raise SchemaError(f"missing required field {key!r}")
    if doc["root_mode"] not in ("fixed", "free_floating"):
        raise SchemaError(f"root_mode must be 'fixed' or 'free_floating', got {doc['root_mode']!r}")
    links = list(doc["links"])
    if len(set(links)) != len(links):
        raise SchemaError("duplicate link ids")

    joints = []
    for rec in doc["joints"]:
        for key in ("id", "parent", "child", "origin_translation", "origin_rpy", "axis", "limits"):
            if key not in rec:
                raise SchemaError(f"joint {rec.get('id', '?')!r} missing field {key!r}")
        for key in ("parent", "child"):
            if rec[key] not in links:
                raise SchemaError(f"joint {rec['id']!r} references unknown link {rec[key]!r}")
        axis = np.asarray(rec["axis"], dtype=np.float64)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > _UNIT_TOL:
            raise InvalidAxis(f"joint {rec['id']!r} axis has norm {norm}, expected 1")
        lo, hi = float(rec["limits"][0]), float(rec["limits"][1])
        if lo > hi:
            raise SchemaError(f"joint {rec['id']!r} limits are reversed: [{lo}, {hi}]")
        roll, pitch, yaw = (float(v) for v in rec["origin_rpy"])
        origin = se3.make_pose(
            se3.rpy_to_matrix(roll, pitch, yaw),
            np.asarray(rec["origin_translation"], dtype=np.float64),
        )
        joints.append(
            Joint(rec["id"], rec["parent"], rec["child"], origin, axis / norm, (lo, hi))
        )

    children = [j.child for j in joints]
    if len(set(children)) != len(children):
        raise InvalidTopology("a link has more than one parent joint")
    roots = [l for l in links if l not in children]
    if len(roots) != 1:
        raise InvalidTopology(f"expected exactly one root link, found {roots}")

    # Breadth-first order from the root; anything unreachable sits on a cycle
    # or a disconnected island.
    order = [roots[0]]
    remaining = list(joints)
    ordered_joints = []
    while remaining:
        progressed = False
        for j in list(remaining):
            if j.parent in order:
                order.append(j.child)
                ordered_joints.append(j)
                remaining.remove(j)
                progressed = True
        if not progressed:
            raise InvalidTopology(
                f"links {[j.child for j in remaining]} are not reachable from the root"
            )

    idx = {name: i for i, name in enumerate(order)}
    ordered_joints = [
        Joint(j.name, j.parent, j.child, j.origin, j.axis, j.limits, idx[j.parent], idx[j.child])
        for j in ordered_joints
    ]
    tree = KinematicTree(str(doc["name"]), doc["root_mode"], order, ordered_joints)
    tree.joint_origins = np.stack([j.origin for j in ordered_joints]) if ordered_joints else np.zeros((0, 4, 4))
    tree.joint_axes = np.stack([j.axis for j in ordered_joints]) if ordered_joints else np.zeros((0, 3))
    tree.joint_parent = np.array([j.parent_index for j in ordered_joints], dtype=np.int64)
    tree.joint_child = np.array([j.child_index for j in ordered_joints], dtype=np.int64)
    tree.limits_lo = np.array([j.limits[0] for j in ordered_joints])
    tree.limits_hi = np.array([j.limits[1] for j in ordered_joints])
    return tree


def load_robot(path) -> KinematicTree:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_robot(fh.read())


def bundled_robot_names() -> list:
    return ["ur5_arm", "leap_hand", "serial6"]


def bundled_robot_text(name: str) -> str:
    if name not in bundled_robot_names():
        raise SchemaError(f"no bundled robot named {name!r}; choose from {bundled_robot_names()}")
    return resources.files("rodrinet.robots").joinpath(f"{name}.json").read_text("utf-8")


def bundled_robot(name: str) -> KinematicTree:
    return parse_robot(bundled_robot_text(name))


def forward_kinematics(tree: KinematicTree, cfg: Configuration) -> np.ndarray:
    """Poses of all links, shape (num_links, 4, 4), root first."""
    angles = np.asarray(cfg.joint_angles, dtype=np.float64)
    if angles.shape != (tree.dof,):
        raise ConfigError(f"expected {tree.dof} joint angles, got shape {angles.shape}")
    return fk_batch(tree, cfg.root_pose[None], angles[None])[0]


def fk_batch(tree: KinematicTree, root_poses, joint_angles) -> np.ndarray:
    """Batched forward kinematics, shape (n, num_links, 4, 4).

    root_poses may be None for fixed-base use (identity), a single 4x4 pose,
    or a batch of (n, 4, 4).
    """
    thetas = np.ascontiguousarray(joint_angles)
    n = thetas.shape[0]
    if root_poses is None:
        root = np.broadcast_to(np.eye(4, dtype=thetas.dtype), (n, 4, 4))
    else:
        root = np.broadcast_to(np.asarray(root_poses, dtype=thetas.dtype), (n, 4, 4))
    return kernels.fk_batch(
        tree.joint_origins,
        tree.joint_axes,
        tree.joint_parent,
        tree.joint_child,
        np.ascontiguousarray(root),
        thetas,
    )


def _embed(block: np.ndarray, corner: float) -> np.ndarray:
    out = np.zeros((4, 4))
    out[:3, :3] = block
    out[3, 3] = corner
    return out


def classical_coefficients(joint: Joint):
    """(A, B, C) with A + B cos(t) + C sin(t) == origin @ homog(R(axis, t)).

    Expanding the rotation formula inside the joint transform: the constant
    part is I + [w]^2 (which also carries the homogeneous corner and hence the
    origin's translation), the cos part is -[w]^2, and the sin part is [w].
    """
    k = se3.skew(joint.axis)
    k2 = k @ k
    a = joint.origin @ _embed(np.eye(3) + k2, 1.0)
    b = joint.origin @ _embed(-k2, 0.0)
    c = joint.origin @ _embed(k, 0.0)
    return a, b, c


def geometric_jacobian(tree: KinematicTree, cfg: Configuration, target_link_id) -> np.ndarray:
    """World-frame 6 x D Jacobian of the target link: rows 0-2 linear (m/rad),
    rows 3-5 angular (rad/rad). Joints off the root->target path give zero
    columns."""
    target = target_link_id if isinstance(target_link_id, int) else tree.link_index(target_link_id)
    poses = forward_kinematics(tree, cfg)
    on_path = tree.path_joints(target)
    jac = np.zeros((6, tree.dof))
    p_target = poses[target][:3, 3]
    for j in range(tree.dof):
        if not on_path[j]:
            continue
        joint_pose = poses[tree.joint_parent[j]] @ tree.joint_origins[j]
        axis_w = joint_pose[:3, :3] @ tree.joint_axes[j]
        jac[:3, j] = np.cross(axis_w, p_target - joint_pose[:3, 3])
        jac[3:, j] = axis_w
    return jac


def inverse_kinematics(
    tree: KinematicTree,
    target: np.ndarray,
    seed,
    limits_on: bool = True,
    damping: float = 1e-3,
    tol: float = 1e-9,
    max_iters: int = 200,
) -> np.ndarray:
    """Damped-least-squares IK for the end-effector link of a fixed-base tree.

    Iterates theta += (J^T J + damping^2 I)^-1 J^T e with the twist error
    e = [position difference; axis-angle of the relative rotation], clamping
    to joint limits when limits_on. Raises IKDidNotConverge if the residual
    norm stays above tol after max_iters iterations.
    """
    ee = tree.end_effector_index()
    theta, resid, iters, ok = kernels.ik_solve(
        tree.joint_origins,
        tree.joint_axes,
        tree.joint_parent,
        tree.joint_child,
        tree.limits_lo,
        tree.limits_hi,
        np.ascontiguousarray(target, dtype=np.float64),
        np.ascontiguousarray(seed, dtype=np.float64),
        ee,
        tree.path_joints(ee),
        limits_on,
        damping,
        tol,
        max_iters,
    )
    if not ok:
        raise IKDidNotConverge(resid, iters)
    return theta
