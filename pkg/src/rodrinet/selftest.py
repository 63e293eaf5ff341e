"""Embedded invariant suite behind the ``selftest`` CLI command.

A quick, self-contained mirror of the heavyweight test suite: gradient
checks against central finite differences, fused-vs-reference operator
equivalence, the IK round trip, classical-chain degeneracy, and a container
round trip. Each property reports pass/fail independently.
"""

import numpy as np

from . import autodiff as ad
from . import rodrigues_op as rop
from .container import container_bytes, parse_container
from .errors import IKDidNotConverge
from .gradcheck import check_gradients
from .kinematics import Configuration, bundled_robot, forward_kinematics, inverse_kinematics
from .rng import stream

GRAD_TOL = 1e-5


def _grad_primitives():
    worst = 0.0
    for seed in range(3):
        rng = stream(seed, "selftest-grad")
        x = ad.parameter(rng.uniform(-1, 1, (3, 4)))
        w = ad.parameter(rng.uniform(-1, 1, (5, 4)))
        b = ad.parameter(rng.uniform(-1, 1, (5,)))
        gamma = ad.parameter(rng.uniform(0.5, 1.5, (5,)))
        beta = ad.parameter(rng.uniform(-0.5, 0.5, (5,)))

        def make_loss(_):
            h = ad.layer_norm(ad.linear(ad.sin(x), w, b), gamma, beta)
            return ad.mul(ad.softmax(h), ad.relu(h)).sum()

        worst = max(worst, check_gradients(make_loss, [x, w, b, gamma, beta]))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def _grad_fused_op():
    worst = 0.0
    for seed in range(3):
        rng = stream(seed, "selftest-op-grad")
        kernel = rop.RodriguesKernel.random(rng, 2, 2, 2, trainable=True)
        feats = ad.parameter(rng.uniform(-1, 1, (2, 2, 4, 4)))
        theta = ad.parameter(rng.uniform(-np.pi, np.pi, (2, 2)))
        target = ad.constant(rng.uniform(-1, 1, (2, 2, 4, 4)))

        def make_loss(_):
            return ad.mse_loss(rop.rodrigues_multichannel(feats, theta, kernel, "fused"), target)

        worst = max(worst, check_gradients(make_loss, [feats, theta, *kernel.tensors()]))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def _fused_vs_reference():
    worst = {np.float64: 0.0, np.float32: 0.0}
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        for i, (ci, co, cj) in enumerate([(1, 2, 4), (4, 4, 4), (8, 8, 8)]):
            rng = stream(i, "selftest-grid")
            kernel = rop.RodriguesKernel.random(rng, ci, co, cj, dtype=dtype, trainable=False)
            feats = rng.uniform(-1, 1, (8, ci, 4, 4)).astype(dtype)
            theta = rng.uniform(-np.pi, np.pi, (8, cj)).astype(dtype)
            diff = np.max(
                np.abs(
                    rop.reference_forward(feats, theta, *kernel.arrays())
                    - rop.fused_forward(feats, theta, *kernel.arrays())
                )
            )
            worst[dtype] = max(worst[dtype], float(diff))
        if worst[dtype] > tol:
            return False, f"max abs diff {worst[dtype]:.2e} at {np.dtype(dtype).name}"
    return True, f"max abs diff single {worst[np.float32]:.2e} double {worst[np.float64]:.2e}"


def _ik_round_trip():
    tree = bundled_robot("ur5_arm")
    rng = stream(0, "selftest-ik")
    ee = tree.end_effector_index()
    failures, worst = 0, 0.0
    for _ in range(100):
        angles = rng.uniform(tree.limits_lo, tree.limits_hi)
        target = forward_kinematics(tree, Configuration.from_angles(angles))[ee]
        seed = np.clip(angles + rng.uniform(-0.1, 0.1, tree.dof), tree.limits_lo, tree.limits_hi)
        try:
            got = inverse_kinematics(tree, target, seed)
        except IKDidNotConverge:
            failures += 1
            continue
        pose = forward_kinematics(tree, Configuration.from_angles(got))[ee]
        worst = max(worst, float(np.linalg.norm(pose[:3, 3] - target[:3, 3])))
    ok = failures <= 1 and worst < 1e-6
    return ok, f"{failures}/100 failed to converge, worst position error {worst:.2e}"


def _degeneracy():
    worst = 0.0
    for name in ("ur5_arm", "leap_hand"):
        tree = bundled_robot(name)
        worst = max(worst, rop.degeneracy_max_deviation(tree, trials=50, seed=1))
        worst = max(worst, rop.degeneracy_max_deviation(tree, trials=50, seed=1, quat=True))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


def _container_round_trip():
    rng = stream(0, "selftest-container")
    arrays = [("a", rng.uniform(-1, 1, (3, 4)).astype(np.float32)), ("b", rng.uniform(-1, 1, 5))]
    blob = container_bytes("dataset", {"task": "fk", "dof": 1}, arrays)
    meta, got = parse_container(blob, expect_kind="dataset")
    ok = meta["task"] == "fk" and all(
        np.array_equal(got[name], arr) for name, arr in arrays
    )
    rebuilt = container_bytes("dataset", {"task": "fk", "dof": 1}, [(n, got[n]) for n, _ in arrays])
    return ok and rebuilt == blob, "round trip bit-identical" if ok else "mismatch"


PROPERTIES = [
    ("gradients_primitives", _grad_primitives),
    ("gradients_fused_operator", _grad_fused_op),
    ("fused_reference_equivalence", _fused_vs_reference),
    ("ik_round_trip", _ik_round_trip),
    ("classical_degeneracy", _degeneracy),
    ("container_round_trip", _container_round_trip),
]


def run_selftest():
    """[(property, ok, detail)] for every embedded invariant."""
    results = []
    for name, fn in PROPERTIES:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
