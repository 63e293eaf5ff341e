"""The learnable rotation-formula operator.

A joint transform expands into bias + cos + sin coefficient matrices; turning
those coefficients into weights gives a kinematics-shaped linear operator on
4x4 link features. The multi-channel form mixes input/output link channels
and joint-feature channels, with a conjugate weight set applied from the left.

Two evaluation routes exist on purpose and are tested against each other:

* ``reference``: materializes the per-(in, out) combination matrices U and
  Ubar, built from tape primitives, so its gradient comes for free.
* ``fused``: a custom op backed by the kernel backend (numba or the numpy
  fallback) that accumulates outputs directly without materializing U, with
  a hand-written VJP.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import se3
from ._accel import kernels
from .errors import InvalidShape, ShapeError
from .kinematics import classical_coefficients, forward_kinematics

QUAD_MONOMIALS = ("ww", "wi", "wj", "wk", "ii", "ij", "ik", "jj", "jk", "kk")


@dataclass
class RodriguesKernel:
    """Weight set (w_bias, w_cos, w_sin) plus the conjugate set for left
    multiplication. Fields are autodiff Tensors; shapes are
    (C_in, C_out, 4, 4) for biases and (C_in, C_out, C_joint, 4, 4) for the
    cos/sin weights."""

    w_bias: ad.Tensor
    w_cos: ad.Tensor
    w_sin: ad.Tensor
    w_bias_conj: ad.Tensor
    w_cos_conj: ad.Tensor
    w_sin_conj: ad.Tensor

    def __post_init__(self):
        ci, co = self.w_bias.shape[:2]
        cj = self.w_cos.shape[2] if self.w_cos.ndim == 5 else -1
        expect = {
            "w_bias": (ci, co, 4, 4),
            "w_cos": (ci, co, cj, 4, 4),
            "w_sin": (ci, co, cj, 4, 4),
            "w_bias_conj": (ci, co, 4, 4),
            "w_cos_conj": (ci, co, cj, 4, 4),
            "w_sin_conj": (ci, co, cj, 4, 4),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"kernel field {name} has shape {got}, expected {shape}")

    @property
    def c_in(self):
        return self.w_bias.shape[0]

    @property
    def c_out(self):
        return self.w_bias.shape[1]

    @property
    def c_joint(self):
        return self.w_cos.shape[2]

    def tensors(self):
        return (
            self.w_bias,
            self.w_cos,
            self.w_sin,
            self.w_bias_conj,
            self.w_cos_conj,
            self.w_sin_conj,
        )

    def arrays(self):
        return tuple(t.data for t in self.tensors())

    @classmethod
    def from_arrays(cls, wb, wc, ws, wbb, wcb, wsb, trainable=False):
        wrap = ad.parameter if trainable else ad.constant
        return cls(*(wrap(np.asarray(a)) for a in (wb, wc, ws, wbb, wcb, wsb)))

    @classmethod
    def random(cls, rng, c_in, c_out, c_joint, dtype=np.float64, trainable=True):
        """Fan-in-scaled uniform init; each output entry sums contributions
        from both multiplication sides, 4 inner entries, and 1 + 2*C_joint
        basis functions per input channel."""
        bound = 1.0 / np.sqrt(2.0 * 4.0 * c_in * (1.0 + 2.0 * c_joint))
        def draw(shape):
            return rng.uniform(-bound, bound, shape).astype(dtype)
        return cls.from_arrays(
            draw((c_in, c_out, 4, 4)),
            draw((c_in, c_out, c_joint, 4, 4)),
            draw((c_in, c_out, c_joint, 4, 4)),
            draw((c_in, c_out, 4, 4)),
            draw((c_in, c_out, c_joint, 4, 4)),
            draw((c_in, c_out, c_joint, 4, 4)),
            trainable=trainable,
        )


def init_from_classical(joint, c_in=1, c_out=1, c_joint=1) -> RodriguesKernel:
    """Single-channel kernel whose weights are the joint's classical
    coefficient matrices; the conjugate set is zero, so the operator
    reproduces the joint's forward-kinematics transform exactly."""
    if (c_in, c_out, c_joint) != (1, 1, 1):
        raise InvalidShape(
            f"classical initialization is single-channel only, got "
            f"({c_in}, {c_out}, {c_joint})"
        )
    a, b, c = classical_coefficients(joint)
    return RodriguesKernel.from_arrays(
        a[None, None],
        b[None, None, None],
        c[None, None, None],
        np.zeros((1, 1, 4, 4)),
        np.zeros((1, 1, 1, 4, 4)),
        np.zeros((1, 1, 1, 4, 4)),
    )


def rodrigues_single(f_in, theta, w_bias, w_cos, w_sin) -> np.ndarray:
    """Single-channel operator on plain arrays:
    f_in @ (w_bias + w_cos cos(theta) + w_sin sin(theta))."""
    return np.asarray(f_in) @ (
        np.asarray(w_bias) + np.asarray(w_cos) * np.cos(theta) + np.asarray(w_sin) * np.sin(theta)
    )


# --- array-level evaluators -------------------------------------------------


def reference_forward(feats, theta, wb, wc, ws, wbb, wcb, wsb) -> np.ndarray:
    """Reference evaluation on arrays: materializes U and Ubar.

    feats (N, C_in, 4, 4), theta (N, C_joint), single-joint weight layout.
    """
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = (
        wb[None]
        + np.einsum("nc,ijcab->nijab", cos_t, wc)
        + np.einsum("nc,ijcab->nijab", sin_t, ws)
    )
    ubar = (
        wbb[None]
        + np.einsum("nc,ijcab->nijab", cos_t, wcb)
        + np.einsum("nc,ijcab->nijab", sin_t, wsb)
    )
    return np.einsum("niab,nijbc->njac", feats, u) + np.einsum("nijab,nibc->njac", ubar, feats)


def fused_forward(feats, theta, wb, wc, ws, wbb, wcb, wsb) -> np.ndarray:
    """Fused evaluation on arrays (same contract as reference_forward)."""
    out = kernels.rodrigues_fwd(
        np.ascontiguousarray(feats)[:, None],
        np.ascontiguousarray(theta)[:, None],
        wb[None],
        wc[None],
        ws[None],
        wbb[None],
        wcb[None],
        wsb[None],
        np.zeros(1, dtype=np.int64),
    )
    return out[:, 0]


# --- tape-level ops ---------------------------------------------------------


def _layer_fwd(feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    return kernels.rodrigues_fwd(
        np.ascontiguousarray(feats),
        np.ascontiguousarray(theta),
        wb,
        wc,
        ws,
        wbb,
        wcb,
        wsb,
        parent,
    )


def _layer_vjp(grad, feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    grads = kernels.rodrigues_bwd(
        np.ascontiguousarray(grad),
        np.ascontiguousarray(feats),
        np.ascontiguousarray(theta),
        wb,
        wc,
        ws,
        wbb,
        wcb,
        wsb,
        parent,
    )
    return grads + (None,)


def _probe_arrays():
    shp = dict(n=1, links=1, ci=1, co=1, cj=1, dof=1)
    feats = np.zeros((shp["n"], shp["links"], shp["ci"], 4, 4))
    theta = np.zeros((shp["n"], shp["dof"], shp["cj"]))
    wb = np.zeros((shp["dof"], shp["ci"], shp["co"], 4, 4))
    wc = np.zeros((shp["dof"], shp["ci"], shp["co"], shp["cj"], 4, 4))
    return (feats, theta, wb, wc, wc.copy(), wb.copy(), wc.copy(), wc.copy(), np.zeros(1, np.int64))


fused_layer_op = ad.custom_op("rodrigues_fused", _layer_fwd, _layer_vjp, _probe_arrays())
"""Stacked-joint fused operator: feats (N, L, C_in, 4, 4), theta
(N, D, C_joint), weights with a leading joint axis, plus the per-joint parent
link indices; returns per-joint child features (N, D, C_out, 4, 4)."""


def _reference_combination(theta, wb, wc, ws):
    cos_t, sin_t = ad.cos(theta), ad.sin(theta)
    u = ad.add(
        ad.einsum("nc,ijcab->nijab", cos_t, wc), ad.einsum("nc,ijcab->nijab", sin_t, ws)
    )
    return ad.add(u, wb)


def rodrigues_multichannel(f_in: ad.Tensor, theta: ad.Tensor, kernel: RodriguesKernel, mode="fused"):
    """Multi-channel operator on tape tensors.

    f_in is (N, C_in, 4, 4) or unbatched (C_in, 4, 4); theta is (N, C_joint)
    or (C_joint,). Returns matching (N, C_out, 4, 4) or (C_out, 4, 4).
    """
    unbatched = f_in.ndim == 3
    if unbatched:
        f_in = ad.reshape(f_in, (1,) + f_in.shape)
        theta = ad.reshape(theta, (1,) + theta.shape)
    if f_in.ndim != 4 or f_in.shape[2:] != (4, 4):
        raise ShapeError(f"expected link features (N, C_in, 4, 4), got {f_in.shape}")
    if f_in.shape[1] != kernel.c_in:
        raise ShapeError(
            f"link features have {f_in.shape[1]} channels, kernel expects {kernel.c_in}"
        )
    if theta.shape != (f_in.shape[0], kernel.c_joint):
        raise ShapeError(
            f"joint features {theta.shape} do not match batch {f_in.shape[0]} "
            f"and kernel channels {kernel.c_joint}"
        )
    if mode == "reference":
        u = _reference_combination(theta, kernel.w_bias, kernel.w_cos, kernel.w_sin)
        ubar = _reference_combination(
            theta, kernel.w_bias_conj, kernel.w_cos_conj, kernel.w_sin_conj
        )
        out = ad.add(
            ad.einsum("niab,nijbc->njac", f_in, u),
            ad.einsum("nijab,nibc->njac", ubar, f_in),
        )
    elif mode == "fused":
        n = f_in.shape[0]
        stacked = fused_layer_op(
            ad.reshape(f_in, (n, 1) + f_in.shape[1:]),
            ad.reshape(theta, (n, 1, kernel.c_joint)),
            *(ad.reshape(t, (1,) + t.shape) for t in kernel.tensors()),
            ad.constant(np.zeros(1, dtype=np.int64)),
        )
        out = ad.reshape(stacked, (n, kernel.c_out, 4, 4))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


# --- quaternion form --------------------------------------------------------


@dataclass
class QuatRodriguesKernel:
    """Quaternion-configured operator weights on plain arrays: a bias, one
    4x4 weight per linear monomial (w, i, j, k), and one per quadratic
    monomial in QUAD_MONOMIALS order, plus the conjugate set."""

    w_bias: np.ndarray  # (C_in, C_out, 4, 4)
    w_lin: np.ndarray  # (C_in, C_out, 4, 4, 4)
    w_quad: np.ndarray  # (C_in, C_out, 10, 4, 4)
    w_bias_conj: np.ndarray
    w_lin_conj: np.ndarray
    w_quad_conj: np.ndarray

    def __post_init__(self):
        ci, co = self.w_bias.shape[:2]
        expect = {
            "w_bias": (ci, co, 4, 4),
            "w_lin": (ci, co, 4, 4, 4),
            "w_quad": (ci, co, 10, 4, 4),
            "w_bias_conj": (ci, co, 4, 4),
            "w_lin_conj": (ci, co, 4, 4, 4),
            "w_quad_conj": (ci, co, 10, 4, 4),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"kernel field {name} has shape {got}, expected {shape}")

    @property
    def c_in(self):
        return self.w_bias.shape[0]

    @property
    def c_out(self):
        return self.w_bias.shape[1]


_QUAD_BLOCKS = {
    "ww": np.zeros((3, 3)),
    "wi": np.array([[0.0, 0, 0], [0, 0, -2], [0, 2, 0]]),
    "wj": np.array([[0.0, 0, 2], [0, 0, 0], [-2, 0, 0]]),
    "wk": np.array([[0.0, -2, 0], [2, 0, 0], [0, 0, 0]]),
    "ii": np.diag([0.0, -2, -2]),
    "ij": np.array([[0.0, 2, 0], [2, 0, 0], [0, 0, 0]]),
    "ik": np.array([[0.0, 0, 2], [0, 0, 0], [2, 0, 0]]),
    "jj": np.diag([-2.0, 0, -2]),
    "jk": np.array([[0.0, 0, 0], [0, 0, 2], [0, 2, 0]]),
    "kk": np.diag([-2.0, -2, 0]),
}


def quat_classical_kernel(joint) -> QuatRodriguesKernel:
    """Single-channel kernel reproducing origin @ homog(quat_to_matrix(q)).

    The rotation matrix is quadratic in the quaternion entries with a
    constant part I, so the bias carries the full joint origin and the
    quadratic weights carry the origin times each monomial's coefficient
    block; linear weights and conjugates are zero.
    """
    quad = np.zeros((1, 1, 10, 4, 4))
    for m, name in enumerate(QUAD_MONOMIALS):
        embed = np.zeros((4, 4))
        embed[:3, :3] = _QUAD_BLOCKS[name]
        quad[0, 0, m] = joint.origin @ embed
    return QuatRodriguesKernel(
        joint.origin[None, None].copy(),
        np.zeros((1, 1, 4, 4, 4)),
        quad,
        np.zeros((1, 1, 4, 4)),
        np.zeros((1, 1, 4, 4, 4)),
        np.zeros((1, 1, 10, 4, 4)),
    )


def quat_monomials(q: np.ndarray):
    """Linear (N, 4) and quadratic (N, 10) monomials of quaternion batches."""
    q = np.atleast_2d(np.asarray(q))
    w, i, j, k = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    quad = np.stack(
        [w * w, w * i, w * j, w * k, i * i, i * j, i * k, j * j, j * k, k * k], axis=1
    )
    return q, quad


def rodrigues_quaternion(feats, q, kernel: QuatRodriguesKernel) -> np.ndarray:
    """Quaternion-form operator on arrays.

    feats (N, C_in, 4, 4) or (C_in, 4, 4); q (N, 4) or (4,).
    """
    feats = np.asarray(feats)
    unbatched = feats.ndim == 3
    if unbatched:
        feats = feats[None]
    if feats.shape[1] != kernel.c_in:
        raise ShapeError(
            f"link features have {feats.shape[1]} channels, kernel expects {kernel.c_in}"
        )
    lin, quad = quat_monomials(q)
    if lin.shape[0] != feats.shape[0]:
        raise ShapeError(f"feature batch {feats.shape[0]} != quaternion batch {lin.shape[0]}")

    def combine(bias, w_lin, w_quad):
        return (
            bias[None]
            + np.einsum("nm,ijmab->nijab", lin, w_lin)
            + np.einsum("nm,ijmab->nijab", quad, w_quad)
        )

    u = combine(kernel.w_bias, kernel.w_lin, kernel.w_quad)
    ubar = combine(kernel.w_bias_conj, kernel.w_lin_conj, kernel.w_quad_conj)
    out = np.einsum("niab,nijbc->njac", feats, u) + np.einsum("nijab,nibc->njac", ubar, feats)
    return out[0] if unbatched else out


# --- degeneracy check -------------------------------------------------------


def degeneracy_max_deviation(tree, trials: int, seed: int, quat: bool = False) -> float:
    """Max per-entry deviation between the classically-initialized
    single-channel operator chain and forward kinematics over random
    in-limit configurations (random root pose for free-floating trees)."""
    from .kinematics import Configuration
    from .rng import stream

    rng = stream(seed, "degeneracy-quat" if quat else "degeneracy")
    if quat:
        kernels_per_joint = [quat_classical_kernel(j) for j in tree.joints]
    else:
        kernels_per_joint = [init_from_classical(j).arrays() for j in tree.joints]
    worst = 0.0
    for _ in range(trials):
        angles = rng.uniform(tree.limits_lo, tree.limits_hi)
        if tree.free_floating:
            root = se3.make_pose(se3.sample_rotation_uniform(rng), rng.uniform(-0.5, 0.5, 3))
        else:
            root = np.eye(4)
        expected = forward_kinematics(tree, Configuration(root, angles))
        feats = np.zeros((tree.num_links, 1, 4, 4))
        feats[0, 0] = root
        for j, joint in enumerate(tree.joints):
            parent_feat = feats[joint.parent_index][None]
            if quat:
                half = angles[j] / 2.0
                q = np.concatenate([[np.cos(half)], np.sin(half) * joint.axis])
                child = rodrigues_quaternion(parent_feat, q[None], kernels_per_joint[j])
            else:
                child = fused_forward(
                    parent_feat, np.array([[angles[j]]]), *kernels_per_joint[j]
                )
            feats[joint.child_index] = child[0]
        worst = max(worst, float(np.max(np.abs(feats[:, 0] - expected))))
    return worst


# --- benchmark ----------------------------------------------------------------


def bench_operator(configs, repetitions: int = 20, warmup: int = 3, dtype=np.float32):
    """Median forward time per call, reference vs fused, for each
    (batch, c_in, c_out, c_joint) configuration. Returns one row per config:
    {batch, c_in, c_out, c_joint, reference_ns, fused_ns, speedup}."""
    from .rng import stream

    rows = []
    for batch, c_in, c_out, c_joint in configs:
        rng = stream(0, f"bench-{batch}-{c_in}-{c_out}-{c_joint}")
        kernel = RodriguesKernel.random(rng, c_in, c_out, c_joint, dtype=dtype, trainable=False)
        arrays = kernel.arrays()
        feats = rng.uniform(-1, 1, (batch, c_in, 4, 4)).astype(dtype)
        theta = rng.uniform(-np.pi, np.pi, (batch, c_joint)).astype(dtype)

        def run_reference():
            return reference_forward(feats, theta, *arrays)

        def run_fused():
            return fused_forward(feats, theta, *arrays)

        ref_out, fused_out = run_reference(), run_fused()
        agreement = float(np.max(np.abs(ref_out - fused_out)))
        times = {}
        for name, fn in (("reference", run_reference), ("fused", run_fused)):
            for _ in range(warmup):
                fn()
            samples = []
            for _ in range(repetitions):
                start = time.perf_counter_ns()
                fn()
                samples.append(time.perf_counter_ns() - start)
            times[name] = float(np.median(samples))
        rows.append(
            {
                "batch": batch,
                "c_in": c_in,
                "c_out": c_out,
                "c_joint": c_joint,
                "reference_ns": times["reference"],
                "fused_ns": times["fused"],
                "speedup": times["reference"] / max(times["fused"], 1.0),
                "max_abs_diff": agreement,
            }
        )
    return rows


DEFAULT_BENCH_GRID = [
    (32, 4, 4, 4),
    (64, 8, 8, 8),
    (256, 16, 16, 16),
    (1024, 16, 16, 16),
]
