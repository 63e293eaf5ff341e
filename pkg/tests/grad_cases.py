"""Gradient-check case table shared by the autodiff tests and the
acceptance suite: one loss builder per primitive."""

import numpy as np

from rodrinet import autodiff as ad


def param(rng, *shape):
    return ad.parameter(rng.uniform(-1.0, 1.0, shape))


PRIMITIVE_CASES = {
    "add": lambda rng: (
        lambda ps: ad.add(ps[0], ps[1]).sum(),
        [param(rng, 3, 4), param(rng, 3, 4)],
    ),
    "add_broadcast": lambda rng: (
        lambda ps: ad.add(ps[0], ps[1]).sum(),
        [param(rng, 3, 4), param(rng, 4)],
    ),
    "sub": lambda rng: (
        lambda ps: ad.mul(ad.sub(ps[0], ps[1]), ad.sub(ps[0], ps[1])).sum(),
        [param(rng, 2, 5), param(rng, 2, 5)],
    ),
    "mul_broadcast": lambda rng: (
        lambda ps: ad.mul(ps[0], ps[1]).sum(),
        [param(rng, 2, 3, 4), param(rng, 1, 4)],
    ),
    "scale": lambda rng: (lambda ps: ad.scale(ps[0], 2.5).sum(), [param(rng, 4, 4)]),
    "matmul": lambda rng: (
        lambda ps: ad.matmul(ps[0], ps[1]).sum(),
        [param(rng, 3, 4), param(rng, 4, 2)],
    ),
    "batched_matmul": lambda rng: (
        lambda ps: ad.matmul(ps[0], ps[1]).sum(),
        [param(rng, 5, 3, 4), param(rng, 5, 4, 2)],
    ),
    "batched_matmul_broadcast": lambda rng: (
        lambda ps: ad.matmul(ps[0], ps[1]).sum(),
        [param(rng, 5, 3, 4), param(rng, 4, 2)],
    ),
    "einsum": lambda rng: (
        lambda ps: ad.einsum("nab,abc->nc", ps[0], ps[1]).sum(),
        [param(rng, 3, 2, 4), param(rng, 2, 4, 5)],
    ),
    "sum_axis": lambda rng: (lambda ps: ad.mul(ps[0].sum(axis=1), ps[0].sum(axis=1)).sum(), [param(rng, 3, 4)]),
    "mean_axis": lambda rng: (
        lambda ps: ad.mul(ps[0].mean(axis=0), ps[0].mean(axis=0)).sum(),
        [param(rng, 3, 4)],
    ),
    "reshape": lambda rng: (
        lambda ps: ad.mul(ps[0].reshape(6, 2), ps[0].reshape(6, 2)).sum(),
        [param(rng, 3, 4)],
    ),
    "transpose": lambda rng: (
        lambda ps: ad.matmul(ad.transpose(ps[0], (1, 0)), ps[0]).sum(),
        [param(rng, 3, 4)],
    ),
    "broadcast_to": lambda rng: (
        lambda ps: ad.mul(ad.broadcast_to(ps[0], (5, 3)), ad.broadcast_to(ps[0], (5, 3))).sum(),
        [param(rng, 3)],
    ),
    "concat": lambda rng: (
        lambda ps: ad.mul(ad.concat(ps, axis=1), ad.concat(ps, axis=1)).sum(),
        [param(rng, 2, 3), param(rng, 2, 4)],
    ),
    "slice": lambda rng: (
        lambda ps: ad.mul(ps[0][:, 1:3], ps[0][:, 1:3]).sum(),
        [param(rng, 4, 5)],
    ),
    "relu": lambda rng: (
        lambda ps: ad.relu(ps[0]).sum(),
        [ad.parameter(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))],
    ),
    "sin": lambda rng: (lambda ps: ad.mul(ad.sin(ps[0]), ad.sin(ps[0])).sum(), [param(rng, 3, 3)]),
    "cos": lambda rng: (lambda ps: ad.mul(ad.cos(ps[0]), ad.cos(ps[0])).sum(), [param(rng, 3, 3)]),
    "linear": lambda rng: (
        lambda ps: ad.mul(ad.linear(ps[0], ps[1], ps[2]), ad.linear(ps[0], ps[1], ps[2])).sum(),
        [param(rng, 4, 6), param(rng, 3, 6), param(rng, 3)],
    ),
    "layer_norm": lambda rng: (
        lambda ps: ad.mul(
            ad.layer_norm(ps[0], ps[1], ps[2], n_axes=1),
            ad.layer_norm(ps[0], ps[1], ps[2], n_axes=1),
        ).sum(),
        [param(rng, 4, 6), param(rng, 6), param(rng, 6)],
    ),
    "layer_norm_grouped": lambda rng: (
        lambda ps: ad.layer_norm(ps[0], ps[1], ps[2], n_axes=2).sum(),
        [param(rng, 3, 2, 4), param(rng, 2, 4), param(rng, 2, 4)],
    ),
    "layer_norm_per_row_affine": lambda rng: (
        lambda ps: ad.mul(
            ad.layer_norm(ps[0], ps[1], ps[2], n_axes=1),
            ad.layer_norm(ps[0], ps[1], ps[2], n_axes=1),
        ).sum(),
        [param(rng, 3, 5, 4), param(rng, 5, 4), param(rng, 5, 4)],
    ),
    "softmax": lambda rng: (
        lambda ps: ad.mul(ad.softmax(ps[0]), ad.softmax(ps[0])).sum(),
        [param(rng, 3, 5)],
    ),
    "attention": lambda rng: (
        lambda ps: ad.mul(
            ad.multi_head_attention(ps[0], *ps[1:], num_heads=2),
            ad.multi_head_attention(ps[0], *ps[1:], num_heads=2),
        ).sum(),
        [
            param(rng, 2, 3, 6),
            param(rng, 4, 6),
            param(rng, 4),
            param(rng, 4, 6),
            param(rng, 4, 6),
            param(rng, 4),
            param(rng, 6, 4),
            param(rng, 6),
        ],
    ),
    "mse_loss": lambda rng: (
        lambda ps: ad.mse_loss(ps[0], ps[1]),
        [param(rng, 4, 3), param(rng, 4, 3)],
    ),
}
