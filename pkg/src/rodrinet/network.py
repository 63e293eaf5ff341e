"""Network layers and full models for articulated-action learning.

The feature state flowing through a block is a FeatureGraph: per-link
features (N, L, C_L, 4, 4), per-joint features (N, D, C_J), and an optional
global token (N, C_G). A block applies, in order and subject to the enabled
toggles, a link-update layer built on the multi-channel operator, a
link-to-joint layer, and a self-attention layer over all links (plus the
global token when present).

Parameter counts per layer (D joints, L = D + 1 links, dm = 16 * C_L):

* link update: D * 2 * 16 * C_L^2 * (1 + 2 C_J) kernel weights
  + 2 * L * dm per-link norm affines
* joint update: D * (dm * C_J + C_J)
* attention:   (3 dm + 2) * d_attn + d_attn * dm + dm + 2 * L * dm
  (q/v projections carry biases, k does not)
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .kinematics import classical_coefficients
from .rodrigues_op import RodriguesKernel, fused_layer_op, rodrigues_multichannel


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def linear_params(rng, out_dim, in_dim, dtype, lead=()):
    """Weight/bias pair(s) with uniform(+-1/sqrt(fan_in)) init; ``lead`` adds
    leading axes for stacked per-joint / per-link maps."""
    w = ad.parameter(_uniform(rng, lead + (out_dim, in_dim), in_dim, dtype))
    b = ad.parameter(_uniform(rng, lead + (out_dim,), in_dim, dtype))
    return w, b


@dataclass
class FeatureGraph:
    link_features: ad.Tensor  # (N, L, C_L, 4, 4)
    joint_features: ad.Tensor  # (N, D, C_J)
    global_token: ad.Tensor = None  # (N, C_G) or None


@dataclass
class RodriNetConfig:
    num_blocks: int
    c_l: int
    c_j: int
    d_attn: int = 128
    num_heads: int = 8
    global_dim: int = 0
    degenerate_mode: bool = False
    use_rodrigues: bool = True
    use_joint: bool = True
    use_attention: bool = True
    op_mode: str = "fused"

    def __post_init__(self):
        if self.use_attention and self.d_attn % self.num_heads != 0:
            raise ConfigError(
                f"attention dim {self.d_attn} not divisible by {self.num_heads} heads"
            )
        if self.op_mode not in ("fused", "reference"):
            raise ConfigError(f"unknown operator mode {self.op_mode!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RodriNetConfig":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "c_l": self.c_l,
            "c_j": self.c_j,
            "d_attn": self.d_attn,
            "num_heads": self.num_heads,
            "global_dim": self.global_dim,
            "degenerate_mode": self.degenerate_mode,
            "use_rodrigues": self.use_rodrigues,
            "use_joint": self.use_joint,
            "use_attention": self.use_attention,
            "op_mode": self.op_mode,
        }


class RodriguesLayer:
    """Joint-to-link message passing: each joint transforms its parent link's
    feature through the multi-channel operator; the result lands on its child
    link behind a residual and a per-link layer norm. The root link is only
    normalized. In degenerate mode the residual and norm are skipped and the
    root passes through unchanged."""

    def __init__(self, tree, c_l, c_j, rng, dtype=np.float32, degenerate=False, mode="fused"):
        self.tree = tree
        self.c_l, self.c_j = c_l, c_j
        self.degenerate = degenerate
        self.mode = mode
        dof, nlinks = tree.dof, tree.num_links
        fan = 2.0 * 4.0 * c_l * (1.0 + 2.0 * c_j)
        self.w_bias = ad.parameter(_uniform(rng, (dof, c_l, c_l, 4, 4), fan, dtype))
        self.w_cos = ad.parameter(_uniform(rng, (dof, c_l, c_l, c_j, 4, 4), fan, dtype))
        self.w_sin = ad.parameter(_uniform(rng, (dof, c_l, c_l, c_j, 4, 4), fan, dtype))
        self.w_bias_conj = ad.parameter(_uniform(rng, (dof, c_l, c_l, 4, 4), fan, dtype))
        self.w_cos_conj = ad.parameter(_uniform(rng, (dof, c_l, c_l, c_j, 4, 4), fan, dtype))
        self.w_sin_conj = ad.parameter(_uniform(rng, (dof, c_l, c_l, c_j, 4, 4), fan, dtype))
        self.ln_gamma = ad.parameter(np.ones((nlinks, c_l, 4, 4), dtype=dtype))
        self.ln_beta = ad.parameter(np.zeros((nlinks, c_l, 4, 4), dtype=dtype))
        # joint_for_link[l - 1] = index of the joint whose child is link l
        self._joint_for_link = np.empty(nlinks - 1, dtype=np.int64)
        self._joint_for_link[tree.joint_child - 1] = np.arange(dof)
        self._parent_idx = ad.constant(tree.joint_parent)

    @classmethod
    def from_kernels(cls, tree, kernels, rng, dtype=np.float64, degenerate=False, mode="fused"):
        if len(kernels) != tree.dof:
            raise ConfigError(f"got {len(kernels)} kernels for {tree.dof} joints")
        layer = cls(
            tree, kernels[0].c_in, kernels[0].c_joint, rng, dtype, degenerate, mode
        )
        layer.load_kernels(kernels)
        return layer

    def load_kernels(self, kernels) -> None:
        if len(kernels) != self.tree.dof:
            raise ConfigError(f"got {len(kernels)} kernels for {self.tree.dof} joints")
        for j, kernel in enumerate(kernels):
            wb, wc, ws, wbb, wcb, wsb = kernel.arrays()
            self.w_bias.data[j] = wb
            self.w_cos.data[j] = wc
            self.w_sin.data[j] = ws
            self.w_bias_conj.data[j] = wbb
            self.w_cos_conj.data[j] = wcb
            self.w_sin_conj.data[j] = wsb

    def classical_init(self) -> None:
        """Load every joint's classical coefficients (single-channel only)."""
        if self.c_l != 1 or self.c_j != 1:
            raise ConfigError("classical initialization requires single-channel layers")
        for j, joint in enumerate(self.tree.joints):
            a, b, c = classical_coefficients(joint)
            self.w_bias.data[j, 0, 0] = a
            self.w_cos.data[j, 0, 0, 0] = b
            self.w_sin.data[j, 0, 0, 0] = c
        for t in (self.w_bias_conj, self.w_cos_conj, self.w_sin_conj):
            t.data[...] = 0.0

    def _transformed(self, link_feats, joint_feats):
        if self.mode == "fused":
            return fused_layer_op(
                link_feats,
                joint_feats,
                self.w_bias,
                self.w_cos,
                self.w_sin,
                self.w_bias_conj,
                self.w_cos_conj,
                self.w_sin_conj,
                self._parent_idx,
            )
        outs = []
        n = link_feats.shape[0]
        for j, joint in enumerate(self.tree.joints):
            kernel = RodriguesKernel(
                self.w_bias[j],
                self.w_cos[j],
                self.w_sin[j],
                self.w_bias_conj[j],
                self.w_cos_conj[j],
                self.w_sin_conj[j],
            )
            out = rodrigues_multichannel(
                link_feats[:, joint.parent_index], joint_feats[:, j], kernel, "reference"
            )
            outs.append(ad.reshape(out, (n, 1, self.c_l, 4, 4)))
        return ad.concat(outs, axis=1)

    def __call__(self, link_feats, joint_feats):
        n = link_feats.shape[0]
        trans = self._transformed(link_feats, joint_feats)
        by_link = trans[:, self._joint_for_link]  # joint order -> link order
        if self.degenerate:
            return ad.concat([link_feats[:, 0:1], by_link], axis=1)
        zeros = ad.constant(np.zeros((n, 1, self.c_l, 4, 4), dtype=link_feats.dtype))
        pre = ad.add(link_feats, ad.concat([zeros, by_link], axis=1))
        return ad.layer_norm(pre, self.ln_gamma, self.ln_beta, n_axes=3)

    def named_parameters(self, prefix=""):
        names = ("w_bias", "w_cos", "w_sin", "w_bias_conj", "w_cos_conj", "w_sin_conj")
        params = [(f"{prefix}{n}", getattr(self, n)) for n in names]
        if not self.degenerate:
            params += [(f"{prefix}ln_gamma", self.ln_gamma), (f"{prefix}ln_beta", self.ln_beta)]
        return params


class JointLayer:
    """Link-to-joint message passing: a joint-specific linear map of the
    child link's flattened feature, added to the joint's feature."""

    def __init__(self, tree, c_l, c_j, rng, dtype=np.float32, weights=None, biases=None):
        self.tree = tree
        dm = c_l * 16
        if weights is not None:
            if len(weights) != tree.dof or len(biases) != tree.dof:
                raise ConfigError(f"got {len(weights)} joint maps for {tree.dof} joints")
            self.weight = ad.parameter(np.stack(weights).astype(dtype))
            self.bias = ad.parameter(np.stack(biases).astype(dtype))
        else:
            self.weight, self.bias = linear_params(rng, c_j, dm, dtype, lead=(tree.dof,))
        self._child_idx = tree.joint_child

    def __call__(self, link_feats, joint_feats):
        n, dof = link_feats.shape[0], self.tree.dof
        child = link_feats[:, self._child_idx]
        flat = ad.reshape(child, (n, dof, self.weight.shape[-1]))
        delta = ad.add(ad.einsum("ndf,dof->ndo", flat, self.weight), self.bias)
        return ad.add(joint_feats, delta)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


class SelfAttentionLayer:
    """Global information exchange: link features are projected to q/k/v
    tokens by shared linear maps, attended, projected back, and merged behind
    a residual and per-link norm. An optional global token joins the
    sequence through its own projections, residual, and norm."""

    def __init__(self, tree, c_l, d_attn, num_heads, rng, dtype=np.float32, global_dim=0):
        self.tree = tree
        self.c_l = c_l
        self.num_heads = num_heads
        self.global_dim = global_dim
        dm = c_l * 16
        self.wq, self.bq = linear_params(rng, d_attn, dm, dtype)
        self.wk = ad.parameter(_uniform(rng, (d_attn, dm), dm, dtype))
        self.wv, self.bv = linear_params(rng, d_attn, dm, dtype)
        self.wo, self.bo = linear_params(rng, dm, d_attn, dtype)
        self.ln_gamma = ad.parameter(np.ones((tree.num_links, c_l, 4, 4), dtype=dtype))
        self.ln_beta = ad.parameter(np.zeros((tree.num_links, c_l, 4, 4), dtype=dtype))
        if global_dim:
            self.g_wq, self.g_bq = linear_params(rng, d_attn, global_dim, dtype)
            self.g_wk = ad.parameter(_uniform(rng, (d_attn, global_dim), global_dim, dtype))
            self.g_wv, self.g_bv = linear_params(rng, d_attn, global_dim, dtype)
            self.g_wo, self.g_bo = linear_params(rng, global_dim, d_attn, dtype)
            self.g_ln_gamma = ad.parameter(np.ones(global_dim, dtype=dtype))
            self.g_ln_beta = ad.parameter(np.zeros(global_dim, dtype=dtype))

    def __call__(self, link_feats, global_token=None):
        n, nlinks = link_feats.shape[0], self.tree.num_links
        tokens = ad.reshape(link_feats, (n, nlinks, self.c_l * 16))
        q = ad.linear(tokens, self.wq, self.bq)
        k = ad.linear(tokens, self.wk, None)
        v = ad.linear(tokens, self.wv, self.bv)
        if global_token is not None:
            d_attn = self.wq.shape[0]
            q = ad.concat([q, ad.reshape(ad.linear(global_token, self.g_wq, self.g_bq), (n, 1, d_attn))], axis=1)
            k = ad.concat([k, ad.reshape(ad.linear(global_token, self.g_wk, None), (n, 1, d_attn))], axis=1)
            v = ad.concat([v, ad.reshape(ad.linear(global_token, self.g_wv, self.g_bv), (n, 1, d_attn))], axis=1)
        ctx = ad.attention_core(q, k, v, self.num_heads)
        back = ad.linear(ctx[:, :nlinks], self.wo, self.bo)
        out = ad.layer_norm(
            ad.add(link_feats, ad.reshape(back, link_feats.shape)),
            self.ln_gamma,
            self.ln_beta,
            n_axes=3,
        )
        new_token = None
        if global_token is not None:
            g_back = ad.linear(ctx[:, nlinks], self.g_wo, self.g_bo)
            new_token = ad.layer_norm(
                ad.add(global_token, g_back), self.g_ln_gamma, self.g_ln_beta, n_axes=1
            )
        return out, new_token

    def named_parameters(self, prefix=""):
        names = ["wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta"]
        if self.global_dim:
            names += ["g_wq", "g_bq", "g_wk", "g_wv", "g_bv", "g_wo", "g_bo", "g_ln_gamma", "g_ln_beta"]
        return [(f"{prefix}{n}", getattr(self, n)) for n in names]


class RodriguesBlock:
    """Sequential composition link-update -> joint-update -> attention,
    honoring the per-layer enable toggles."""

    def __init__(self, tree, cfg: RodriNetConfig, rng, dtype=np.float32):
        self.rodrigues = (
            RodriguesLayer(
                tree, cfg.c_l, cfg.c_j, rng, dtype, cfg.degenerate_mode, cfg.op_mode
            )
            if cfg.use_rodrigues
            else None
        )
        self.joint = JointLayer(tree, cfg.c_l, cfg.c_j, rng, dtype) if cfg.use_joint else None
        self.attention = (
            SelfAttentionLayer(
                tree, cfg.c_l, cfg.d_attn, cfg.num_heads, rng, dtype, cfg.global_dim
            )
            if cfg.use_attention
            else None
        )

    def __call__(self, fg: FeatureGraph) -> FeatureGraph:
        links, joints, token = fg.link_features, fg.joint_features, fg.global_token
        if self.rodrigues is not None:
            links = self.rodrigues(links, joints)
        if self.joint is not None:
            joints = self.joint(links, joints)
        if self.attention is not None:
            links, token = self.attention(links, token)
        return FeatureGraph(links, joints, token)

    def named_parameters(self, prefix=""):
        params = []
        for name, layer in (
            ("rodrigues", self.rodrigues),
            ("joint", self.joint),
            ("attention", self.attention),
        ):
            if layer is not None:
                params += layer.named_parameters(f"{prefix}{name}.")
        return params


class _Stack:
    """Shared trunk: per-joint and per-link input encoders feeding a stack of
    blocks."""

    def __init__(self, tree, cfg, input_dim, rng, dtype):
        self.tree = tree
        self.cfg = cfg
        self.input_dim = input_dim
        self.dtype = dtype
        dof, nlinks = tree.dof, tree.num_links
        self.joint_enc_w, self.joint_enc_b = linear_params(
            rng, cfg.c_j, input_dim, dtype, lead=(dof,)
        )
        self.link_enc_w, self.link_enc_b = linear_params(
            rng, cfg.c_l * 16, input_dim, dtype, lead=(nlinks,)
        )
        if cfg.global_dim:
            self.token_init = ad.parameter(np.zeros(cfg.global_dim, dtype=dtype))
        self.blocks = [RodriguesBlock(tree, cfg, rng, dtype) for _ in range(cfg.num_blocks)]

    def encode(self, x: ad.Tensor) -> FeatureGraph:
        n = x.shape[0]
        joints = ad.add(ad.einsum("nf,dof->ndo", x, self.joint_enc_w), self.joint_enc_b)
        links = ad.add(ad.einsum("nf,lof->nlo", x, self.link_enc_w), self.link_enc_b)
        links = ad.reshape(links, (n, self.tree.num_links, self.cfg.c_l, 4, 4))
        token = None
        if self.cfg.global_dim:
            token = ad.broadcast_to(
                ad.reshape(self.token_init, (1, self.cfg.global_dim)), (n, self.cfg.global_dim)
            )
        return FeatureGraph(links, joints, token)

    def run_blocks(self, fg: FeatureGraph) -> FeatureGraph:
        for block in self.blocks:
            fg = block(fg)
        return fg

    def named_parameters(self, prefix=""):
        params = [
            (f"{prefix}joint_enc_w", self.joint_enc_w),
            (f"{prefix}joint_enc_b", self.joint_enc_b),
            (f"{prefix}link_enc_w", self.link_enc_w),
            (f"{prefix}link_enc_b", self.link_enc_b),
        ]
        if self.cfg.global_dim:
            params.append((f"{prefix}token_init", self.token_init))
        for i, block in enumerate(self.blocks):
            params += block.named_parameters(f"{prefix}blocks.{i}.")
        return params


class FkNetwork:
    """Configuration -> link-pose regressor.

    Input is the flattened root pose (3 translation + 9 rotation entries,
    free-floating trees only) followed by the joint angles; output is
    (3 + 9) values per link. Each link's pose is decoded from that link's own
    output feature by a per-link linear map."""

    def __init__(self, tree, cfg: RodriNetConfig, rng, dtype=np.float32):
        self.tree = tree
        self.cfg = cfg
        self.input_dim = (12 if tree.free_floating else 0) + tree.dof
        self.stack = _Stack(tree, cfg, self.input_dim, rng, dtype)
        self.dec_w, self.dec_b = linear_params(
            rng, 12, cfg.c_l * 16, dtype, lead=(tree.num_links,)
        )

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input (N, {self.input_dim}), got {x.shape}")
        n = x.shape[0]
        fg = self.stack.run_blocks(self.stack.encode(x))
        flat = ad.reshape(fg.link_features, (n, self.tree.num_links, self.cfg.c_l * 16))
        poses = ad.add(ad.einsum("nlf,lof->nlo", flat, self.dec_w), self.dec_b)
        return ad.reshape(poses, (n, self.tree.num_links * 12))

    def named_parameters(self, prefix=""):
        return self.stack.named_parameters(prefix) + [
            (f"{prefix}dec_w", self.dec_w),
            (f"{prefix}dec_b", self.dec_b),
        ]


class MotionNetwork:
    """Joint-angle history -> joint-angle future regressor.

    Input is 8 frames of D angles (flattened, frame-major); each joint's
    8 future angles are decoded from its output joint feature concatenated
    with its child link's output feature."""

    FRAMES = 8

    def __init__(self, tree, cfg: RodriNetConfig, rng, dtype=np.float32):
        self.tree = tree
        self.cfg = cfg
        self.input_dim = self.FRAMES * tree.dof
        self.stack = _Stack(tree, cfg, self.input_dim, rng, dtype)
        self.head_w, self.head_b = linear_params(
            rng, self.FRAMES, cfg.c_j + cfg.c_l * 16, dtype, lead=(tree.dof,)
        )

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input (N, {self.input_dim}), got {x.shape}")
        n, dof = x.shape[0], self.tree.dof
        fg = self.stack.run_blocks(self.stack.encode(x))
        child = fg.link_features[:, self.tree.joint_child]
        per_joint = ad.concat(
            [fg.joint_features, ad.reshape(child, (n, dof, self.cfg.c_l * 16))], axis=2
        )
        future = ad.add(ad.einsum("ndf,dof->ndo", per_joint, self.head_w), self.head_b)
        return ad.reshape(ad.transpose(future, (0, 2, 1)), (n, self.FRAMES * dof))

    def named_parameters(self, prefix=""):
        return self.stack.named_parameters(prefix) + [
            (f"{prefix}head_w", self.head_w),
            (f"{prefix}head_b", self.head_b),
        ]


class MLP:
    """Plain fully-connected baseline; ReLU on hidden layers, no norm."""

    def __init__(self, widths, rng, dtype=np.float32):
        if len(widths) < 2:
            raise ConfigError(f"MLP needs at least input and output widths, got {widths}")
        self.widths = list(widths)
        self.layers = [
            linear_params(rng, o, i, dtype) for i, o in zip(widths[:-1], widths[1:])
        ]

    @property
    def input_dim(self):
        return self.widths[0]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input (N, {self.widths[0]}), got {x.shape}")
        out = x
        for i, (w, b) in enumerate(self.layers):
            out = ad.linear(out, w, b)
            if i < len(self.layers) - 1:
                out = ad.relu(out)
        return out

    def named_parameters(self, prefix=""):
        params = []
        for i, (w, b) in enumerate(self.layers):
            params += [(f"{prefix}layers.{i}.w", w), (f"{prefix}layers.{i}.b", b)]
        return params


def parameters(model):
    return [t for _, t in model.named_parameters()]


def parameter_count(model) -> int:
    return int(sum(t.size for _, t in model.named_parameters()))


def mlp_widths_matching(target_params, input_dim, output_dim, hidden_layers=6):
    """Hidden width (uniform across hidden_layers) whose total parameter
    count lands closest to target_params."""

    def count(width):
        widths = [input_dim] + [width] * hidden_layers + [output_dim]
        return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))

    lo, hi = 1, 8192
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) < target_params:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda w: abs(count(w) - target_params))
    return [input_dim] + [best] * hidden_layers + [output_dim]


def degenerate_fk_poses(tree, root_poses, joint_angles, num_layers=None, mode="fused",
                        dtype=np.float64):
    """Run a degenerate-mode, classically-initialized stack over raw poses
    and angles: the architecture-level forward-kinematics reproduction.

    root_poses (N, 4, 4), joint_angles (N, D); returns (N, L, 4, 4).
    """
    from .rng import stream

    n = joint_angles.shape[0]
    num_layers = tree.dof if num_layers is None else num_layers
    rng = stream(0, "degenerate-init")
    links = np.zeros((n, tree.num_links, 1, 4, 4), dtype=dtype)
    links[:, 0, 0] = root_poses
    fg = FeatureGraph(
        ad.constant(links), ad.constant(joint_angles[:, :, None].astype(dtype))
    )
    for _ in range(num_layers):
        layer = RodriguesLayer(tree, 1, 1, rng, dtype, degenerate=True, mode=mode)
        layer.classical_init()
        fg = FeatureGraph(layer(fg.link_features, fg.joint_features), fg.joint_features)
    return fg.link_features.data[:, :, 0]
