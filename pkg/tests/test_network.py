import numpy as np
import pytest

from rodrinet import autodiff as ad
from rodrinet import kinematics as kin
from rodrinet import network as net
from rodrinet import se3
from rodrinet.errors import ConfigError, ShapeError
from rodrinet.gradcheck import check_gradients
from rodrinet.rng import stream

STAR_TREE = """
{
  "name": "star", "root_mode": "fixed",
  "links": ["hub", "a", "b", "c"],
  "joints": [
    {"id": "ja", "parent": "hub", "child": "a",
     "origin_translation": [0.1, 0, 0], "origin_rpy": [0, 0, 0],
     "axis": [0, 0, 1], "limits": [-1, 1]},
    {"id": "jb", "parent": "hub", "child": "b",
     "origin_translation": [0, 0.1, 0], "origin_rpy": [0, 0, 0],
     "axis": [0, 1, 0], "limits": [-1, 1]},
    {"id": "jc", "parent": "hub", "child": "c",
     "origin_translation": [0, 0, 0.1], "origin_rpy": [0, 0, 0],
     "axis": [1, 0, 0], "limits": [-1, 1]}
  ]
}
"""


def random_feature_graph(tree, c_l, c_j, rng, n=3, dtype=np.float64):
    links = ad.constant(rng.uniform(-1, 1, (n, tree.num_links, c_l, 4, 4)).astype(dtype))
    joints = ad.constant(rng.uniform(-1, 1, (n, tree.dof, c_j)).astype(dtype))
    return net.FeatureGraph(links, joints)


# --- parameter-count formulas -------------------------------------------------


def analytic_block_params(dof, nlinks, c_l, c_j, d_attn, use_r=True, use_j=True, use_a=True):
    dm = 16 * c_l
    total = 0
    if use_r:
        total += dof * 2 * 16 * c_l * c_l * (1 + 2 * c_j) + 2 * nlinks * dm
    if use_j:
        total += dof * (dm * c_j + c_j)
    if use_a:
        total += 3 * dm * d_attn + 2 * d_attn + d_attn * dm + dm + 2 * nlinks * dm
    return total


def analytic_model_params(task, dof, c_l, c_j, d_attn, blocks, input_dim,
                          use_r=True, use_j=True, use_a=True):
    nlinks = dof + 1
    dm = 16 * c_l
    total = blocks * analytic_block_params(dof, nlinks, c_l, c_j, d_attn, use_r, use_j, use_a)
    total += dof * (input_dim * c_j + c_j) + nlinks * (input_dim * dm + dm)
    if task == "fk":
        total += nlinks * (dm * 12 + 12)
    else:
        total += dof * ((c_j + dm) * 8 + 8)
    return total


def test_parameter_count_matches_analytic_formula():
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(num_blocks=3, c_l=4, c_j=2, d_attn=32, num_heads=4)
    model = net.MotionNetwork(tree, cfg, stream(60, "net-count"))
    expected = analytic_model_params("motion", 6, 4, 2, 32, 3, 48)
    assert net.parameter_count(model) == expected


def test_motion_config_parameter_count_near_three_million():
    # 12 blocks, 4 joint channels, 8 link channels, 256-wide attention.
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(num_blocks=12, c_l=8, c_j=4, d_attn=256, num_heads=8)
    model = net.MotionNetwork(tree, cfg, stream(61, "net-count"))
    count = net.parameter_count(model)
    assert abs(count - 3.04e6) / 3.04e6 < 0.02


def test_fk_config_parameter_count_near_two_hundred_k():
    # 12 blocks of single link-update layers, 3 link channels, 1 joint channel.
    tree = kin.bundled_robot("leap_hand")
    cfg = net.RodriNetConfig(
        num_blocks=12, c_l=3, c_j=1, use_joint=False, use_attention=False
    )
    model = net.FkNetwork(tree, cfg, stream(62, "net-count"))
    count = net.parameter_count(model)
    assert abs(count - 0.2e6) / 0.2e6 < 0.2


def test_mlp_fk_widths_parameter_count_near_three_million():
    widths = [28] + [768] * 6 + [204]
    model = net.MLP(widths, stream(63, "net-count"))
    count = net.parameter_count(model)
    assert abs(count - 3.0e6) / 3.0e6 < 0.05


def test_ablation_parameter_shares_match_reported_direction():
    tree = kin.bundled_robot("ur5_arm")

    def count(**toggles):
        cfg = net.RodriNetConfig(num_blocks=12, c_l=8, c_j=4, d_attn=256, num_heads=8, **toggles)
        return net.parameter_count(net.MotionNetwork(tree, cfg, stream(64, "net-count")))

    full = count()
    drop_attention = (count(use_attention=False) - full) / full
    drop_joint = (count(use_joint=False) - full) / full
    drop_rodrigues = (count(use_rodrigues=False) - full) / full
    assert abs(drop_attention - (-0.50)) < 0.10
    assert abs(drop_joint - (-0.01)) < 0.10
    assert abs(drop_rodrigues - (-0.45)) < 0.10


# --- link-update layer ---------------------------------------------------------


@pytest.mark.parametrize("robot", ["serial6", "ur5_arm", "leap_hand"])
@pytest.mark.parametrize("mode", ["fused", "reference"])
def test_degenerate_classical_stack_reproduces_fk(robot, mode):
    tree = kin.bundled_robot(robot)
    rng = stream(65, "net-degen")
    n = 8
    angles = rng.uniform(tree.limits_lo, tree.limits_hi, (n, tree.dof))
    if tree.free_floating:
        roots = np.stack(
            [se3.make_pose(se3.sample_rotation_uniform(rng), rng.uniform(-0.3, 0.3, 3)) for _ in range(n)]
        )
    else:
        roots = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    got = net.degenerate_fk_poses(tree, roots, angles, mode=mode)
    expected = kin.fk_batch(tree, roots, angles)
    assert float(np.max(np.abs(got - expected))) <= 1e-10


def test_degenerate_classical_stack_single_precision():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(96, "net-degen32")
    n = 8
    angles = rng.uniform(tree.limits_lo, tree.limits_hi, (n, tree.dof))
    roots = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    got = net.degenerate_fk_poses(tree, roots, angles, dtype=np.float32)
    expected = kin.fk_batch(tree, roots, angles)
    assert float(np.max(np.abs(got - expected))) <= 1e-4


def test_zero_kernels_reduce_to_layer_norm_of_input():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(66, "net-rlayer")
    layer = net.RodriguesLayer(tree, 2, 3, rng, dtype=np.float64)
    for t in (layer.w_bias, layer.w_cos, layer.w_sin,
              layer.w_bias_conj, layer.w_cos_conj, layer.w_sin_conj):
        t.data[...] = 0.0
    fg = random_feature_graph(tree, 2, 3, rng)
    out = layer(fg.link_features, fg.joint_features)
    expected = ad.layer_norm(fg.link_features, layer.ln_gamma, layer.ln_beta, n_axes=3)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)
    assert out.shape == fg.link_features.shape


def test_rodrigues_layer_modes_agree():
    tree = kin.bundled_robot("serial6")
    rng = stream(67, "net-rlayer")
    fg = random_feature_graph(tree, 3, 2, rng)
    layer = net.RodriguesLayer(tree, 3, 2, rng, dtype=np.float64, mode="fused")
    out_fused = layer(fg.link_features, fg.joint_features)
    layer.mode = "reference"
    out_ref = layer(fg.link_features, fg.joint_features)
    np.testing.assert_allclose(out_fused.data, out_ref.data, atol=1e-12)


def test_from_kernels_count_mismatch():
    from rodrinet.rodrigues_op import init_from_classical

    tree = kin.bundled_robot("ur5_arm")
    kernels = [init_from_classical(j) for j in tree.joints[:-1]]
    with pytest.raises(ConfigError):
        net.RodriguesLayer.from_kernels(tree, kernels, stream(68, "net-rlayer"))


# --- joint layer ----------------------------------------------------------------


def test_joint_layer_zero_maps_identity():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(69, "net-jlayer")
    layer = net.JointLayer(tree, 2, 3, rng, dtype=np.float64)
    layer.weight.data[...] = 0.0
    layer.bias.data[...] = 0.0
    fg = random_feature_graph(tree, 2, 3, rng)
    out = layer(fg.link_features, fg.joint_features)
    np.testing.assert_array_equal(out.data, fg.joint_features.data)


def test_joint_layer_gradients():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(70, "net-jlayer")
    layer = net.JointLayer(tree, 2, 2, rng, dtype=np.float64)
    fg = random_feature_graph(tree, 2, 2, rng, n=2)
    target = ad.constant(rng.uniform(-1, 1, (2, tree.dof, 2)))

    def make_loss(_):
        return ad.mse_loss(layer(fg.link_features, fg.joint_features), target)

    assert check_gradients(make_loss, net.parameters(layer)) < 1e-5


def test_joint_layer_per_joint_maps_are_distinct():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(71, "net-jlayer")
    layer = net.JointLayer(tree, 2, 3, rng, dtype=np.float64)
    n = 2
    same = rng.uniform(-1, 1, (n, 1, 2, 4, 4))
    links = ad.constant(np.tile(same, (1, tree.num_links, 1, 1, 1)))
    joints = ad.constant(np.zeros((n, tree.dof, 3)))
    out = layer(links, joints).data
    # identical child features but different per-joint maps -> distinct rows
    for j in range(1, tree.dof):
        assert not np.allclose(out[:, 0], out[:, j])


def test_joint_layer_map_count_mismatch():
    tree = kin.bundled_robot("ur5_arm")
    weights = [np.zeros((3, 32))] * (tree.dof - 1)
    biases = [np.zeros(3)] * (tree.dof - 1)
    with pytest.raises(ConfigError):
        net.JointLayer(tree, 2, 3, stream(72, "net-jlayer"), weights=weights, biases=biases)


# --- attention layer --------------------------------------------------------------


def test_attention_single_link_closed_form():
    tree = kin.parse_robot(
        '{"name": "solo", "root_mode": "fixed", "links": ["only"], "joints": []}'
    )
    rng = stream(73, "net-attn")
    layer = net.SelfAttentionLayer(tree, 2, 8, 2, rng, dtype=np.float64)
    feats = rng.uniform(-1, 1, (3, 1, 2, 4, 4))
    out, _ = layer(ad.constant(feats))
    # With one token the softmax weight is exactly 1, so attention returns
    # the value projection; the layer reduces to LN(F + Wo(Wv token + bv) + bo).
    token = feats.reshape(3, 32)
    manual = token @ layer.wv.data.T + layer.bv.data
    manual = manual @ layer.wo.data.T + layer.bo.data
    pre = feats + manual.reshape(3, 1, 2, 4, 4)
    expected = ad.layer_norm(
        ad.constant(pre), layer.ln_gamma, layer.ln_beta, n_axes=3
    ).data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_permutation_equivariance():
    rng_doc = STAR_TREE
    tree_a = kin.parse_robot(rng_doc)
    # Reorder the joint records: the parser then lists links in a permuted
    # order; shared projections must make outputs permute identically.
    import json

    doc = json.loads(rng_doc)
    doc["joints"] = [doc["joints"][2], doc["joints"][0], doc["joints"][1]]
    tree_b = kin.parse_robot(json.dumps(doc))
    perm = [tree_b.links.index(name) for name in tree_a.links]

    layer_a = net.SelfAttentionLayer(tree_a, 2, 8, 2, stream(74, "net-attn"), dtype=np.float64)
    layer_b = net.SelfAttentionLayer(tree_b, 2, 8, 2, stream(74, "net-attn"), dtype=np.float64)
    feats = stream(75, "net-attn").uniform(-1, 1, (2, 4, 2, 4, 4))
    out_a, _ = layer_a(ad.constant(feats))
    out_b, _ = layer_b(ad.constant(feats[:, perm]))
    np.testing.assert_allclose(out_b.data, out_a.data[:, perm], atol=1e-6)


def test_attention_global_token_flows():
    tree = kin.bundled_robot("ur5_arm")
    rng = stream(76, "net-attn")
    layer = net.SelfAttentionLayer(tree, 2, 16, 4, rng, dtype=np.float64, global_dim=5)
    fg = random_feature_graph(tree, 2, 1, rng)
    token = ad.parameter(rng.uniform(-1, 1, (3, 5)))
    out, new_token = layer(fg.link_features, token)
    assert out.shape == fg.link_features.shape
    assert new_token.shape == (3, 5)
    ad.mse_loss(new_token, ad.constant(np.zeros((3, 5)))).backward()
    assert token.grad is not None and np.any(token.grad != 0)


# --- block and full networks --------------------------------------------------------


def test_block_all_toggles_off_is_identity():
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(
        num_blocks=1, c_l=2, c_j=2, use_rodrigues=False, use_joint=False, use_attention=False
    )
    block = net.RodriguesBlock(tree, cfg, stream(77, "net-block"))
    fg = random_feature_graph(tree, 2, 2, stream(78, "net-block"))
    out = block(fg)
    assert out.link_features is fg.link_features
    assert out.joint_features is fg.joint_features


def test_fk_network_shapes_and_finite_loss():
    tree = kin.bundled_robot("serial6")
    cfg = net.RodriNetConfig(num_blocks=2, c_l=3, c_j=1, use_joint=False, use_attention=False)
    model = net.FkNetwork(tree, cfg, stream(79, "net-fk"), dtype=np.float32)
    rng = stream(80, "net-fk")
    x = ad.constant(rng.uniform(-1, 1, (5, model.input_dim)).astype(np.float32))
    out = model(x)
    assert out.shape == (5, tree.num_links * 12)
    loss = ad.mse_loss(out, ad.constant(rng.uniform(-1, 1, out.shape).astype(np.float32)))
    assert np.isfinite(loss.data)
    with pytest.raises(ShapeError):
        model(ad.constant(np.zeros((5, model.input_dim + 1), dtype=np.float32)))


def test_motion_network_shapes_and_zero_heads():
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(num_blocks=2, c_l=2, c_j=2, d_attn=16, num_heads=2)
    model = net.MotionNetwork(tree, cfg, stream(81, "net-motion"), dtype=np.float64)
    assert model.input_dim == 48
    x = ad.constant(stream(82, "net-motion").uniform(-1, 1, (4, 48)))
    out = model(x)
    assert out.shape == (4, 48)
    model.head_w.data[...] = 0.0
    model.head_b.data[...] = 0.0
    np.testing.assert_array_equal(model(x).data, np.zeros((4, 48)))


@pytest.mark.parametrize("mode", ["fused", "reference"])
def test_motion_network_full_gradients_tiny_config(mode):
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(num_blocks=2, c_l=2, c_j=2, d_attn=16, num_heads=2, op_mode=mode)
    model = net.MotionNetwork(tree, cfg, stream(83, "net-motion"), dtype=np.float64)
    rng = stream(84, "net-motion")
    x = ad.constant(rng.uniform(-1, 1, (2, 48)))
    target = ad.constant(rng.uniform(-1, 1, (2, 48)))
    params = net.parameters(model)
    # keep the finite-difference sweep tractable: check the layers' weights
    # for the first block plus encoders and heads
    subset = [t for name, t in model.named_parameters()
              if "blocks.1" not in name and t.size <= 4096]

    def make_loss(_):
        return ad.mse_loss(model(x), target)

    assert len(subset) < len(params)
    assert check_gradients(make_loss, subset) < 1e-5


def test_fk_network_gradients_tiny_config():
    tree = kin.bundled_robot("serial6")
    cfg = net.RodriNetConfig(num_blocks=2, c_l=2, c_j=1, use_joint=False, use_attention=False)
    model = net.FkNetwork(tree, cfg, stream(85, "net-fk"), dtype=np.float64)
    rng = stream(86, "net-fk")
    x = ad.constant(rng.uniform(-1, 1, (2, model.input_dim)))
    target = ad.constant(rng.uniform(-1, 1, (2, tree.num_links * 12)))

    def make_loss(_):
        return ad.mse_loss(model(x), target)

    assert check_gradients(make_loss, net.parameters(model)) < 1e-5


def test_networks_finite_over_100_seeds_single_precision():
    tree = kin.bundled_robot("ur5_arm")
    cfg = net.RodriNetConfig(num_blocks=2, c_l=2, c_j=2, d_attn=16, num_heads=2)
    for seed in range(100):
        model = net.MotionNetwork(tree, cfg, stream(seed, "net-finite"), dtype=np.float32)
        x = ad.constant(stream(seed, "net-finite-x").uniform(-2, 2, (2, 48)).astype(np.float32))
        assert np.all(np.isfinite(model(x).data))


def test_mlp_identity_passthrough():
    model = net.MLP([3, 3, 3], stream(87, "net-mlp"), dtype=np.float64)
    for w, b in model.layers:
        w.data[...] = np.eye(3)
        b.data[...] = 0.0
    x = np.array([[0.5, 1.0, 2.0]])
    np.testing.assert_array_equal(model(ad.constant(x)).data, x)


def test_mlp_gradients():
    model = net.MLP([4, 8, 3], stream(88, "net-mlp"), dtype=np.float64)
    rng = stream(89, "net-mlp")
    x = ad.constant(rng.uniform(-1, 1, (3, 4)))
    target = ad.constant(rng.uniform(-1, 1, (3, 3)))

    def make_loss(_):
        return ad.mse_loss(model(x), target)

    assert check_gradients(make_loss, net.parameters(model)) < 1e-5


def test_mlp_width_matching():
    widths = net.mlp_widths_matching(50_000, 18, 84, hidden_layers=6)
    model = net.MLP(widths, stream(90, "net-mlp"))
    assert abs(net.parameter_count(model) - 50_000) / 50_000 < 0.10
