import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liornet import losses as L
from liornet.core import SensorMeta
from liornet.nnet import autograd as ag
from liornet.nnet import train as T
from liornet.nnet.layers import BatchNorm2d, ResidualBlock, set_batchnorm_identity
from liornet.nnet.models import UNET, UNETPP, NetConfig, SnowNet, active_nodes, aux_heads
from liornet.rangeproj import normalize_channels, project, unproject_mask
from liornet.synthgen import SceneParams, generate_scene

TINY = NetConfig(depth=2, base_channels=4)
META = SensorMeta(channels=16, horiz_steps=64, fov_up_deg=15.0, fov_down_deg=-15.0, max_range_m=120.0)


def test_identity_kernel_conv():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert np.allclose(ag.conv2d(x, w, padding=1).data, x, atol=0, rtol=0)


def test_bilinear_up_constant():
    x = np.full((1, 2, 3, 4), 7.25)
    out = ag.upsample_bilinear(x, 2).data
    assert out.shape == (1, 2, 6, 8)
    assert np.all(out == 7.25)


def test_maxpool_shape_and_value():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert ag.maxpool2d(x).data[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_shape_errors():
    with pytest.raises(ValueError):
        ag.add(np.zeros((2, 3)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ag.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_residual_block_zero_branch():
    rng = np.random.default_rng(1)
    blk = ResidualBlock(3, 5, rng=rng)
    blk.conv1.weight.data[:] = 0
    blk.conv2.weight.data[:] = 0
    x = rng.normal(size=(1, 3, 4, 4))
    out = blk(x)
    assert out.shape == (1, 5, 4, 4)
    assert np.allclose(out.data, blk.proj(x).data)


def test_batchnorm_identity_switch():
    net = SnowNet(TINY)
    set_batchnorm_identity(net)
    assert all(m.identity for m in net.modules() if isinstance(m, BatchNorm2d))
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    bn = BatchNorm2d(3)
    bn.identity = True
    assert np.array_equal(bn(ag.as_tensor(x)).data, x)


def test_unet_depth1_shape():
    net = SnowNet(NetConfig(variant=UNET, depth=1, base_channels=2))
    main, aux = net(np.zeros((1, 3, 2, 2)))
    assert main.shape == (1, 1, 2, 2)
    assert aux == []


def test_unetpp_depth2_heads_from_recurrence():
    # enumerate nested nodes: (i, j) exists for i + j <= depth; top row j>=1 nodes are heads
    depth = 2
    top = [(0, j) for j in range(1, depth + 1)]
    assert [n for n in active_nodes(UNETPP, depth) if n[0] == 0 and n[1] >= 1] == top
    net = SnowNet(NetConfig(variant=UNETPP, depth=depth, base_channels=2))
    main, aux = net(np.zeros((1, 3, 4, 4)))
    assert 1 + len(aux) == len(top)
    assert all(a.shape == main.shape for a in aux)


def test_node_sets():
    assert len(active_nodes(UNETPP, 4)) == 15
    unet = active_nodes(UNET, 4)
    assert sorted(unet) == sorted([(i, 0) for i in range(5)] + [(i, 4 - i) for i in range(4)])
    assert aux_heads(NetConfig(depth=4, deep_supervision=False)) == []


def test_no_deep_supervision_single_head():
    net = SnowNet(NetConfig(depth=2, base_channels=2, deep_supervision=False))
    assert net(np.zeros((1, 3, 4, 4)))[1] == []


def test_indivisible_input_rejected():
    with pytest.raises(ValueError):
        SnowNet(TINY)(np.zeros((1, 3, 6, 4)))


def test_zero_input_finite_and_batch_consistent():
    net = SnowNet(TINY)
    net.eval()
    main, _ = net(np.zeros((1, 3, 8, 8)))
    assert np.isfinite(main.data).all()
    x = np.random.default_rng(2).normal(size=(1, 3, 8, 8))
    two, _ = net(np.concatenate([x, x]))
    assert np.array_equal(two.data[0], two.data[1])


def test_bit_stable_across_builds():
    x = np.random.default_rng(3).normal(size=(1, 3, 8, 8))
    a, b = SnowNet(TINY, seed=5), SnowNet(TINY, seed=5)
    a.eval(), b.eval()
    assert a(x)[0].data.tobytes() == b(x)[0].data.tobytes()


def toy_batch(h=4, w=4, seed=0):
    rng = np.random.default_rng(seed)
    shape = (1, 1, h, w)
    target = (rng.random(shape) < 0.5).astype(float)
    return {
        "image": rng.normal(size=(1, 3, h, w)) + 2 * target,
        "valid": np.ones(shape, bool),
        "target": target,
        "cond1": target.astype(bool),
        "edges": rng.random(shape) < 0.2,
        "intensity": np.zeros(shape),
        "range_m": np.full(shape, 10.0),
        "z": np.zeros(shape),
        "knn_dist": np.where(target > 0, 1.0, np.inf),
        "mount_height_m": 1.8,
    }


def test_toy_loss_decreases():
    state = T.TrainState.create(TINY, seed=0)
    batch = toy_batch()
    cfg = L.LossConfig(lambdas=(1, 0, 0, 0, 0))
    tc = T.TrainConfig(lr=0.05)
    first = T.train_step(state, batch, cfg, tc)[1]
    for _ in range(30):
        last = T.train_step(state, batch, cfg, tc)[1]
    assert last < first


def test_lambda_gating_ignores_other_targets():
    cfg = L.LossConfig(lambdas=(1, 0, 0, 0, 0))
    tc = T.TrainConfig(lr=0.01)
    a, b = T.TrainState.create(TINY), T.TrainState.create(TINY)
    ba, bb = toy_batch(), toy_batch()
    bb["edges"] = ~ba["edges"]
    bb["knn_dist"] = np.full_like(ba["knn_dist"], 0.01)
    bb["intensity"] = np.full_like(ba["intensity"], 1e3)
    T.train_step(a, ba, cfg, tc)
    T.train_step(b, bb, cfg, tc)
    for (n, p), (_, q) in zip(a.net.named_parameters(), b.net.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_sparsity_only_step_leaves_parameters():
    state = T.TrainState.create(TINY)
    before = T.module_state(state.net)
    T.train_step(state, toy_batch(), L.LossConfig(lambdas=(0, 0, 0, 1, 0)), T.TrainConfig(lr=1.0))
    after = T.module_state(state.net)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_nonfinite_loss_names_term():
    state = T.TrainState.create(TINY)
    batch = toy_batch()
    batch["knn_dist"] = np.where(batch["cond1"], np.nan, np.inf)
    with pytest.raises(T.NonFiniteLoss, match="sparsity"):
        T.train_step(state, batch, L.LossConfig(), T.TrainConfig())


def test_learned_log_sigma_moves_only_when_active():
    batch = toy_batch()
    tc = T.TrainConfig(lr=0.01)
    fixed = T.TrainState.create(TINY)
    T.train_step(fixed, batch, L.LossConfig(), tc)
    assert np.all(fixed.log_sigma.data == 0)
    late = T.TrainState.create(TINY)
    T.train_step(late, batch, L.LossConfig(uncertainty_mode="learned", uncertainty_start_epoch=1), tc)
    assert np.all(late.log_sigma.data == 0)
    on = T.TrainState.create(TINY)
    T.train_step(on, batch, L.LossConfig(uncertainty_mode="learned"), tc)
    assert np.any(on.log_sigma.data != 0)


def scene():
    return generate_scene(SceneParams(seed=1, meta=META, snow_count=30))


def test_final_bias_minus_40_gives_no_snow():
    net = SnowNet(TINY)
    net.head.weight.data[:] = 0
    net.head.bias.data[:] = -40.0
    probs = T.infer(net, scene())
    assert probs.dtype == np.float32
    assert (probs < 0.5).all() and probs.max() < 1e-12


def test_infer_matches_manual_composition():
    net = SnowNet(TINY, seed=4)
    c = scene()
    got = T.infer(net, c, dtype=None)
    img = project(c)
    image, _ = normalize_channels(img)
    net.eval()
    logits, _ = net(image[None])
    want = unproject_mask(img, 1 / (1 + np.exp(-logits.data[0, 0])))
    assert np.allclose(got, want, rtol=0, atol=1e-12)
    f32 = T.infer(net, c)
    assert np.abs(f32 - want).max() < 1e-4


def test_infer_pads_odd_widths():
    meta = SensorMeta(channels=10, horiz_steps=30, fov_up_deg=15.0, fov_down_deg=-15.0)
    c = generate_scene(SceneParams(seed=2, meta=meta, snow_count=5, separable=False))
    assert T.infer(SnowNet(TINY), c).shape == (len(c),)


def test_checkpoint_roundtrip(tmp_path):
    state = T.TrainState.create(TINY, seed=3)
    T.train_step(state, toy_batch(), L.LossConfig(uncertainty_mode="learned"), T.TrainConfig(lr=0.01))
    state.epoch = 2
    T.save_checkpoint(state, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"LIORNETC"
    back = T.load_checkpoint(tmp_path / "m.ckpt", TINY)
    assert (back.epoch, back.step) == (2, 1)
    for (n, p), (_, q) in zip(state.net.named_parameters(), back.net.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    for (n, p), (_, q) in zip(state.net.named_buffers(), back.net.named_buffers()):
        assert np.array_equal(p, q), n
    assert np.array_equal(state.log_sigma.data, back.log_sigma.data)
    T.save_checkpoint(back, tmp_path / "n.ckpt")
    assert (tmp_path / "n.ckpt").read_bytes() == raw


def test_checkpoint_rejects_other_architecture(tmp_path):
    T.save_checkpoint(T.TrainState.create(TINY), tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="fingerprint"):
        T.load_checkpoint(tmp_path / "m.ckpt", NetConfig(depth=2, base_channels=8))
    (tmp_path / "bad.ckpt").write_bytes(b"nope" * 30)
    with pytest.raises(ValueError):
        T.load_checkpoint(tmp_path / "bad.ckpt", TINY)


def test_training_loop_deterministic():
    samples = [T.prepare_sample(generate_scene(SceneParams(seed=s, meta=META, snow_count=20)),
                                SceneParams().pseudolabel, 4) for s in range(3)]
    tc = T.TrainConfig(epochs=2, batch_size=2, crop_h=8, crop_w=32, lr=0.01, seed=11)
    logs = []
    for _ in range(2):
        state = T.TrainState.create(TINY, seed=11)
        rows = T.train(state, samples, L.LossConfig(), tc)
        logs.append(T.format_log(rows))
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0].split("\t")[0] == "epoch"
    assert len(logs[0].splitlines()) == 3


@given(st.integers(1, 3), st.integers(0, 100))
@settings(max_examples=6, deadline=None)
def test_output_spatial_shape(depth, seed):
    net = SnowNet(NetConfig(depth=depth, base_channels=2), seed=seed)
    size = 2 ** depth
    main, aux = net(np.random.default_rng(seed).normal(size=(2, 3, size, 2 * size)))
    assert main.shape == (2, 1, size, 2 * size)
    assert len(aux) == depth - 1
