import numpy as np
import pytest

from hydrodcm import tensor as T
from hydrodcm.checkpoint import (CheckpointError, load_checkpoint,
                                 save_checkpoint)
from hydrodcm.data import NormStats
from hydrodcm.losses import adversarial_loss
from hydrodcm.model import Affine, FilmAdapter, ModelArch, build_bundle
from hydrodcm.rng import Rng
from hydrodcm.tensor import ShapeError, Tensor

ARCH = ModelArch()
TINY = ModelArch(t_window=8, horizon=3, enc_hidden=4, disc_hidden=4,
                 adapter_hidden=4, head_hidden=4, embed_dim=4)


def make_bundle(arch=ARCH, seed=0, dg=True, n_domains=None):
    return build_bundle(arch, Rng(seed).spawn("init"), with_dg_components=dg,
                        n_domains=n_domains)


def window(arch, seed=1, batch=2):
    return Tensor(Rng(seed).normal((batch, arch.t_window, arch.n_features)))


def test_shape_pipeline_end_to_end():
    bundle = make_bundle()
    for batch in (1, 3, 32):
        x = window(ARCH, batch=batch)
        s = Tensor(Rng(2).uniform((batch, 3)))
        h = bundle.encode(x)
        assert h.data.shape == (batch, 64)
        v = bundle.project_pseudo_domain(s, x)
        assert v.data.shape == (batch, 32)
        d = bundle.discriminate(h, 1.0)
        assert d.data.shape == (batch, 32)
        z = bundle.modulate(h, s)
        assert z.data.shape == (batch, 64)
        y = bundle.predict(z)
        assert y.data.shape == (batch, 7)


def test_encode_zero_weights_zero_hidden():
    bundle = make_bundle()
    for layer in bundle.encoder.layers:
        layer.wx.data[:] = 0.0
        layer.wh.data[:] = 0.0
        layer.b.data[:] = 0.0
    h = bundle.encode(window(ARCH, batch=4))
    assert np.array_equal(h.data, np.zeros((4, 64)))


def test_encode_batch_independence_and_permutation():
    bundle = make_bundle()
    x = window(ARCH, batch=5)
    h = bundle.encode(x).data
    # identical rows encode identically
    twin = Tensor(np.stack([x.data[0], x.data[0]]))
    h_twin = bundle.encode(twin).data
    assert np.array_equal(h_twin[0], h_twin[1])
    # permuting the batch permutes rows
    perm = [4, 2, 0, 1, 3]
    h_perm = bundle.encode(Tensor(x.data[perm])).data
    assert np.array_equal(h_perm, h[perm])


def test_encode_rejects_bad_window():
    bundle = make_bundle()
    with pytest.raises(ShapeError):
        bundle.encode(Tensor(np.zeros((2, 30, 5))))


def test_encoder_sensitive_to_input():
    bundle = make_bundle(seed=3)
    x = window(ARCH, batch=1)
    h = bundle.encode(x).data.copy()
    bumped = x.data.copy()
    bumped[0, 10, 1] += 1.0
    h2 = bundle.encode(Tensor(bumped)).data
    assert not np.array_equal(h, h2)


def test_projector_zero_map():
    bundle = make_bundle()
    bundle.projector.fc.w.data[:] = 0.0
    bundle.projector.fc.b.data[:] = 0.0
    v = bundle.project_pseudo_domain(Tensor(np.ones((2, 3))), window(ARCH))
    assert np.array_equal(v.data, np.zeros((2, 32)))


def test_projector_selector_recovers_metadata():
    bundle = make_bundle()
    w = np.zeros_like(bundle.projector.fc.w.data)
    w[0, 0] = w[1, 1] = w[2, 2] = 1.0  # select the metadata block
    bundle.projector.fc.w.data = w
    bundle.projector.fc.b.data[:] = 0.0
    s = Tensor(Rng(4).uniform((3, 3)))
    v = bundle.project_pseudo_domain(s, window(ARCH, batch=3))
    assert np.allclose(v.data[:, :3], s.data)
    assert np.array_equal(v.data[:, 3:], np.zeros((3, 29)))


def test_projector_depends_on_window():
    bundle = make_bundle(seed=5)
    s = Tensor(np.ones((2, 3)) * 0.5)
    xa = window(ARCH, seed=6)
    xb = Tensor(xa.data + 0.1)
    va = bundle.project_pseudo_domain(s, xa).data
    vb = bundle.project_pseudo_domain(s, xb).data
    assert not np.array_equal(va, vb)


def test_film_identity_at_init():
    bundle = make_bundle(seed=7)
    s = Tensor(Rng(8).uniform((100, 3)))
    gamma, delta = bundle.adapter.coefficients(s)
    assert np.all(np.abs(gamma.data - 1.0) < 1e-12)
    assert np.all(np.abs(delta.data) < 1e-12)
    z = Tensor(Rng(9).normal((100, 64)))
    assert np.allclose(bundle.modulate(z, s).data, z.data, atol=1e-12)


def test_full_model_identity_init_matches_bypassed_adapter():
    bundle = make_bundle(seed=10)
    x = window(ARCH, batch=4)
    s = Tensor(Rng(11).uniform((4, 3)))
    with_adapter = bundle.predict(bundle.modulate(bundle.encode(x), s)).data
    without = bundle.predict(bundle.encode(x)).data
    assert np.allclose(with_adapter, without, atol=1e-12)


def test_modulate_hand_example():
    adapter = FilmAdapter(Affine.zeros(3, 4), Affine.zeros(4, 2), Affine.zeros(4, 2))
    adapter.gamma.b.data[:] = [2.0, 0.5]
    adapter.delta.b.data[:] = [1.0, -1.0]
    out = adapter(Tensor([[3.0, 4.0]]), Tensor([[0.1, 0.2, 0.3]]))
    assert np.allclose(out.data, [[7.0, 1.0]])


def test_predict_zero_weights():
    bundle = make_bundle()
    for affine in (bundle.head.fc1, bundle.head.fc2):
        affine.w.data[:] = 0.0
        affine.b.data[:] = 0.0
    y = bundle.predict(Tensor(np.ones((3, 64))))
    assert np.array_equal(y.data, np.zeros((3, 7)))


def test_metadata_flows_only_through_adapter():
    bundle = make_bundle(seed=12)
    bundle.adapter.gamma.w.data[:] = Rng(13).normal(
        bundle.adapter.gamma.w.data.shape, std=0.1)
    x = window(ARCH, batch=2)
    s1 = Tensor(Rng(14).uniform((2, 3)))
    s2 = Tensor(Rng(15).uniform((2, 3)))
    assert not np.array_equal(bundle.infer(x, s1).data, bundle.infer(x, s2).data)
    # bypassing the adapter removes all metadata dependence
    base = bundle.predict(bundle.encode(x)).data
    assert base.shape == (2, 7)


def test_init_determinism():
    a = make_bundle(seed=21)
    b = make_bundle(seed=21)
    for (name_a, ta), (name_b, tb) in zip(a.parameters(), b.parameters()):
        assert name_a == name_b
        assert ta.data.tobytes() == tb.data.tobytes()


def test_shared_components_identical_across_variants():
    full = make_bundle(seed=30, dg=True)
    backbone = make_bundle(seed=30, dg=False)
    full_params = dict(full.parameters())
    for name, tensor in backbone.parameters():
        assert full_params[name].data.tobytes() == tensor.data.tobytes()


def test_parameter_enumeration_complete_and_unique():
    bundle = make_bundle(n_domains=27)
    params = bundle.parameters()
    names = [n for n, _ in params]
    assert len(names) == len(set(names))
    ids = [id(t) for _, t in params]
    assert len(ids) == len(set(ids))
    # 2 LSTM layers x3 + projector 2 + discriminator 4 + adapter 6 + head 4 + domain 2
    assert len(params) == 6 + 2 + 4 + 6 + 4 + 2


def test_forget_gate_bias_initialized_to_one():
    bundle = make_bundle()
    hid = ARCH.enc_hidden
    for layer in bundle.encoder.layers:
        b = layer.b.data
        assert np.all(b[hid:2 * hid] == 1.0)
        assert np.all(b[:hid] == 0.0) and np.all(b[2 * hid:] == 0.0)


def test_inference_path_avoids_domain_components():
    bundle = make_bundle(seed=16, n_domains=5)
    x = window(ARCH, batch=2)
    s = Tensor(Rng(17).uniform((2, 3)))
    out = bundle.infer(x, s)
    touched = {id(t) for t in T.graph_leaves(T.mean(out))}
    forbidden = ([t for _, t in bundle.projector.parameters()]
                 + [t for _, t in bundle.discriminator.parameters()]
                 + [t for _, t in bundle.domain_head.parameters()])
    assert not touched & {id(t) for t in forbidden}
    allowed = [t for _, t in bundle.encoder.parameters()]
    assert {id(t) for t in allowed} <= touched


def test_adversarial_gradient_flips_with_lambda():
    arch = TINY
    grads = {}
    for lam in (0.5, -0.5):
        bundle = make_bundle(arch, seed=18)
        x = Tensor(Rng(19).normal((3, arch.t_window, 3)))
        s = Tensor(Rng(20).uniform((3, 3)))
        h = bundle.encode(x)
        v = bundle.project_pseudo_domain(s, x)
        d = bundle.discriminate(h, lam)
        T.backward(adversarial_loss(d, v.detach()))
        grads[lam] = [t.grad.copy() for _, t in bundle.encoder.parameters()]
        disc = [t.grad.copy() for _, t in bundle.discriminator.parameters()]
        if lam > 0:
            disc_pos = disc
    for g_pos, g_neg in zip(grads[0.5], grads[-0.5]):
        assert np.allclose(g_pos, -g_neg, rtol=1e-12, atol=0)
    # discriminator's own gradient does not depend on lambda
    bundle = make_bundle(arch, seed=18)
    x = Tensor(Rng(19).normal((3, arch.t_window, 3)))
    s = Tensor(Rng(20).uniform((3, 3)))
    d = bundle.discriminate(bundle.encode(x), -0.5)
    T.backward(adversarial_loss(d, bundle.project_pseudo_domain(s, x).detach()))
    for g_ref, (_, t) in zip(disc_pos, bundle.discriminator.parameters()):
        assert np.allclose(g_ref, t.grad, rtol=1e-12, atol=0)


def _tiny_stats():
    stats = NormStats()
    stats.feature_mean["R00"] = np.array([0.1, 0.2, 0.3])
    stats.feature_std["R00"] = np.array([1.0, 2.0, 3.0])
    stats.feature_mean["R01"] = np.array([0.5, 0.6, 0.7])
    stats.feature_std["R01"] = np.array([1.5, 2.5, 3.5])
    stats.meta_min = np.array([37.0, -112.0, 1500.0])
    stats.meta_max = np.array([43.0, -105.0, 3000.0])
    return stats


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    bundle = make_bundle(seed=23, n_domains=4)
    bundle.norm_stats = _tiny_stats()
    path = tmp_path / "model.hdcm"
    save_checkpoint(path, bundle)
    loaded = load_checkpoint(path)
    orig = bundle.parameters()
    back = loaded.parameters()
    assert [n for n, _ in orig] == [n for n, _ in back]
    for (_, a), (_, b) in zip(orig, back):
        assert a.data.tobytes() == b.data.tobytes()
    for rid in bundle.norm_stats.feature_mean:
        assert (loaded.norm_stats.feature_mean[rid].tobytes()
                == bundle.norm_stats.feature_mean[rid].tobytes())
        assert (loaded.norm_stats.feature_std[rid].tobytes()
                == bundle.norm_stats.feature_std[rid].tobytes())
    assert loaded.norm_stats.meta_min.tobytes() == bundle.norm_stats.meta_min.tobytes()
    # loaded bundle predicts identically
    x = window(ARCH, batch=2)
    s = Tensor(Rng(24).uniform((2, 3)))
    assert np.array_equal(bundle.infer(x, s).data, loaded.infer(x, s).data)


def test_checkpoint_backbone_only_roundtrip(tmp_path):
    bundle = make_bundle(seed=25, dg=False)
    bundle.norm_stats = _tiny_stats()
    path = tmp_path / "backbone.hdcm"
    save_checkpoint(path, bundle)
    loaded = load_checkpoint(path)
    assert loaded.adapter is None and loaded.projector is None
    x = window(ARCH, batch=2)
    assert np.array_equal(bundle.infer(x).data, loaded.infer(x).data)


def test_checkpoint_version_rejected(tmp_path):
    bundle = make_bundle(seed=26, dg=False)
    bundle.norm_stats = _tiny_stats()
    path = tmp_path / "model.hdcm"
    save_checkpoint(path, bundle)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.hdcm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
