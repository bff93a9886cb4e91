import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
import oracles
from kwslab import autodiff as ad
from kwslab.autodiff import (
    ParameterVector,
    Segment,
    Sgd,
    SgdConfig,
    Tensor,
    checkpoint_bytes,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from kwslab.errors import (
    CheckpointError,
    GraphFreedError,
    NanError,
    NonScalarLossError,
    ShapeError,
)


def sum_of_squares(t: Tensor) -> Tensor:
    return ad.tensor_sum(ad.square(t))


# -- exact examples ---------------------------------------------------------------

def test_softmax_ce_uniform_logits():
    logits = Tensor(np.zeros((1, 3)), requires_grad=True)
    loss = ad.softmax_cross_entropy(logits, np.array([1]))
    assert float(loss.data) == pytest.approx(np.log(3.0), rel=1e-12)


def test_softmax_ce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    loss = ad.softmax_cross_entropy(Tensor(logits), labels)
    assert float(loss.data) == pytest.approx(oracles.softmax_ce_loops(logits, labels), rel=1e-12)


def test_conv1d_identity_kernel():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 7)))
    w = np.zeros((3, 3, 3))
    for c in range(3):
        w[c, c, 1] = 1.0  # center tap
    out = ad.conv1d(x, Tensor(w), stride=1)
    assert np.array_equal(out.data, x.data)


def test_conv1d_forward_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for stride in (1, 2, 3):
        x = rng.normal(size=(2, 3, 11))
        w = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=4)
        got = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
        np.testing.assert_allclose(got.data, oracles.conv1d_loops(x, w, b, stride), atol=1e-12)


def test_conv1d_output_length_is_ceil():
    w = Tensor(np.ones((1, 1, 3)))
    for t_in, stride, t_out in [(5, 2, 3), (4, 2, 2), (7, 3, 3), (6, 1, 6)]:
        out = ad.conv1d(Tensor(np.ones((1, 1, t_in))), w, stride=stride)
        assert out.data.shape == (1, 1, t_out)


def test_batch_norm_forward_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3, 6))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    got = ad.batch_norm(
        Tensor(x), Tensor(gamma), Tensor(beta), Tensor(np.zeros(3)), Tensor(np.ones(3)),
        training=True, update_running=False,
    )
    np.testing.assert_allclose(got.data, oracles.batch_norm_loops(x, gamma, beta), atol=1e-12)


def test_batch_norm_running_stats():
    x = np.random.default_rng(4).normal(size=(8, 2, 5))
    rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))

    ad.batch_norm(Tensor(x), gamma, beta, rm, rv, training=True, update_running=False)
    assert np.array_equal(rm.data, np.zeros(2))
    assert np.array_equal(rv.data, np.ones(2))

    ad.batch_norm(Tensor(x), gamma, beta, rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm.data, 0.1 * x.mean(axis=(0, 2)), atol=1e-15)
    np.testing.assert_allclose(rv.data, 0.9 + 0.1 * x.var(axis=(0, 2)), atol=1e-15)

    # eval mode normalizes with the running stats and leaves them alone
    out = ad.batch_norm(Tensor(x), gamma, beta, rm, rv, training=False)
    expect = (x - rm.data[None, :, None]) / np.sqrt(rv.data[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((3, 4, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ad.dense(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ShapeError):
        ad.global_avg_pool(Tensor(np.zeros((2, 3))))


def test_nan_detection():
    x = Tensor(np.array([[[np.inf, 1.0]]]))
    with pytest.raises(NanError):
        ad.conv1d(x, Tensor(np.ones((1, 1, 1))))


# -- backward semantics -------------------------------------------------------------

def test_backward_sum_gives_ones():
    theta = Tensor(np.random.default_rng(5).normal(size=(4, 3)), requires_grad=True)
    ad.backward(ad.tensor_sum(theta))
    assert np.array_equal(theta.grad, np.ones((4, 3)))


def test_backward_half_norm_squared_gives_theta():
    theta = Tensor(np.random.default_rng(6).normal(size=7), requires_grad=True)
    ad.backward(ad.scale(sum_of_squares(theta), 0.5))
    np.testing.assert_allclose(theta.grad, theta.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(NonScalarLossError):
        ad.backward(ad.square(x))


def test_backward_frees_graph_by_default():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = sum_of_squares(x)
    ad.backward(loss)
    with pytest.raises(GraphFreedError):
        ad.backward(loss)


def test_backward_retained_graph_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = sum_of_squares(x)
    ad.backward(loss, retain_graph=True)
    ad.backward(loss, retain_graph=True)
    np.testing.assert_allclose(x.grad, 4.0 * x.data, atol=1e-15)


def test_diamond_graph_accumulates_through_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.square(x)
    loss = ad.tensor_sum(ad.add(y, y))  # d/dx 2x^2 = 4x
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [12.0], atol=1e-12)


# -- finite-difference gradient checks ----------------------------------------------

def test_conv1d_grads_vs_fd():
    rng = np.random.default_rng(7)
    for stride in (1, 2):
        x = Tensor(rng.normal(size=(2, 3, 8)))
        w = Tensor(rng.normal(size=(2, 3, 3)) * 0.5)
        b = Tensor(rng.normal(size=2))
        gradcheck.check_grads(
            [x, w, b], lambda x=x, w=w, b=b, s=stride: sum_of_squares(ad.conv1d(x, w, b, stride=s))
        )


def test_batch_norm_grads_vs_fd_train_and_eval():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(3, 2, 4)))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=2))
    beta = Tensor(rng.normal(size=2))
    rm = Tensor(rng.normal(size=2) * 0.1)
    rv = Tensor(rng.uniform(0.5, 1.5, size=2))
    for training in (True, False):
        gradcheck.check_grads(
            [x, gamma, beta],
            lambda training=training: sum_of_squares(
                ad.batch_norm(x, gamma, beta, rm, rv, training=training, update_running=False)
            ),
        )


def test_dense_relu_gap_softmax_grads_vs_fd():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 2, 5)))
    w = Tensor(rng.normal(size=(4, 2)) * 0.5)
    b = Tensor(rng.normal(size=4))
    labels = np.array([0, 2, 3])

    def build():
        h = ad.relu(x)
        pooled = ad.global_avg_pool(h)
        logits = ad.dense(pooled, w, b)
        return ad.softmax_cross_entropy(logits, labels)

    # keep inputs away from the relu kink so central differences are valid
    x.data = np.where(np.abs(x.data) < 0.05, x.data + 0.1, x.data)
    gradcheck.check_grads([x, w, b], build)


def test_add_square_scale_grads_vs_fd():
    rng = np.random.default_rng(10)
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(2, 3)))
    gradcheck.check_grads(
        [a, b], lambda: ad.scale(ad.tensor_sum(ad.square(ad.add(a, b))), 0.7)
    )


# -- sgd ------------------------------------------------------------------------------

def _one_param(value):
    t = Tensor(np.array([value]), requires_grad=True)
    return t, ParameterVector([Segment("theta", t)])


def test_sgd_single_step_no_momentum():
    t, pv = _one_param(1.0)
    t.grad = np.array([0.5])
    Sgd(pv, SgdConfig(learning_rate=0.1, momentum=0.0)).step()
    assert t.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_recurrence():
    t, pv = _one_param(1.0)
    sgd = Sgd(pv, SgdConfig(learning_rate=0.1, momentum=0.9))
    t.grad = np.array([1.0])
    d1 = sgd.step()
    assert d1[0] == pytest.approx(-0.1, abs=1e-15)
    assert t.data[0] == pytest.approx(0.9, abs=1e-15)
    t.grad = np.array([1.0])
    d2 = sgd.step()
    assert d2[0] == pytest.approx(-0.19, abs=1e-15)
    assert t.data[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_weight_decay():
    t, pv = _one_param(2.0)
    t.grad = np.array([0.0])
    Sgd(pv, SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5)).step()
    # g_eff = 0 + 0.5 * 2 = 1
    assert t.data[0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_lr_scale_damps_coordinates():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    pv = ParameterVector([Segment("a", a), Segment("b", b)])
    sgd = Sgd(pv, SgdConfig(learning_rate=0.1, momentum=0.0), lr_scale=np.array([0.5, 1.0]))
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    sgd.step()
    assert a.data[0] == pytest.approx(0.95, abs=1e-15)
    assert b.data[0] == pytest.approx(0.90, abs=1e-15)


def test_sgd_training_loss_decreases_on_toy_batch():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(8, 4)))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    w = Tensor(rng.normal(size=(3, 4)) * 0.1, requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    pv = ParameterVector([Segment("w", w), Segment("b", b)])
    sgd = Sgd(pv, SgdConfig(learning_rate=0.5, momentum=0.0))
    losses = []
    for _ in range(10):
        pv.zero_grad()
        loss = ad.softmax_cross_entropy(ad.dense(x, w, b), labels)
        ad.backward(loss)
        sgd.step()
        losses.append(float(loss.data))
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- parameter vector ------------------------------------------------------------------

def test_duplicate_segment_names_rejected():
    t = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ShapeError):
        ParameterVector([Segment("x", t), Segment("x", t)])


@given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5))
def test_flatten_unflatten_round_trip(sizes):
    rng = np.random.default_rng(sum(sizes))
    segs = [
        Segment(f"s{i}", Tensor(rng.normal(size=n), requires_grad=True))
        for i, n in enumerate(sizes)
    ]
    pv = ParameterVector(segs)
    v = rng.normal(size=pv.trainable_count)
    pv.unflatten(v)
    assert pv.flatten().tobytes() == v.tobytes()


def test_flatten_skips_non_trainable():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    stats = Tensor(np.array([9.0]))
    pv = ParameterVector([Segment("a", a), Segment("stats", stats, trainable=False)])
    assert pv.total_count == 3
    assert pv.trainable_count == 2
    np.testing.assert_array_equal(pv.flatten(), [1.0, 2.0])
    pv.unflatten(np.array([5.0, 6.0]))
    assert stats.data[0] == 9.0


def test_grad_vector_fills_zeros_for_missing_grads():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    pv = ParameterVector([Segment("a", a), Segment("b", b)])
    b.grad = np.ones(3)
    np.testing.assert_array_equal(pv.grad_vector(), [0, 0, 1, 1, 1])
    pv.set_grad_vector(np.arange(5.0))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0])
    np.testing.assert_array_equal(b.grad, [2.0, 3.0, 4.0])
    with pytest.raises(ShapeError):
        pv.set_grad_vector(np.zeros(4))


# -- checkpoints -------------------------------------------------------------------------

def _sample_params():
    rng = np.random.default_rng(12)
    return ParameterVector([
        Segment("conv.w", Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)),
        Segment("bn.running_mean", Tensor(rng.normal(size=2)), trainable=False),
    ])


def test_checkpoint_round_trip_f8_bitwise(tmp_path):
    pv = _sample_params()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, pv, dtype="<f8", meta={"task": 3})
    meta, segs = load_checkpoint(path)
    assert meta == {"task": 3}
    assert [s.name for s in segs] == pv.segment_names()
    assert [s.trainable for s in segs] == [True, False]
    for got, want in zip(segs, pv.segments):
        assert got.tensor.data.tobytes() == want.tensor.data.tobytes()


def test_checkpoint_f4_upcasts(tmp_path):
    pv = _sample_params()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, pv, dtype="<f4")
    _, segs = load_checkpoint(path)
    assert segs[0].tensor.data.dtype == np.float64
    np.testing.assert_allclose(segs[0].tensor.data, pv.segments[0].tensor.data, rtol=1e-6)


def test_checkpoint_rejects_bad_blobs(tmp_path):
    pv = _sample_params()
    with pytest.raises(CheckpointError):
        checkpoint_bytes(pv, dtype="<f2")

    blob = checkpoint_bytes(pv, dtype="<f8")
    bad_magic = tmp_path / "bad_magic.ckpt"
    bad_magic.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_restore_into_checks_names_and_shapes(tmp_path):
    pv = _sample_params()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, pv, dtype="<f8")
    _, segs = load_checkpoint(path)

    target = _sample_params()
    target.segments[0].tensor.data[:] = 0.0
    restore_into(target, segs)
    assert target.flatten().tobytes() == pv.flatten().tobytes()

    rng = np.random.default_rng(0)
    wrong = ParameterVector([
        Segment("conv.w", Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)),
        Segment("bn.running_mean", Tensor(np.zeros(2)), trainable=False),
    ])
    with pytest.raises(CheckpointError):
        restore_into(wrong, segs)
    missing = ParameterVector([Segment("other", Tensor(np.zeros(2)))])
    with pytest.raises(CheckpointError):
        restore_into(missing, segs)
