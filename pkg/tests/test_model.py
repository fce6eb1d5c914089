import numpy as np
import pytest

from mdat.errors import ConfigError
from mdat.linalg import RngState, SparseBatch, SparseVector, softmax
from mdat.model import (
    GradCheckReport,
    MdatModel,
    MlpParams,
    MlpSpec,
    ModelSpec,
    backward,
    forward,
    forward_msuda,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)


def tiny_spec(vocab=6, m=2, hidden=(5,), d_shared=4, d_specific=3, keep=1.0):
    return ModelSpec(vocab_dim=vocab, k=2, m=m, extractor_hidden=hidden,
                     d_shared=d_shared, d_specific=d_specific, keep_prob=keep)


def init_model(spec, seed=0):
    model = MdatModel(spec)
    model.init_params(RngState(seed).child("init"))
    return model


def random_batch(rng, n, vocab):
    vecs = []
    for _ in range(n):
        nnz = int(rng.integers(1, vocab // 2))
        idx = np.sort(rng.choice(vocab, size=nnz, replace=False))
        vecs.append(SparseVector(vocab, idx, rng.integers(1, 4, nnz).astype(float)))
    return SparseBatch.from_vectors(vecs)


# ---------------------------------------------------------------------------
# initialization

def test_init_biases_zero():
    model = init_model(tiny_spec())
    for params in model.components().values():
        for _W, b in params.layers:
            assert np.all(b == 0.0)


def test_init_variance_matches_scheme():
    spec = MlpSpec((300, 200))
    params = MlpParams(spec)
    params.init_fan_uniform(RngState(0))
    W, _ = params.layers[0]
    target = 2.0 / (300 + 200)
    assert W.size >= 10_000
    assert abs(W.var() - target) / target < 0.2


def test_init_deterministic():
    a = init_model(tiny_spec(), seed=4)
    b = init_model(tiny_spec(), seed=4)
    for name in a.components():
        assert np.array_equal(a.components()[name].flat, b.components()[name].flat)


# ---------------------------------------------------------------------------
# forward

def test_forward_zero_params_uniform_softmax():
    model = MdatModel(tiny_spec())  # all zeros
    x = SparseVector(6, [0, 2], [1.0, 2.0])
    trace = forward(model, 0, x, "eval")
    np.testing.assert_array_equal(trace.logits_c, np.zeros((1, 2)))
    np.testing.assert_allclose(softmax(trace.logits_c[0]), [0.5, 0.5])


def test_forward_eval_deterministic():
    model = init_model(tiny_spec(keep=0.5))
    x = SparseVector(6, [1], [3.0])
    a = forward(model, 1, x, "eval")
    b = forward(model, 1, x, "eval")
    assert np.array_equal(a.logits_c, b.logits_c)
    assert np.array_equal(a.logits_cp, b.logits_cp)


def test_forward_matches_pencil_computation():
    # no hidden layers in the extractors: shared is the identity on 3 inputs,
    # specific is a hand-set 2-row map; classifier has one hidden layer
    spec = ModelSpec(vocab_dim=3, k=2, m=1, extractor_hidden=(),
                     d_shared=3, d_specific=2, keep_prob=1.0)
    model = MdatModel(spec)
    model.shared.layers[0][0][...] = np.eye(3)
    W_spec = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -1.0]])
    model.specific[0].layers[0][0][...] = W_spec
    model.specific[0].layers[0][1][...] = np.array([0.5, 0.0])
    rng = np.random.default_rng(3)
    A = rng.standard_normal((5, 5))
    b1 = rng.standard_normal(5)
    B = rng.standard_normal((2, 5))
    b2 = rng.standard_normal(2)
    model.classifier.layers[0][0][...] = A
    model.classifier.layers[0][1][...] = b1
    model.classifier.layers[1][0][...] = B
    model.classifier.layers[1][1][...] = b2

    x = np.array([1.0, 2.0, 0.0])
    trace = forward(model, 0, x, "eval")
    feats = np.concatenate([x, W_spec @ x + np.array([0.5, 0.0])])
    expected = B @ np.maximum(A @ feats + b1, 0.0) + b2
    np.testing.assert_allclose(trace.logits_c[0], expected, atol=1e-12)
    np.testing.assert_array_equal(trace.features[0], feats)


def test_forward_rejects_bad_domain():
    model = init_model(tiny_spec(m=2))
    with pytest.raises(ConfigError):
        forward(model, 2, SparseVector(6, [0], [1.0]), "eval")


def test_forward_msuda_ignores_specific_params():
    model = init_model(tiny_spec())
    x = SparseVector(6, [0, 4], [1.0, 1.0])
    before = forward_msuda(model, x, "eval").logits_c
    for params in model.specific:
        params.flat += RngState(9).standard_normal(params.flat.size)
    after = forward_msuda(model, x, "eval").logits_c
    assert np.array_equal(before, after)
    assert np.all(forward_msuda(model, x, "eval").specific_out == 0.0)


def test_forward_msuda_equals_forward_when_specific_is_zero():
    model = init_model(tiny_spec())
    for params in model.specific:
        params.flat[...] = 0.0
    x = SparseVector(6, [1, 3], [2.0, 1.0])
    a = forward(model, 0, x, "eval").logits_c
    b = forward_msuda(model, x, "eval").logits_c
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward

def ce_closure(model, batch, labels, masks_by_run=None):
    """Cross-entropy of the main classifier; plain loss for grad tests."""
    def loss_fn(m):
        trace = forward(m, 0, batch, "train", masks=masks_by_run or {})
        p = softmax(trace.logits_c)
        n = p.shape[0]
        loss = float(-np.mean(np.log(p[np.arange(n), labels])))
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        grads = backward(m, trace, d / n, np.zeros_like(trace.logits_cp))
        sig = tuple(np.packbits(Z.ravel() > 0).tobytes()
                    for name in sorted(trace.caches)
                    for _A, Z, _m in trace.caches[name])
        return loss, grads, sig
    return loss_fn


def test_backward_zero_upstream_zero_grads():
    model = init_model(tiny_spec())
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 4, 6)
    trace = forward(model, 0, batch, "train", RngState(1))
    grads = backward(model, trace, np.zeros((4, 2)), np.zeros((4, 2)))
    for g in grads.values():
        assert np.all(g == 0.0)


def test_backward_linear_in_upstream():
    model = init_model(tiny_spec())
    rng = np.random.default_rng(1)
    batch = random_batch(rng, 3, 6)
    trace = forward(model, 0, batch, "train", RngState(2))
    d1 = rng.standard_normal((3, 2))
    d2 = rng.standard_normal((3, 2))
    g1 = backward(model, trace, d1, np.zeros_like(d1))
    g2 = backward(model, trace, d2, np.zeros_like(d2))
    g_sum = backward(model, trace, d1 + d2, np.zeros_like(d1))
    for name in g_sum:
        np.testing.assert_allclose(g_sum[name], g1[name] + g2[name], atol=1e-12)


def test_backward_routes_concat_halves():
    # zero the classifier/auxiliary weights that read the specific half:
    # the specific extractor must then receive exactly zero gradient
    spec = tiny_spec()
    model = init_model(spec)
    ds = spec.d_shared
    for clf in (model.classifier, model.auxiliary):
        W1, _ = clf.layers[0]
        W1[:, ds:] = 0.0
    rng = np.random.default_rng(2)
    batch = random_batch(rng, 4, 6)
    trace = forward(model, 0, batch, "train", RngState(3))
    grads = backward(model, trace, rng.standard_normal((4, 2)),
                     rng.standard_normal((4, 2)))
    assert np.all(grads["specific_0"] == 0.0)
    assert np.any(grads["shared"] != 0.0)


def test_backward_sign_flips_gradients():
    model = init_model(tiny_spec())
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 4, 6)
    trace = forward(model, 0, batch, "train", RngState(4))
    d = rng.standard_normal((4, 2))
    plus = backward(model, trace, d, np.zeros_like(d))
    minus = backward(model, trace, d, np.zeros_like(d), sign=-1.0)
    for name in plus:
        np.testing.assert_array_equal(plus[name], -minus[name])


def test_backward_requires_train_trace():
    model = init_model(tiny_spec())
    trace = forward(model, 0, SparseVector(6, [0], [1.0]), "eval")
    with pytest.raises(ConfigError):
        backward(model, trace, np.zeros((1, 2)), np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# gradient checking

def test_grad_check_smooth_linear_case():
    spec = ModelSpec(vocab_dim=6, k=2, m=1, extractor_hidden=(),
                     d_shared=4, d_specific=3, keep_prob=1.0)
    model = init_model(spec)
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 6, 6)
    labels = rng.integers(0, 2, size=6)
    report = grad_check(model, ce_closure(model, batch, labels),
                        coords_per_component=40, step=1e-5, rng=RngState(5))
    assert isinstance(report, GradCheckReport)
    assert report.max_rel_err() <= 1e-6


def test_grad_check_with_frozen_dropout():
    spec = tiny_spec(keep=0.6, hidden=(8,))
    model = init_model(spec)
    rng = np.random.default_rng(5)
    batch = random_batch(rng, 6, 6)
    labels = rng.integers(0, 2, size=6)
    warm = forward(model, 0, batch, "train", RngState(7))
    report = grad_check(model, ce_closure(model, batch, labels, warm.masks),
                        coords_per_component=40, step=1e-5, rng=RngState(8))
    assert report.passed(1e-4)
    assert report.total_excluded() >= 0  # kink exclusions are reported


def test_grad_check_detects_corruption():
    spec = tiny_spec(keep=1.0)
    model = init_model(spec)
    rng = np.random.default_rng(6)
    batch = random_batch(rng, 5, 6)
    labels = rng.integers(0, 2, size=5)
    base = ce_closure(model, batch, labels)

    def corrupted(m):
        loss, grads, sig = base(m)
        grads["classifier"] = grads["classifier"].copy()
        grads["classifier"][3] += 0.5
        return loss, grads, sig

    report = grad_check(model, corrupted, coords_per_component=60,
                        step=1e-5, rng=RngState(9))
    assert not report.passed(1e-4)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = init_model(tiny_spec(vocab=9, m=3, hidden=(7, 5), keep=0.6), seed=2)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(model, path, seed=2, extra={"note": "test"})
    loaded, header = load_checkpoint(path)
    assert header["m"] == 3
    assert header["seed"] == 2
    assert header["dropout_position"] == "after-activation"
    assert header["extra"] == {"note": "test"}
    for name in model.components():
        assert np.array_equal(model.components()[name].flat,
                              loaded.components()[name].flat)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_truncation(tmp_path):
    model = init_model(tiny_spec())
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, str(path))
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ConfigError):
        load_checkpoint(str(path))


def test_param_hash_tracks_changes():
    model = init_model(tiny_spec())
    before = model.param_hashes()
    model.classifier.flat[0] += 1.0
    after = model.param_hashes()
    assert before["classifier"] != after["classifier"]
    assert all(before[n] == after[n] for n in before if n != "classifier")
