"""Tests for the training stack: masked loss, Adam, clipping, schedule,
splitting, and the loop itself."""

import math

import numpy as np
import pytest

from canopyfuse.fusion import Sample
from canopyfuse.net import ModelConfig, PyramidRegressor, model_to_bytes
from canopyfuse import train as tr


# ------------------------------------------------------------------- oracles


from _oracles import adam_closed_form as adam_oracle


def make_samples(n, patch, label_fn, rng, channels=1):
    """Fully-masked square samples with labels computed from the patch."""
    out = []
    for i in range(n):
        p = rng.uniform(0.0, 1.0, size=(channels, patch, patch)).astype(np.float32)
        labels = label_fn(p).astype(np.float32)
        mask = np.ones((patch, patch), dtype=bool)
        out.append(
            Sample(
                patch=p,
                label_values=labels,
                label_mask=mask,
                origin=(0, i * patch),
                sample_id=i,
                region="R0",
            )
        )
    return out


TINY_MODEL = dict(
    entry_widths=(8, 8, 8),
    num_blocks=1,
    branches=(1,),
    pool_branch=False,
    branch_channels=8,
    residual=True,
)


# -------------------------------------------------------------------- config


def test_config_defaults():
    cfg = tr.TrainConfig()
    assert cfg.batch_size == 5
    assert cfg.lr == 1e-4
    assert cfg.milestones == (400000, 700000)
    assert cfg.lr_gamma == 0.1
    assert cfg.epochs == 200
    assert cfg.iters_per_epoch == 5000
    assert cfg.grad_clip == 1000.0
    assert cfg.l2_lambda == 0.0
    assert cfg.beta1 == 0.9
    assert cfg.beta2 == 0.999
    assert cfg.epsilon == 1e-8
    assert cfg.val_fraction == 0.10
    assert cfg.seed == 0


@pytest.mark.parametrize(
    "kw",
    [
        dict(lr=0.0),
        dict(lr=-1e-4),
        dict(beta1=1.0),
        dict(beta2=-0.1),
        dict(val_fraction=0.0),
        dict(val_fraction=1.0),
        dict(milestones=(700000, 400000)),
        dict(milestones=(5, 5)),
        dict(batch_size=0),
        dict(epochs=0),
        dict(iters_per_epoch=0),
        dict(grad_clip=0.0),
        dict(l2_lambda=-0.5),
        dict(epsilon=0.0),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tr.TrainConfig(**kw)


# ---------------------------------------------------------------------- loss


def test_loss_zero_when_equal():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(4, 4))
    mask = np.ones((4, 4), dtype=bool)
    assert tr.loss(pred, pred.copy(), mask) == 0.0


def test_loss_single_masked_pixel():
    pred = np.zeros((3, 3))
    labels = np.zeros((3, 3))
    mask = np.zeros((3, 3), dtype=bool)
    pred[1, 1] = 5.0
    labels[1, 1] = 2.0
    mask[1, 1] = True
    assert tr.loss(pred, labels, mask) == 9.0


def test_loss_matches_hand_formula():
    rng = np.random.default_rng(7)
    pred = rng.normal(size=(6, 6))
    labels = rng.normal(size=(6, 6))
    mask = rng.uniform(size=(6, 6)) < 0.5
    mask[0, 0] = True
    w1 = rng.normal(size=(2, 3))
    w2 = rng.normal(size=(4,))
    lam = 0.01

    expected = 0.0
    n = 0
    for i in range(6):
        for j in range(6):
            if mask[i, j]:
                expected += (pred[i, j] - labels[i, j]) ** 2
                n += 1
    expected /= n
    wsum = sum(float(x) ** 2 for x in list(w1.ravel()) + list(w2.ravel()))
    expected += lam * wsum / 10.0

    got = tr.loss(pred, labels, mask, weights=(w1, w2), l2_lambda=lam)
    assert abs(got - expected) < 1e-9


def test_loss_empty_mask_raises():
    z = np.zeros((2, 2))
    with pytest.raises(ValueError, match="mask"):
        tr.loss(z, z, np.zeros((2, 2), dtype=bool))


def test_loss_shape_mismatch_raises():
    with pytest.raises(ValueError):
        tr.loss(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), dtype=bool))


def test_loss_ignores_unmasked_pixels_bitwise():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(5, 5))
    labels = rng.normal(size=(5, 5))
    mask = rng.uniform(size=(5, 5)) < 0.4
    mask[2, 2] = True
    base = tr.loss(pred, labels, mask)

    messed = pred.copy()
    messed[~mask] = 1e9
    assert tr.loss(messed, labels, mask) == base


def test_loss_and_grad_masked_only():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(4, 4))
    labels = rng.normal(size=(4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 1] = mask[3, 2] = True
    value, grad = tr.loss_and_grad(pred, labels, mask)
    assert grad.shape == pred.shape
    assert np.all(grad[~mask] == 0.0)
    for (i, j) in [(0, 1), (3, 2)]:
        assert grad[i, j] == pytest.approx(2.0 * (pred[i, j] - labels[i, j]) / 2.0)
    assert value == pytest.approx(
        ((pred[mask] - labels[mask]) ** 2).mean(), rel=1e-12
    )


# ---------------------------------------------------------------------- adam


def test_adam_one_step_hand_value():
    theta = [np.array([0.0])]
    grads = [np.array([1.0])]
    state = tr.OptimizerState.for_params(theta)
    cfg = tr.TrainConfig()
    tr.adam_step(theta, grads, state, lr_t=0.1, config=cfg)
    assert state.t == 1
    expected = -0.1 / (1.0 + 1e-8)
    assert abs(theta[0][0] - expected) < 1e-12


def test_adam_momentum_free_limit_is_sign_step():
    # With both betas at 0 the update collapses to -lr * g / (|g| + eps).
    theta = [np.array([2.0])]
    grads = [np.array([-3.7])]
    state = tr.OptimizerState.for_params(theta)
    cfg = tr.TrainConfig(beta1=0.0, beta2=0.0, epsilon=1e-12)
    tr.adam_step(theta, grads, state, lr_t=0.05, config=cfg)
    assert theta[0][0] == pytest.approx(2.0 + 0.05, rel=1e-9)


def test_adam_matches_closed_form_100_draws():
    rng = np.random.default_rng(11)
    cfg = tr.TrainConfig(beta1=0.9, beta2=0.999, epsilon=1e-8)
    for _ in range(100):
        t = int(rng.integers(1, 50))
        theta = rng.normal(size=7)
        g = rng.normal(size=7) * 10.0 ** rng.integers(-3, 3)
        m0 = rng.normal(size=7)
        v0 = rng.uniform(0.0, 4.0, size=7)
        lr = float(10.0 ** rng.uniform(-5, -1))

        params = [theta.copy()]
        state = tr.OptimizerState(m=[m0.copy()], v=[v0.copy()], t=t - 1)
        tr.adam_step(params, [g.copy()], state, lr_t=lr, config=cfg)

        want_theta, want_m, want_v = adam_oracle(
            theta, g, m0, v0, t, lr, 0.9, 0.999, 1e-8
        )
        assert np.max(np.abs(params[0] - want_theta)) < 1e-12
        assert np.max(np.abs(state.m[0] - want_m)) < 1e-12
        assert np.max(np.abs(state.v[0] - want_v)) < 1e-12
        assert state.t == t


def test_adam_bias_correction_recovers_constant_gradient():
    # Identical consecutive gradients: corrected first moment equals g.
    g = 0.7
    theta = [np.array([0.0])]
    state = tr.OptimizerState.for_params(theta)
    cfg = tr.TrainConfig()
    for _ in range(2):
        tr.adam_step(theta, [np.array([g])], state, lr_t=0.0, config=cfg)
        mhat = state.m[0][0] / (1.0 - cfg.beta1 ** state.t)
        assert abs(mhat - g) < 1e-12


def test_adam_rejects_nan_gradient():
    theta = [np.array([0.0])]
    state = tr.OptimizerState.for_params(theta)
    with pytest.raises(ValueError, match="finite"):
        tr.adam_step(theta, [np.array([np.nan])], state, 0.1, tr.TrainConfig())


def test_adam_state_shapes_mirror_params():
    params = [np.zeros((2, 3)), np.zeros(5)]
    state = tr.OptimizerState.for_params(params)
    assert [m.shape for m in state.m] == [(2, 3), (5,)]
    assert [v.shape for v in state.v] == [(2, 3), (5,)]
    assert state.t == 0


# ------------------------------------------------------------------ clipping


def test_clip_gradients_examples():
    g = [np.array([1500.0, -0.5, 0.0, -2000.0])]
    out = tr.clip_gradients(g, max_abs=1000.0)
    assert out is g
    assert np.array_equal(g[0], np.array([1000.0, -0.5, 0.0, -1000.0]))


def test_clip_then_step_bounds_update():
    rng = np.random.default_rng(5)
    theta = [rng.normal(size=4)]
    before = theta[0].copy()
    g = [rng.normal(size=4) * 1e9]
    tr.clip_gradients(g, max_abs=1000.0)
    state = tr.OptimizerState.for_params(theta)
    cfg = tr.TrainConfig()
    tr.adam_step(theta, g, state, lr_t=cfg.lr, config=cfg)
    assert np.all(np.abs(theta[0] - before) <= cfg.lr * 1000.0 / cfg.epsilon)
    # the realistic bound at t=1: |step| < lr
    assert np.all(np.abs(theta[0] - before) < cfg.lr * (1.0 + 1e-6))


# ------------------------------------------------------------------ schedule


def test_lr_at_examples():
    cfg = tr.TrainConfig()
    assert tr.lr_at(0, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert tr.lr_at(399999, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert tr.lr_at(400000, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert tr.lr_at(699999, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert tr.lr_at(700000, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert tr.lr_at(10 ** 9, cfg) == pytest.approx(1e-6, rel=1e-12)


def test_lr_monotone_nonincreasing():
    cfg = tr.TrainConfig(milestones=(10, 20, 30), lr_gamma=0.5)
    values = [tr.lr_at(i, cfg) for i in range(0, 40)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# --------------------------------------------------------------------- split


def test_split_ten_gives_nine_one():
    samples = list(range(10))
    train, val = tr.split_train_val(samples, val_fraction=0.10, seed=0)
    assert len(train) == 9 and len(val) == 1


def test_split_rounds_half_up():
    train, val = tr.split_train_val(list(range(5)), val_fraction=0.10, seed=0)
    assert len(val) == 1  # round(0.5) -> 1
    train, val = tr.split_train_val(list(range(4)), val_fraction=0.10, seed=0)
    assert len(val) == 0  # round(0.4) -> 0


def test_split_is_deterministic_and_partitions():
    samples = list(range(23))
    a_train, a_val = tr.split_train_val(samples, val_fraction=0.3, seed=9)
    b_train, b_val = tr.split_train_val(samples, val_fraction=0.3, seed=9)
    assert a_train == b_train and a_val == b_val
    assert sorted(a_train + a_val) == samples
    assert set(a_train).isdisjoint(a_val)
    c_train, c_val = tr.split_train_val(samples, val_fraction=0.3, seed=10)
    assert (c_train, c_val) != (a_train, a_val)


def test_split_too_few_samples_raises():
    with pytest.raises(ValueError):
        tr.split_train_val([1], val_fraction=0.5, seed=0)


# ---------------------------------------------------------------- train loop


def test_train_linear_task_converges():
    rng = np.random.default_rng(12)
    samples = make_samples(30, 5, lambda p: 3.0 * p[0], rng)
    cfg = tr.TrainConfig(
        lr=1e-2, epochs=4, iters_per_epoch=50, batch_size=5,
        val_fraction=0.2, seed=0,
    )
    result = tr.train_loop(samples, cfg, model_config=ModelConfig(seed=3, **TINY_MODEL))
    assert len(result.trace) == 4
    assert result.trace[-1].train_loss < 0.1 * result.trace[0].train_loss


def test_train_constant_labels_val_rmse_below_one():
    rng = np.random.default_rng(13)
    samples = make_samples(20, 4, lambda p: np.full((4, 4), 42.0), rng)
    cfg = tr.TrainConfig(
        lr=0.5, epochs=4, iters_per_epoch=100, batch_size=5,
        val_fraction=0.1, seed=2,
    )
    result = tr.train_loop(samples, cfg, model_config=ModelConfig(seed=4, **TINY_MODEL))
    model = result.model
    errs = []
    for s in samples:
        pred, _, _ = model.forward(s.patch.astype(model.dtype))
        errs.append(pred[s.label_mask] - s.label_values[s.label_mask])
    rmse = float(np.sqrt(np.mean(np.concatenate(errs) ** 2)))
    assert rmse < 1.0


def test_train_returns_best_epoch_params():
    rng = np.random.default_rng(14)
    samples = make_samples(12, 4, lambda p: 2.0 * p[0] + 1.0, rng)
    cfg = tr.TrainConfig(
        lr=5e-3, epochs=5, iters_per_epoch=20, batch_size=4,
        val_fraction=0.25, seed=5,
    )
    result = tr.train_loop(samples, cfg, model_config=ModelConfig(seed=6, **TINY_MODEL))
    val_losses = [r.val_loss for r in result.trace]
    assert result.best_val_loss == min(val_losses)
    assert result.best_epoch == 1 + int(np.argmin(val_losses))
    # The returned parameters must reproduce the recorded best val loss.
    train_s, val_s = tr.split_train_val(samples, cfg.val_fraction, cfg.seed)
    recomputed = tr.evaluate_loss(result.model, val_s, cfg)
    assert recomputed == pytest.approx(result.best_val_loss, rel=1e-6)


def test_train_epochs_are_numbered_from_one():
    rng = np.random.default_rng(15)
    samples = make_samples(10, 4, lambda p: p[0], rng)
    cfg = tr.TrainConfig(epochs=3, iters_per_epoch=5, batch_size=2,
                         val_fraction=0.1, seed=0)
    result = tr.train_loop(samples, cfg, model_config=ModelConfig(seed=1, **TINY_MODEL))
    assert [r.epoch for r in result.trace] == [1, 2, 3]


def test_training_is_bit_deterministic():
    rng = np.random.default_rng(16)
    samples = make_samples(14, 4, lambda p: 5.0 * p[0], rng)
    cfg = tr.TrainConfig(lr=1e-3, epochs=2, iters_per_epoch=30, batch_size=3,
                         val_fraction=0.15, seed=7)
    mc = ModelConfig(seed=8, **TINY_MODEL)
    a = tr.train_loop(samples, cfg, model_config=mc)
    b = tr.train_loop(samples, cfg, model_config=mc)
    for (na, pa), (nb, pb) in zip(a.model.params(), b.model.params()):
        assert na == nb
        assert np.array_equal(pa, pb), na
    assert model_to_bytes(a.model) == model_to_bytes(b.model)
    assert [(r.train_loss, r.val_loss) for r in a.trace] == [
        (r.train_loss, r.val_loss) for r in b.trace
    ]


def test_l2_decay_shrinks_weights_monotonically():
    rng = np.random.default_rng(17)
    w = rng.uniform(0.5, 1.5, size=16) * rng.choice([-1.0, 1.0], size=16)
    params = [w]
    total = w.size
    lam = 0.1
    cfg = tr.TrainConfig(lr=1e-3)
    state = tr.OptimizerState.for_params(params)
    prev = np.abs(w).copy()
    signs = np.sign(w).copy()
    for _ in range(100):
        grads = [2.0 * lam / total * params[0]]
        tr.adam_step(params, grads, state, lr_t=cfg.lr, config=cfg)
        cur = np.abs(params[0])
        assert np.all(cur < prev)
        assert np.array_equal(np.sign(params[0]), signs)
        prev = cur.copy()


def test_train_l2_lambda_reduces_weight_norm():
    rng = np.random.default_rng(18)
    samples = make_samples(10, 4, lambda p: 3.0 * p[0], rng)
    mc = ModelConfig(seed=9, **TINY_MODEL)
    base = tr.TrainConfig(lr=1e-3, epochs=1, iters_per_epoch=80, batch_size=4,
                          val_fraction=0.1, seed=3)
    decayed = tr.TrainConfig(lr=1e-3, epochs=1, iters_per_epoch=80, batch_size=4,
                             val_fraction=0.1, seed=3, l2_lambda=100.0)

    def norm(model):
        return float(sum((a.astype(np.float64) ** 2).sum() for _, a in model.params()))

    a = tr.train_loop(samples, base, model_config=mc)
    b = tr.train_loop(samples, decayed, model_config=mc)
    assert norm(b.model) < norm(a.model)


def test_train_diverged_names_iteration_and_layer():
    rng = np.random.default_rng(19)
    samples = make_samples(8, 4, lambda p: p[0], rng)
    cfg = tr.TrainConfig(epochs=1, iters_per_epoch=5, batch_size=2,
                         val_fraction=0.2, seed=0)
    model = PyramidRegressor(1, ModelConfig(seed=2, **TINY_MODEL))
    dict(model.params())["entry0.weight"].reshape(-1)[0] = np.nan
    with pytest.raises(tr.TrainingDiverged) as err:
        tr.train_loop(samples, cfg, model=model)
    msg = str(err.value)
    assert "iteration 1" in msg
    assert "entry0.weight" in msg


def test_train_requires_validation_samples():
    rng = np.random.default_rng(20)
    samples = make_samples(4, 4, lambda p: p[0], rng)  # round(0.4) -> 0 val
    cfg = tr.TrainConfig(epochs=1, iters_per_epoch=2, val_fraction=0.1, seed=0)
    with pytest.raises(ValueError, match="validation"):
        tr.train_loop(samples, cfg, model_config=ModelConfig(seed=0, **TINY_MODEL))


def test_trace_csv_round_trip(tmp_path):
    trace = [
        tr.EpochRecord(epoch=1, train_loss=3.25, val_loss=2.125),
        tr.EpochRecord(epoch=2, train_loss=1.0 / 3.0, val_loss=0.1),
    ]
    path = tmp_path / "trace.csv"
    tr.write_trace_csv(str(path), trace)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3
    cells = lines[2].split(",")
    assert int(cells[0]) == 2
    assert float(cells[1]) == 1.0 / 3.0
    assert float(cells[2]) == 0.1
