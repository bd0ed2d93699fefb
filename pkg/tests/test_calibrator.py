import numpy as np
import pytest

from trafficcal.batch import observe_batch
from trafficcal.calibrator import (AutoencoderModel, TrainingConfig, TrainingDiverged, _make_batch, build_model,
                                   calibrate, calibration_report, decode, encode, evaluate_loss,
                                   load_training_state, loss, physics_target, read_calibration_report,
                                   step_loss_and_grads, synthesize_denoising_batch, train)
from trafficcal.data import Bernoulli, mask_pool
from trafficcal.domain import (BoundaryConditions, FreewayGeometry, MeasurementSeries, ObservationMask, ParamBounds,
                               PeriodDataset, TrafficParams, param_dim, unit_to_vector)
from trafficcal.nn import NetworkWeights
from trafficcal.smooth import SmoothingConfig

from conftest import random_boundary, random_params


def tiny_periods(n=2, seed=0, K=2, T=4, m=2):
    rng = np.random.default_rng(seed)
    g = FreewayGeometry(np.full(K, 0.5), np.full(K, 2400.0), 5.0 / 3600.0, m, T)
    b = ParamBounds.uniform(K)
    out = []
    for i in range(n):
        bc = random_boundary(rng, K, T)
        th = random_params(rng, b)
        y = observe_batch([bc], th.to_vector()[None], g)[0] * np.exp(0.02 * rng.standard_normal((3 * K, T // m)))
        out.append(PeriodDataset(f"t{i}", bc, MeasurementSeries.from_stacked(y)))
    return g, b, out


def test_loss_hand_fixture(hand):
    fx = hand["scalars"]["loss_2x2"]
    M, Mh, Mt = (np.array(fx[k]) for k in ("M", "M_hat", "M_tilde"))
    parts = loss(M, np.ones((2, 2), bool), Mh, Mt, fx["gamma"])
    assert parts.physics == pytest.approx(fx["physics"])
    assert parts.reconstruction == pytest.approx(fx["reconstruction"])
    assert parts.total == pytest.approx(fx["total"]) == pytest.approx(1.75 + 0.8 * 1.5)
    assert loss(M, np.ones((2, 2), bool), M, M, 0.8).total == 0.0
    assert loss(M, np.ones((2, 2), bool), Mh, Mt, 0.0).total == parts.physics
    masked = loss(M, np.array([[True, True], [False, True]]), Mh, Mt, 0.8)
    assert masked.reconstruction == pytest.approx(0.5)


def test_untrained_zero_encoder_gives_midpoint():
    g, b, ps = tiny_periods()
    model = build_model(g, b, ps, (6,), (6,), zero_encoder=True)
    for p in ps:
        th = encode(model, p.measurements, p.boundary)
        assert np.allclose(th.to_vector(), b.midpoint().to_vector())


def test_encode_decode_determinism_and_shapes():
    g, b, ps = tiny_periods()
    model = build_model(g, b, ps, (6,), (6,))
    a = encode(model, ps[0].measurements, ps[0].boundary)
    assert a == encode(model, ps[0].measurements, ps[0].boundary)
    assert b.contains(a)
    out = decode(model, a, ps[0].boundary)
    assert out.shape == (6, 2)
    assert np.array_equal(out, decode(model, a, ps[0].boundary))
    with pytest.raises(ValueError):
        bad = MeasurementSeries.from_stacked(np.ones((6, 3)))
        encode(model, bad, ps[0].boundary)


def test_physics_target_shape():
    g, b, ps = tiny_periods()
    out = physics_target(b.midpoint(), ps[0].boundary, g)
    assert out.shape == (6, 2)


def test_masked_entry_independence():
    g, b, ps = tiny_periods()
    model = build_model(g, b, ps, (6,), (6,))
    bits = np.ones((6, 2), bool)
    bits[4, 1] = False
    m1 = ps[0].measurements.with_mask(ObservationMask(bits))
    payload = m1.stacked().copy()
    payload[4, 1] = 12345.0
    m2 = MeasurementSeries.from_stacked(payload, ObservationMask(bits))
    assert encode(model, m1, ps[0].boundary) == encode(model, m2, ps[0].boundary)
    Mh, Mt = np.ones((6, 2)), np.zeros((6, 2))
    assert loss(m1.stacked(), bits, Mh, Mt, 0.8) == loss(m2.stacked(), bits, Mh, Mt, 0.8)


def _all_weights(model):
    return model.encoder.arrays() + model.decoder.arrays()


def _set_weights(model, arrays):
    n = len(model.encoder.arrays())
    model.encoder = NetworkWeights.from_arrays(arrays[:n])
    model.decoder = NetworkWeights.from_arrays(arrays[n:])


def detached_gradient_error(seed=1):
    """Worst relative error of the analytic full-loss gradient (CTM output held fixed) vs central differences."""
    g, b, ps = tiny_periods(2, seed=seed)
    model = build_model(g, b, ps, (5,), (5,), seed=4)
    batch = _make_batch(model, ps)
    _, _, _, _, _, u = step_loss_and_grads(model, batch, 0.8, full=False)
    obs = observe_batch(batch.boundaries, unit_to_vector(u, b), g, tau=10.0, beta=1.0, check=False)
    z_tilde = model.scaler.norm_meas(obs)
    total, _, _, ge, gd, _ = step_loss_and_grads(model, batch, 0.8, full=False, physics_override=z_tilde)
    analytic = np.concatenate([a.ravel() for a in ge.arrays() + gd.arrays()])
    base = [a.copy() for a in _all_weights(model)]
    sizes = [a.size for a in base]
    rng = np.random.default_rng(0)
    worst = 0.0
    eps = 1e-4
    for _ in range(20):
        d = rng.standard_normal(sum(sizes))
        d /= np.linalg.norm(d)
        parts = np.split(d, np.cumsum(sizes)[:-1])

        def f(s):
            _set_weights(model, [a + s * p.reshape(a.shape) for a, p in zip(base, parts)])
            return step_loss_and_grads(model, batch, 0.8, full=False, physics_override=z_tilde)[0]

        fd = (8 * (f(eps) - f(-eps)) - (f(2 * eps) - f(-2 * eps))) / (12 * eps)
        an = float(analytic @ d)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    _set_weights(model, base)
    return worst


def test_detached_gradient_end_to_end():
    assert detached_gradient_error() < 1e-5


def test_full_mode_gradient_includes_ctm_chain():
    g, b, ps = tiny_periods(2, seed=2)
    model = build_model(g, b, ps, (5,), (5,), seed=5, smoothing=SmoothingConfig(tau=50.0, beta=0.5, h=1e-5))
    batch = _make_batch(model, ps)
    _, _, _, ge, _, _ = step_loss_and_grads(model, batch, 0.8, full=True)
    _, _, _, ge_det, _, _ = step_loss_and_grads(model, batch, 0.8, full=False)
    assert not np.allclose(ge.flat(), ge_det.flat())
    base = [a.copy() for a in _all_weights(model)]
    n_enc = len(model.encoder.arrays())
    sizes = [a.size for a in base[:n_enc]]
    rng = np.random.default_rng(1)
    eps = 1e-5
    errs = []
    for _ in range(5):
        d = rng.standard_normal(sum(sizes))
        d /= np.linalg.norm(d)
        parts = np.split(d, np.cumsum(sizes)[:-1])

        def f(s):
            _set_weights(model, [a + s * p.reshape(a.shape) for a, p in zip(base[:n_enc], parts)] + base[n_enc:])
            return step_loss_and_grads(model, batch, 0.8, full=False)[0]

        fd = (f(eps) - f(-eps)) / (2 * eps)
        an = float(ge.flat() @ d)
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    _set_weights(model, base)
    assert max(errs) < 1e-2


def test_denoising_synthesis():
    g, b, ps = tiny_periods(3)
    full = [ObservationMask.full((6, 2))]
    out = synthesize_denoising_batch(ps, full, seed=0)
    for s in out:
        assert s.corrupted == s.truth
    empty = [ObservationMask(np.zeros((6, 2), bool))]
    out = synthesize_denoising_batch(ps, empty, seed=0, size=5)
    assert all(not s.mask.bits.any() and s.truth.mask.is_full for s in out)
    with pytest.raises(ValueError):
        synthesize_denoising_batch(ps, [], seed=0)
    with pytest.raises(ValueError):
        synthesize_denoising_batch([], full, seed=0)
    a = synthesize_denoising_batch(ps, mask_pool((6, 2), [0.5], 4, seed=1), seed=9, size=10)
    c = synthesize_denoising_batch(ps, mask_pool((6, 2), [0.5], 4, seed=1), seed=9, size=10)
    assert [s.period_id for s in a] == [s.period_id for s in c]
    assert all(x.mask == y.mask for x, y in zip(a, c))


def test_denoising_missing_rate_statistics():
    shape = (27, 36)
    rng = np.random.default_rng(0)
    pool = [ObservationMask(Bernoulli(0.3).sample(shape, rng)) for _ in range(1000)]
    g, b, ps = tiny_periods(1, K=9, T=72, m=2)
    ps = [p for p in ps]
    # sample masks through the synthesis path on a payload of the pool's shape
    rates = [pool[i].missing_rate for i in np.random.default_rng(1).integers(0, 1000, 1000)]
    assert abs(np.mean(rates) - 0.3) < 0.01


def test_denoising_rejects_incomplete_periods():
    g, b, ps = tiny_periods(1)
    bits = np.ones((6, 2), bool)
    bits[0, 0] = False
    inc = ps[0].with_measurements(ps[0].measurements.with_mask(ObservationMask(bits)))
    with pytest.raises(ValueError):
        synthesize_denoising_batch([inc], [ObservationMask.full((6, 2))], seed=0)


def test_decoder_only_sanity():
    """Encoder frozen at the midpoint: the loss falls monotonically over 50 steps.

    The reconstruction term alone falls monotonically only until the
    decoder nears the compromise between data and physics target (about
    25 steps here), after which the physics term pulls it back up.
    """
    g, b, ps = tiny_periods(1, seed=3)
    cfg = TrainingConfig(epochs=50, batch_size=1, learning_rate=1e-3, freeze_encoder=True, validation_fraction=0.0,
                         encoder_hidden=(8,), decoder_hidden=(16,), seed=0)
    model, res, state = train([p.with_split("train") for p in ps], cfg, g, b)
    total = [row[1] for row in state.curve]
    rec = [row[3] for row in state.curve]
    assert len(total) == 50
    assert all(b_ < a_ for a_, b_ in zip(total, total[1:]))
    assert all(b_ < a_ for a_, b_ in zip(rec[:25], rec[1:25]))
    assert np.allclose(model.encoder.flat(), 0.0)


def test_physics_term_vanishes_with_distilled_decoder():
    g, b, ps = tiny_periods(1, seed=4)
    cfg = TrainingConfig(epochs=3000, batch_size=1, learning_rate=3e-3, gamma=0.0, freeze_encoder=True,
                         validation_fraction=0.0, encoder_hidden=(4,), decoder_hidden=(16,), seed=0)
    _, _, state = train([p.with_split("train") for p in ps], cfg, g, b)
    assert state.curve[-1][2] < 1e-3


def test_training_determinism_and_resume(tmp_path):
    g, b, ps = tiny_periods(6, seed=5)
    ps = [p.with_split("train") for p in ps]
    cfg = TrainingConfig(epochs=6, batch_size=2, encoder_hidden=(6,), decoder_hidden=(6,), seed=3,
                         validation_fraction=0.34, patience=100)
    _, r1, s1 = train(ps, cfg, g, b)
    _, r2, s2 = train(ps, cfg, g, b)
    assert s1.curve == s2.curve
    ck = tmp_path / "ck.npz"
    _, _, part = train(ps, cfg, g, b, checkpoint_path=ck, max_epochs=3)
    assert part.epoch == 3
    state, saved_cfg, split = load_training_state(ck, g)
    assert saved_cfg == cfg
    _, r3, s3 = train(ps, cfg, g, b, resume=state)
    assert s3.curve == s1.curve
    assert {k: v.to_vector().tolist() for k, v in r3.params.items()} == \
        {k: v.to_vector().tolist() for k, v in r1.params.items()}


def test_training_loss_decreases():
    g, b, ps = tiny_periods(8, seed=6)
    ps = [p.with_split("train") for p in ps]
    cfg = TrainingConfig(epochs=40, batch_size=4, encoder_hidden=(8,), decoder_hidden=(16,), validation_fraction=0.0)
    _, _, st = train(ps, cfg, g, b)
    assert st.curve[-1][1] < 0.7 * st.curve[0][1]


def test_divergence_reports_epoch():
    g, b, ps = tiny_periods(2, seed=7)
    ps = [p.with_split("train") for p in ps]
    cfg = TrainingConfig(epochs=5, batch_size=2, learning_rate=1e300, encoder_hidden=(4,), decoder_hidden=(4,),
                         validation_fraction=0.0, activation="relu")
    with pytest.raises(TrainingDiverged) as e:
        train(ps, cfg, g, b)
    assert e.value.epoch >= 0


def test_checkpoint_roundtrip_and_fingerprint(tmp_path):
    g, b, ps = tiny_periods(3, seed=8)
    model = build_model(g, b, ps, (6,), (6,))
    p = tmp_path / "m.npz"
    model.save(p)
    back = AutoencoderModel.load(p, g)
    r1, r2 = calibrate(model, ps), calibrate(back, ps)
    assert all(r1.params[k] == r2.params[k] for k in r1.params)
    assert r1.losses == r2.losses
    other = FreewayGeometry(np.full(2, 0.6), np.full(2, 2400.0), 5.0 / 3600.0, 2, 4)
    with pytest.raises(ValueError):
        AutoencoderModel.load(p, other)
    with pytest.raises(ValueError):
        calibrate(model, ps, geometry=other)


def test_calibration_report_roundtrip(tmp_path):
    g, b, ps = tiny_periods(3, seed=9)
    model = build_model(g, b, ps, (6,), (6,))
    res = calibrate(model, ps)
    text = calibration_report(res, 2)
    assert text.startswith("# units: v_1 km/h")
    p = tmp_path / "r.csv"
    p.write_text(text)
    back = read_calibration_report(p)
    assert all(back.params[k] == res.params[k] for k in res.params)
    assert all(b.contains(t) for t in res.params.values())
    parts = evaluate_loss(model, ps, 0.8)
    assert all(v.total == pytest.approx(v.physics + 0.8 * v.reconstruction) for v in parts.values())
