import math

import numpy as np
import pytest

from motionlab import nets
from motionlab import tensor as T
from motionlab.blockmotion import MotionField
from motionlab.errors import ArityError, ConfigError, ShapeError, StateError
from motionlab.synth import SynthParams, synth_clip
from motionlab.tensor import Tensor


def _small(**kw):
    kw.setdefault("base_channels", 8)
    kw.setdefault("c_bnd", 4)
    return nets.NetConfig(**kw)


def _clip(kind="P", size=32, seed=0):
    n = 17 if kind == "P" else 18
    return synth_clip("translate", n, size, size, SynthParams(velocity=(1, -1)), seed=seed)[0]


# ---------------------------------------------------------------------------
# configuration and parameters


@pytest.mark.parametrize("kw", [{"levels": 2}, {"c_bnd": 0}, {"kind": "X"}, {"base_channels": 6}, {"dba": True, "c_bnd": 4, "quant_levels": 8}])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        nets.NetConfig(**kw)


def test_widths_and_gop_lengths():
    cfg = nets.NetConfig()
    assert cfg.widths == (8, 16, 32)
    assert cfg.gop_length == 17 and nets.NetConfig(kind="B").gop_length == 18


def test_branch_widths():
    assert nets.branch_widths(24) == (8, 8, 8)
    assert nets.branch_widths(8) == (4, 2, 2)
    assert sum(nets.branch_widths(32)) == 32


def test_b_kind_has_two_conditioning_networks():
    p = nets.init_params(_small(kind="B"))
    assert any(k.startswith("cond0.") for k in p) and any(k.startswith("condt.") for k in p)
    assert not any(k.startswith("cond") for k in nets.init_params(_small(conditioned=False)))


def test_init_is_seeded():
    a, b = nets.init_params(_small(), 3), nets.init_params(_small(), 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = nets.init_params(_small(), 4)
    assert not np.array_equal(a["enc.stem.w"].data, c["enc.stem.w"].data)


def test_checkpoint_round_trip(tmp_path):
    cfg = _small(kind="B", dba=True, quant_levels=4)
    params = nets.init_params(cfg, 2)
    nets.save_model(tmp_path / "m.mlab", cfg, params)
    cfg2, params2 = nets.load_model(tmp_path / "m.mlab")
    assert cfg2 == cfg
    assert all(np.array_equal(params[k].data, params2[k].data) for k in params)
    with pytest.raises(ConfigError):
        nets.load_model(tmp_path / "missing.mlab")


def test_extend_params_keeps_shared_tensors():
    base_cfg = _small(c_bnd=8)
    base = nets.init_params(base_cfg, 1)
    ext = nets.extend_params(nets.replace_cfg(base_cfg, dba=True, quant_levels=8), base, seed=5)
    assert "imp.out.w" in ext
    assert all(np.array_equal(ext[k].data, base[k].data) for k in base)


# ---------------------------------------------------------------------------
# building blocks


def test_multiscale_block_shape_and_zero_fuse(rng):
    w = 24
    params = {}
    for j, bw in enumerate(nets.branch_widths(w)):
        params[f"ms.b{j}.w"] = Tensor(rng.normal(0, 0.1, size=(bw, 8, 3, 3, 3)))
        params[f"ms.b{j}.b"] = Tensor(np.zeros(bw))
    params["ms.fuse.w"] = Tensor(rng.normal(0, 0.1, size=(w, w, 1, 1, 1)))
    params["ms.fuse.b"] = Tensor(np.zeros(w))
    x = Tensor(rng.normal(size=(1, 8, 8, 16, 16)))
    assert nets.multiscale_block(x, params, "ms", width=w).shape == (1, 24, 8, 16, 16)
    params["ms.fuse.w"] = Tensor(np.zeros((w, w, 1, 1, 1)))
    assert np.all(nets.multiscale_block(x, params, "ms").data == 0)


def test_receptive_fields():
    assert nets.receptive_field([d[1] for d in nets.DILATIONS]) == 9
    assert nets.receptive_field([1, 1, 1]) == 3


def test_multiscale_block_reaches_four_pixels_away(rng):
    w = 6
    params = {}
    for j, bw in enumerate(nets.branch_widths(w)):
        params[f"ms.b{j}.w"] = Tensor(np.abs(rng.normal(size=(bw, 1, 3, 3, 3))))
        params[f"ms.b{j}.b"] = Tensor(np.zeros(bw))
    params["ms.fuse.w"] = Tensor(np.abs(rng.normal(size=(w, w, 1, 1, 1))))
    params["ms.fuse.b"] = Tensor(np.zeros(w))
    x = np.zeros((1, 1, 1, 17, 17))
    x[0, 0, 0, 8, 8] = 1.0
    out = nets.multiscale_block(Tensor(x), params, "ms").data[0, 0, 0]
    cols = np.nonzero(out[8])[0]
    assert cols.min() == 4 and cols.max() == 12


def test_time_ramp():
    r = nets.time_ramp(3, 24, 18)
    np.testing.assert_allclose(r, [3.5 / 17, 11.5 / 17, 1.0])
    assert nets.time_ramp(24, 24, 18)[0] == 0.0


# ---------------------------------------------------------------------------
# encoder, conditioning, decoder


def test_code_shape_and_values():
    cfg = nets.NetConfig(c_bnd=8)
    params = nets.init_params(cfg, 0)
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 3, 24, 64, 64)).astype(np.float32)
    code = nets.encode_motion(x, params, cfg)
    assert code.shape == (1, 8, 3, 8, 8) and code.data.size == 1536
    assert set(np.unique(code.data)) <= {-1.0, 1.0}
    assert np.array_equal(code.data, nets.encode_motion(x, params, cfg).data)


def test_unpadded_input_rejected():
    cfg = _small()
    with pytest.raises(ShapeError):
        nets.encode_motion(np.zeros((1, 3, 17, 32, 32), np.float32), nets.init_params(cfg), cfg)


def test_pyramid_sizes_and_arity():
    cfg = nets.NetConfig(c_bnd=8)
    params = nets.init_params(cfg)
    frame = _clip(size=64).frames[0]
    pyr = nets.condition_features([frame], params, cfg)[0]
    assert [p.shape[3] for p in pyr] == [64, 32, 16, 8]
    bcfg = nets.replace_cfg(cfg, kind="B")
    with pytest.raises(ArityError):
        nets.condition_features([frame], nets.init_params(bcfg), bcfg)


def test_zero_conditioning_weights_give_zero_pyramids():
    cfg = _small(kind="B")
    params = nets.with_zero_conditioning(cfg, nets.init_params(cfg))
    frames = _clip("B").frames
    for pyr in nets.condition_features([frames[0], frames[-1]], params, cfg):
        assert all(np.all(p.data == 0) for p in pyr)


def test_zeroed_conditioning_equals_unconditioned_model():
    cfg = _small()
    params = nets.with_zero_conditioning(cfg, nets.init_params(cfg, 1))
    clip = _clip()
    a = nets.predict_clip(clip, params, cfg).frames
    plain = {k: v for k, v in params.items() if not k.startswith("cond")}
    b = nets.predict_clip(clip, plain, nets.replace_cfg(cfg, conditioned=False)).frames
    np.testing.assert_array_equal(a, b)


def test_decoder_output_geometry():
    cfg = nets.NetConfig(c_bnd=8)
    params = nets.init_params(cfg)
    frame = _clip(size=64).frames[0]
    pyr = nets.condition_features([frame], params, cfg)
    code = Tensor(np.random.default_rng(0).choice([-1.0, 1.0], size=(1, 8, 3, 8, 8)).astype(np.float32))
    out = nets.decode_frames(code, pyr, params, cfg)
    assert out.shape == (1, 3, 24, 64, 64)
    assert np.all(np.abs(out.data) < 1)
    with pytest.raises(ShapeError):
        nets.decode_frames(Tensor(np.zeros((1, 8, 3, 4, 4), np.float32)), pyr, params, cfg)


def test_zero_code_output_depends_only_on_iframe():
    cfg = _small()
    params = nets.init_params(cfg, 2)
    a, b = _clip(seed=1), _clip(seed=2)
    zero = np.zeros((4, 3, 4, 4), np.float32)  # c_bnd x 24/8 x 32/8 x 32/8
    pa = nets.predict_clip(a, params, cfg, code=zero).frames
    # same I-frame, different referencing frames
    mixed = a.__class__((a.frames[0],) + b.frames[1:])
    np.testing.assert_array_equal(pa, nets.predict_clip(mixed, params, cfg, code=zero).frames)
    assert not np.array_equal(pa, nets.predict_clip(b, params, cfg, code=zero).frames)


def test_fully_convolutional():
    cfg = _small()
    params = nets.init_params(cfg)
    small = nets.predict_clip(_clip(size=32), params, cfg)
    large = nets.predict_clip(_clip(size=64), params, cfg)
    assert small.frames.shape == (16, 32, 32, 3) and large.frames.shape == (16, 64, 64, 3)
    assert small.code.shape[2:] == (4, 4) and large.code.shape[2:] == (8, 8)


def test_eval_round_trip_is_deterministic(monkeypatch):
    cfg = _small(kind="B", dba=True, quant_levels=2)
    params = nets.init_params(cfg, 3)
    clip = _clip("B")
    monkeypatch.setenv("MOTIONLAB_THREADS", "1")
    a = nets.predict_clip(clip, params, cfg)
    monkeypatch.setenv("MOTIONLAB_THREADS", "4")
    b = nets.predict_clip(clip, params, cfg)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.code, b.code) and np.array_equal(a.q, b.q)


# ---------------------------------------------------------------------------
# losses


def test_reconstruction_loss_examples(rng):
    a = rng.uniform(-1, 1, size=(1, 3, 2, 4, 4))
    assert nets.loss_reconstruction(Tensor(a), a).item() == 0.0
    assert nets.loss_reconstruction(Tensor(a + 0.1), a).item() == pytest.approx(0.01)
    b = rng.uniform(-1, 1, size=a.shape)
    total = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        total += (u - v) ** 2
    assert nets.loss_reconstruction(Tensor(a), b).item() == pytest.approx(total / a.size, abs=1e-6)
    with pytest.raises(ShapeError):
        nets.loss_reconstruction(Tensor(a), b[:, :, :1])


def _one(v, w=40, h=30):
    vec = np.zeros((1, 1, 2), np.int64)
    vec[0, 0] = v
    return MotionField(w, h, w, h, vec)


def test_flow_loss_examples():
    f = _one((3, 4))
    assert nets.loss_flow(f, f, "epe") == 0.0 and nets.loss_flow(f, f, "cosine") == 0.0
    assert nets.loss_flow(_one((1, 0)), _one((-1, 0)), "cosine") == pytest.approx(2.0)
    assert nets.loss_flow(_one((0, 0)), f, "epe") == pytest.approx(math.hypot(3 / 40, 4 / 30))
    assert nets.loss_flow(_one((0, 0)), f, "cosine") == 0.0
    with pytest.raises(ShapeError):
        nets.loss_flow([f], [f, f])


def test_flow_term_value_matches_metric():
    cfg = _small()
    params = nets.init_params(cfg)
    x, n, hw = nets.prepare_clip(_clip(), cfg)
    res = nets.forward(x, params, cfg)
    term, value = nets.flow_term(res.pred, x, (1, 17), hw)
    assert term.item() == pytest.approx(value, rel=1e-6)
    seq = np.concatenate([x[0, :, :1, : hw[0], : hw[1]], res.pred.data[0, :, 1:17, : hw[0], : hw[1]]], axis=1)
    expect = nets.loss_flow(nets.sequence_flows(seq), nets.sequence_flows(x[0, :, :17, : hw[0], : hw[1]]))
    assert value == pytest.approx(expect)


def test_gradient_on_sampled_parameters():
    """Finite differences on 50 parameters downstream of the binarizer."""
    cfg = _small(base_channels=4, c_bnd=2, kind="B")
    params = nets.init_params(cfg, 7, dtype=np.float64)
    x, _, hw = nets.prepare_clip(_clip("B", size=16), cfg)
    x = x.astype(np.float64)
    sched = nets.TrainSchedule()

    def loss():
        return nets.step_losses(x, params, cfg, sched, "eval", 0, hw)[0]

    for p in params.values():
        p.zero_grad()
    T.backward(loss())
    rng = np.random.default_rng(0)
    names = sorted(k for k in params if k.startswith(("dec.", "cond")))
    eps = 1e-5
    checked = 0
    while checked < 50:
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[idx]
        p.data[idx] = old + eps
        up = loss().item()
        p.data[idx] = old - eps
        down = loss().item()
        p.data[idx] = old
        fd = (up - down) / (2 * eps)
        an = p.grad[idx]
        assert abs(an - fd) <= 1e-2 * max(abs(fd), abs(an), 1e-6), (name, idx, an, fd)
        checked += 1


# ---------------------------------------------------------------------------
# training


def test_static_clip_is_learned_in_300_steps():
    clip, _ = synth_clip("static", 17, 32, 32, seed=0)
    res = nets.train([clip], _small(), nets.TrainSchedule(epochs=300, seed=0))
    assert res.log[-1]["L_R"] < 0.1 * res.log[0]["L_R"]


def test_zero_lambda_total_equals_reconstruction_loss():
    cfg = _small(dba=True, quant_levels=4)
    res = nets.train([_clip()], cfg, nets.TrainSchedule(epochs=2, lam=0.0))
    assert all(r["total"] == r["L_R"] for r in res.log)
    assert all(r["L_B"] > 0 for r in res.log)


def test_training_is_reproducible(tmp_path):
    cfg = _small(dba=True, quant_levels=2)
    clips = [_clip(seed=s) for s in range(2)]
    sched = nets.TrainSchedule(epochs=2, lam=1e-4, seed=3)
    a = nets.train(clips, cfg, sched, [_clip(seed=9)], checkpoint=tmp_path / "a.mlab", log_path=tmp_path / "a.csv")
    b = nets.train(clips, cfg, sched, [_clip(seed=9)], log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    _, saved = nets.load_model(tmp_path / "a.mlab")
    assert all(np.array_equal(saved[k].data, a.params[k].data) for k in saved)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "step,lr,L_R,L_B,L_F,total"


def test_nan_loss_names_the_step():
    cfg = _small()
    params = nets.init_params(cfg)
    params["dec.final.b"].data[:] = np.nan
    with pytest.raises(StateError, match="step 0"):
        nets.train([_clip()], cfg, nets.TrainSchedule(epochs=1), init=params)


def test_flow_loss_enters_total():
    res = nets.train([_clip()], _small(), nets.TrainSchedule(epochs=1, alpha=0.0))
    row = res.log[0]
    assert row["L_F"] > 0
    assert row["total"] == pytest.approx(row["L_R"] + row["L_F"], rel=1e-5)


def test_training_needs_clips():
    with pytest.raises(ConfigError):
        nets.train([], _small(), nets.TrainSchedule(epochs=1))
