import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionlab import blockmotion as BM
from motionlab.errors import SizeError
from motionlab.synth import SynthParams, synth_clip
from motionlab.video import Frame


def _pair(seed, size=64, smooth=True):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, size=(size, size)).astype(np.float64)
    if smooth:
        k = np.ones(5) / 5
        a = np.apply_along_axis(lambda v: np.convolve(v, k, "same"), 0, a)
        a = np.apply_along_axis(lambda v: np.convolve(v, k, "same"), 1, a)
    b = np.roll(a, (int(rng.integers(-4, 5)), int(rng.integers(-4, 5))), axis=(0, 1))
    b = b + rng.normal(0, 4, size=b.shape)
    return np.clip(a, 0, 255).astype(np.uint8), np.clip(b, 0, 255).astype(np.uint8)


def _naive_es(ref: np.ndarray, tgt: np.ndarray, mb: int, p: int):
    """Scalar-loop exhaustive search with the documented tie-break."""
    h, w = tgt.shape
    ref = ref.astype(np.int64)
    tgt = tgt.astype(np.int64)
    out = np.zeros((h // mb, w // mb, 2), np.int64)
    costs = np.zeros((h // mb, w // mb), np.int64)
    for by in range(h // mb):
        for bx in range(w // mb):
            y0, x0 = by * mb, bx * mb
            best = None
            for dy in range(-p, p + 1):
                for dx in range(-p, p + 1):
                    ry, rx = y0 - dy, x0 - dx
                    if ry < 0 or rx < 0 or ry + mb > h or rx + mb > w:
                        continue
                    sad = 0
                    for i in range(mb):
                        for j in range(mb):
                            sad += abs(tgt[y0 + i, x0 + j] - ref[ry + i, rx + j])
                    key = (sad, abs(dx) + abs(dy), dy, dx)
                    if best is None or key < best:
                        best = key
            out[by, bx] = (best[3], best[2])
            costs[by, bx] = best[0]
    return out, costs


def _interior(field, p=7):
    gh, gw = field.grid
    m = -(-p // field.block_w)
    return (slice(m, gh - m), slice(m, gw - m))


@pytest.mark.parametrize("algorithm", BM.ALGORITHMS)
def test_identical_frames_give_zero_field(algorithm):
    a, _ = _pair(0)
    f = BM.block_search(a, a, algorithm, 16, 7)
    assert np.all(f.vectors == 0) and np.all(f.costs == 0)


def test_es_recovers_global_shift():
    clip, _ = synth_clip("translate", 2, 96, 96, SynthParams(velocity=(3, -2)), seed=4)
    f = BM.block_search(clip.frames[0], clip.frames[1], "ES", 16, 7)
    sl = _interior(f)
    assert np.all(f.vectors[sl] == (3, -2))
    assert np.all(f.costs[sl] == 0)


def test_es_matches_scalar_oracle():
    a, b = _pair(3, size=24)
    f = BM.block_search(a, b, "ES", 8, 3)
    vec, cost = _naive_es(a.astype(np.int64), b.astype(np.int64), 8, 3)
    # luma of a 2D plane is the plane itself
    np.testing.assert_array_equal(f.vectors, vec)
    np.testing.assert_array_equal(f.costs, cost)


def test_es_eval_counts():
    a, b = _pair(1)
    f = BM.block_search(a, b, "ES", 16, 7)
    assert f.eval_counts.max() <= 225
    assert np.all(f.eval_counts[1:-1, 1:-1] == 225)
    assert f.eval_counts[0, 0] == 8 * 8


def test_tss_uses_25_candidates_on_interior_blocks():
    a, b = _pair(2, size=96)
    f = BM.block_search(a, b, "TSS", 16, 7)
    assert np.all(f.eval_counts[1:-1, 1:-1] == 25)


@pytest.mark.parametrize("seed", range(4))
def test_es_is_optimal_for_every_algorithm(seed):
    a, b = _pair(seed)
    es = BM.block_search(a, b, "ES", 16, 7)
    for alg in BM.ALGORITHMS[1:]:
        f = BM.block_search(a, b, alg, 16, 7)
        assert np.all(es.costs <= f.costs), alg
        assert np.abs(f.vectors).max() <= 7


def test_candidate_count_ordering():
    a, b = _pair(9)
    counts = {alg: BM.block_search(a, b, alg, 16, 7).eval_counts.mean() for alg in ("ES", "TSS", "ARPS")}
    assert counts["ES"] > counts["TSS"] and counts["ES"] > counts["ARPS"]


def test_block_larger_than_frame():
    with pytest.raises(SizeError):
        BM.block_search(np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8), "ES", 16, 7)


def test_non_multiple_frames_are_padded():
    a, b = _pair(5, size=40)
    f = BM.block_search(a[:37, :35], b[:37, :35], "DS", 16, 7)
    assert f.grid == (3, 3)
    assert BM.motion_compensate(Frame(a[:37, :35]), f).data.shape == (37, 35, 1)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.sampled_from(BM.ALGORITHMS), st.sampled_from([8, 16]), st.integers(1, 7))
def test_vectors_stay_in_range(seed, alg, mb, p):
    a, b = _pair(seed, size=32, smooth=False)
    f = BM.block_search(a, b, alg, mb, p)
    assert np.abs(f.vectors).max() <= p
    assert f.grid == (32 // mb, 32 // mb)


def test_worker_count_does_not_change_results(monkeypatch):
    a, b = _pair(7)
    monkeypatch.setenv("MOTIONLAB_THREADS", "1")
    one = [BM.block_search(a, b, alg, 8, 7) for alg in BM.ALGORITHMS]
    monkeypatch.setenv("MOTIONLAB_THREADS", "4")
    four = [BM.block_search(a, b, alg, 8, 7) for alg in BM.ALGORITHMS]
    for x, y in zip(one, four):
        assert x == y and np.array_equal(x.eval_counts, y.eval_counts)


# ---------------------------------------------------------------------------
# compensation


def test_zero_field_compensation_is_identity():
    a, _ = _pair(0)
    frame = Frame(np.stack([a] * 3, axis=-1))
    out = BM.motion_compensate(frame, BM.MotionField.zeros(64, 64, 16))
    assert out == frame


def test_compensation_reproduces_interior_of_shift():
    clip, _ = synth_clip("translate", 2, 96, 96, SynthParams(velocity=(-4, 5)), seed=8)
    ref, tgt = clip.frames
    f = BM.block_search(ref, tgt, "ES", 16, 7)
    pred = BM.motion_compensate(ref, f)
    np.testing.assert_array_equal(pred.data[16:80, 16:80], tgt.data[16:80, 16:80])


@pytest.mark.parametrize("seed", range(3))
def test_es_residual_is_minimal(seed):
    a, b = _pair(seed + 20)
    ref, tgt = Frame(a), Frame(b)
    es = BM.residual_energy(tgt, BM.motion_compensate(ref, BM.block_search(ref, tgt, "ES", 16, 7)))
    for alg in BM.ALGORITHMS[1:]:
        other = BM.residual_energy(tgt, BM.motion_compensate(ref, BM.block_search(ref, tgt, alg, 16, 7)))
        assert es <= other, alg


def test_compensation_indices_drive_a_gather():
    a, b = _pair(11)
    f = BM.block_search(a, b, "ES", 8, 7)
    rows, cols = BM.compensation_indices(f)
    np.testing.assert_array_equal(a[rows, cols], BM.motion_compensate(Frame(a), f).data[..., 0])


# ---------------------------------------------------------------------------
# dense flow


def test_dense_flow_identical_and_translation():
    clip, _ = synth_clip("translate", 2, 64, 64, SynthParams(velocity=(2, 1)), seed=1)
    a, b = clip.frames
    assert np.all(BM.dense_flow(a, a).vectors == 0)
    f = BM.dense_flow(a, b)
    assert f.block_w == 4
    assert np.all(f.vectors[2:-2, 2:-2] == (2, 1))
