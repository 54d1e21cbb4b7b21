import numpy as np
import pytest

from rrcnn_core import (Architecture, BlockParams, ModelParams, RecursionParams, ShapeError, WeightsFormatError,
                        architecture_of, block_forward, cascade_forward, conv1d_filter_grad, conv1d_same, decompose,
                        export_filters_csv, init_params, load_weights, predict_batch, save_weights, softmax)
from signal_lab import Signal


def _zero_params(blocks=2, k=5, depth=2):
    return ModelParams([BlockParams([RecursionParams(np.zeros(k), np.zeros(k)) for _ in range(depth)])
                        for _ in range(blocks)])


def _reference_block(x, p):
    """Loop evaluator written straight from the recursion definition."""
    current = np.array(x, dtype=float)
    n = current.size
    for rec in p.recursions:
        k1, k2 = rec.w1.size, rec.w2_raw.size
        w2 = np.exp(rec.w2_raw) / np.exp(rec.w2_raw).sum()
        c1 = np.zeros(n)
        for t in range(n):
            acc = 0.0
            for i in range(k1):
                j = t - k1 // 2 + i
                if 0 <= j < n:
                    acc += current[j] * rec.w1[i]
            c1[t] = np.tanh(acc)
        c2 = np.zeros(n)
        for t in range(n):
            for i in range(k2):
                j = t - k2 // 2 + i
                if 0 <= j < n:
                    c2[t] += c1[j] * w2[i]
        current = current - c2
    return current


def test_conv_identity_filter():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(conv1d_same(x, [0.0, 1.0, 0.0]), x)


def test_conv_zero_pads_edges():
    out = conv1d_same(np.array([1.0, 2.0, 3.0, 4.0]), [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(out, [3.0, 6.0, 9.0, 7.0])


def test_conv_shift_direction():
    out = conv1d_same(np.array([0.0, 1.0, 0.0, 0.0]), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(out, [1.0, 0.0, 0.0, 0.0])


def test_conv_matches_numpy_correlation(rng):
    x = rng.standard_normal(64)
    w = rng.standard_normal(9)
    np.testing.assert_allclose(conv1d_same(x, w), np.convolve(x, w[::-1], "same"), atol=1e-12)


def test_conv_over_batch_axes(rng):
    x = rng.standard_normal((3, 2, 40))
    w = rng.standard_normal(7)
    out = conv1d_same(x, w)
    assert out.shape == x.shape
    np.testing.assert_allclose(out[2, 1], conv1d_same(x[2, 1], w), atol=1e-14)


def test_conv_rejects_long_filter():
    with pytest.raises(ShapeError):
        conv1d_same(np.zeros(4), np.ones(5))


def test_conv_adjoint_identity(rng):
    x = rng.standard_normal(50)
    g = rng.standard_normal(50)
    w = rng.standard_normal(11)
    lhs = np.dot(g, conv1d_same(x, w))
    rhs = np.dot(conv1d_same(g, w[::-1]), x)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_filter_grad_matches_directional_derivative(rng):
    x = rng.standard_normal((2, 30))
    g = rng.standard_normal((2, 30))
    w = rng.standard_normal(5)
    direction = rng.standard_normal(5)
    grad = conv1d_filter_grad(x, g, 5)
    # the map w -> sum(g * conv(x, w)) is linear, so the difference is exact
    change = np.sum(g * conv1d_same(x, w + direction)) - np.sum(g * conv1d_same(x, w))
    assert np.dot(grad, direction) == pytest.approx(change, rel=1e-10)


def test_filter_grad_sums_over_batch_axes(rng):
    x = rng.standard_normal((2, 3, 24))
    g = rng.standard_normal((2, 3, 24))
    grad = conv1d_filter_grad(x, g, 7)
    assert grad.shape == (7,)
    rows = sum(conv1d_filter_grad(x[i, j], g[i, j], 7) for i in range(2) for j in range(3))
    np.testing.assert_allclose(grad, rows, rtol=1e-12, atol=1e-12)


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 1.0])), [0.25, 0.5, 0.25])
    v = np.array([0.5, -1.25, 2.0])
    np.testing.assert_allclose(softmax(v + 1000.0), softmax(v), rtol=1e-14)
    assert np.all(softmax(np.array([-800.0, 0.0])) >= 0)


def test_zero_filters_pass_input_through(example_signal):
    block = BlockParams([RecursionParams(np.zeros(5), np.zeros(5)) for _ in range(3)])
    imf, trace = block_forward(example_signal.samples, block)
    np.testing.assert_array_equal(imf, example_signal.samples)
    assert len(trace.steps) == 3


def test_zero_input_gives_zero_output(rng):
    block = BlockParams([RecursionParams(rng.standard_normal(7), rng.standard_normal(5))])
    imf, _ = block_forward(np.zeros(32), block)
    assert not imf.any()


def test_block_matches_loop_evaluator(rng):
    block = BlockParams([RecursionParams(rng.uniform(-0.3, 0.3, 7), rng.standard_normal(5)),
                         RecursionParams(rng.uniform(-0.3, 0.3, 7), rng.standard_normal(5))])
    x = np.sin(np.linspace(0, 9, 48)) + 0.1 * rng.standard_normal(48)
    imf, _ = block_forward(x, block)
    np.testing.assert_allclose(imf, _reference_block(x, block), atol=1e-12)


def test_block_trace_output_is_imf(rng):
    block = BlockParams([RecursionParams(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(2)])
    imf, trace = block_forward(rng.standard_normal(20), block)
    np.testing.assert_allclose(trace.output, imf)
    np.testing.assert_allclose(trace.steps[1].x, trace.steps[0].x - trace.steps[0].c2)


def test_single_block_cascade(rng):
    params = init_params(Architecture(blocks=1, recursions=2, k1=5, k2=5), seed=1)
    x = rng.standard_normal(64)
    result = cascade_forward(x, params)
    imf, _ = block_forward(x, params.blocks[0])
    np.testing.assert_array_equal(result.imfs[0], imf)
    np.testing.assert_array_equal(result.residue, x - imf)


def test_zero_params_put_everything_in_first_imf(example_signal):
    result = cascade_forward(example_signal, _zero_params(blocks=2))
    np.testing.assert_array_equal(result.imfs[0], example_signal.samples)
    assert not result.imfs[1].any()
    assert not result.residue.any()


def test_identity_ortho_changes_nothing(rng):
    x = rng.standard_normal(32)
    plain = init_params(Architecture(blocks=2, recursions=1, k1=3, k2=3), seed=4)
    with_ortho = ModelParams(plain.copy().blocks, np.eye(32), (0, 1))
    np.testing.assert_allclose(cascade_forward(x, with_ortho).imfs, cascade_forward(x, plain).imfs, atol=0)


def test_ortho_applies_to_listed_imfs_only(rng):
    x = rng.standard_normal(16)
    params = init_params(Architecture(blocks=2, recursions=1, k1=3, k2=3), seed=2)
    q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    result = cascade_forward(x, ModelParams(params.blocks, q, (1,)))
    np.testing.assert_allclose(result.imfs[1], q @ result.raw_imfs[1], atol=1e-12)
    np.testing.assert_array_equal(result.imfs[0], result.raw_imfs[0])


def test_cascade_zero_input():
    result = cascade_forward(np.zeros(40), init_params(Architecture(blocks=3, k1=5, k2=5), seed=0))
    assert not result.imfs.any() and not result.residue.any()


def test_cascade_reconstructs(rng):
    x = 3 * rng.standard_normal(256)
    result = cascade_forward(x, init_params(Architecture(blocks=4, recursions=(1, 2, 3, 2), k1=9, k2=7), seed=8))
    assert result.reconstruction_error(x) <= 1e-12 * np.abs(x).max() * 4


@pytest.mark.slow
def test_cascade_reconstructs_random_pairs(rng):
    worst = 0.0
    for seed in range(1000):
        n = int(rng.integers(16, 257))
        blocks = int(rng.integers(1, 4))
        arch = Architecture(blocks=blocks, recursions=tuple(rng.integers(1, 4, blocks)),
                            k1=tuple(2 * rng.integers(1, 8, blocks) + 1), k2=tuple(2 * rng.integers(1, 8, blocks) + 1))
        params = init_params(arch, seed=seed)
        for block in params.blocks:
            for rec in block.recursions:
                rec.w1[:] = rng.uniform(-1.0, 1.0, rec.w1.size)
                rec.w2_raw[:] = rng.standard_normal(rec.w2_raw.size)
        x = rng.uniform(0.1, 100.0) * rng.standard_normal(n)
        worst = max(worst, cascade_forward(x, params).reconstruction_error(x) / np.abs(x).max())
    assert worst <= 1e-10


def test_cascade_rejects_wrong_ortho_size(rng):
    params = init_params(Architecture(blocks=2, k1=5, k2=5), seed=0, n=32, ortho_indices=(0,))
    with pytest.raises(ShapeError):
        cascade_forward(rng.standard_normal(64), params)


def test_cascade_is_deterministic(rng):
    x = rng.standard_normal(128)
    params = init_params(Architecture(blocks=2, k1=7, k2=7), seed=3)
    a, b = cascade_forward(x, params), cascade_forward(x, params)
    assert np.array_equal(a.imfs, b.imfs) and np.array_equal(a.residue, b.residue)


def test_decompose_returns_signals(example_signal):
    result = decompose(example_signal, _zero_params(blocks=2))
    assert len(result.imfs) == 2
    assert result.residue.same_grid(example_signal)


@pytest.mark.parametrize("kwargs", [dict(blocks=0), dict(recursions=0), dict(k1=4), dict(k2=1),
                                    dict(blocks=2, k1=(3, 5, 7))])
def test_architecture_validation(kwargs):
    with pytest.raises(ShapeError):
        Architecture(**kwargs)


def test_architecture_broadcasts_scalars():
    arch = Architecture(blocks=3, recursions=2, k1=(9,), k2=(3, 5, 7))
    assert arch.recursions == (2, 2, 2)
    assert arch.k1 == (9, 9, 9)
    assert arch.k2 == (3, 5, 7)


def test_init_params_ranges():
    params = init_params(Architecture(blocks=2, recursions=3, k1=(33, 9), k2=5), seed=0)
    for m, block in enumerate(params.blocks):
        k1 = (33, 9)[m]
        for rec in block.recursions:
            assert np.all(np.abs(rec.w1) <= 1.0 / k1)
            assert not rec.w2_raw.any()
    assert architecture_of(params) == Architecture(blocks=2, recursions=3, k1=(33, 9), k2=5)
    with pytest.raises(ShapeError):
        init_params(Architecture(), seed=0, ortho_indices=(0,))


def test_recursion_params_validation():
    with pytest.raises(ShapeError):
        RecursionParams(np.zeros(4), np.zeros(3))
    with pytest.raises(ShapeError):
        RecursionParams(np.zeros(3), np.array([0.0, np.inf, 0.0]))


def test_weights_survive_save_and_load(tmp_path):
    params = init_params(Architecture(blocks=2, recursions=(1, 3), k1=(5, 9), k2=(3, 7)), seed=12)
    params.blocks[1].recursions[2].w2_raw[:] = np.linspace(-1, 1, 7)
    save_weights(tmp_path / "m.bin", params)
    loaded = load_weights(tmp_path / "m.bin")
    assert architecture_of(loaded) == architecture_of(params)
    for (name_a, a), (name_b, b) in zip(params.named_arrays(), loaded.named_arrays()):
        assert name_a == name_b
        assert np.array_equal(a, b)


def test_weights_with_ortho(tmp_path, rng):
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    params = ModelParams(init_params(Architecture(blocks=2, k1=3, k2=3), seed=0).blocks, q, (0, 1))
    save_weights(tmp_path / "m.bin", params)
    loaded = load_weights(tmp_path / "m.bin")
    assert loaded.ortho_indices == (0, 1)
    assert np.array_equal(loaded.ortho, q)


def test_truncated_weights_rejected(tmp_path):
    save_weights(tmp_path / "m.bin", init_params(Architecture(k1=5, k2=5), seed=0))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "short.bin")
    (tmp_path / "junk.bin").write_bytes(b"not weights")
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "junk.bin")


def test_filter_export(tmp_path):
    params = init_params(Architecture(blocks=2, recursions=1, k1=3, k2=5), seed=0)
    export_filters_csv(tmp_path / "f.csv", params)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "block,recursion,layer,tap,value"
    # per recursion: 3 taps of w1 plus 5 of w2_raw and 5 of w2
    assert len(lines) == 1 + 2 * (3 + 5 + 5)
    w2_rows = [line for line in lines if ",w2," in line]
    assert all(float(row.split(",")[-1]) == pytest.approx(0.2) for row in w2_rows)


@pytest.mark.parametrize("workers", [1, 2, 5])
def test_predict_batch_lanes_agree(workers, rng):
    signals = rng.standard_normal((7, 64))
    params = init_params(Architecture(blocks=2, k1=5, k2=5), seed=6)
    imfs, residues = predict_batch(signals, params, workers=workers)
    assert imfs.shape == (7, 2, 64) and residues.shape == (7, 64)
    for b in range(7):
        single = cascade_forward(signals[b], params)
        np.testing.assert_allclose(imfs[b], single.imfs, atol=1e-12)
        np.testing.assert_allclose(residues[b], single.residue, atol=1e-12)


def test_predict_batch_accepts_signal_list():
    signals = [Signal(np.cos(np.linspace(0, 5, 32))).samples] * 3
    imfs, _ = predict_batch(signals, _zero_params(blocks=1, k=3), workers=2)
    np.testing.assert_array_equal(imfs[:, 0], np.asarray(signals))


def test_conv_moving_average_edges():
    out = conv1d_same(np.ones(8), np.full(3, 1 / 3))
    np.testing.assert_allclose(out[1:-1], 1.0, atol=1e-15)
    np.testing.assert_allclose(out[[0, -1]], 2 / 3, atol=1e-15)
    assert not conv1d_same(np.ones(8), np.zeros(3)).any()


def test_softmax_ratios_and_large_shift():
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    np.testing.assert_allclose(softmax(np.zeros(5)), 0.2, atol=1e-15)
    v = np.array([0.25, -0.75, 1.125])
    np.testing.assert_allclose(softmax(v + 100.0), softmax(v), rtol=0, atol=1e-15)
