import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amtrf import math_core as mc
from amtrf.errors import EmptyInputError, MatrixIOError, ParameterError, ShapeError


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(mc.matmul(np.eye(2), m), m)

    def test_row_by_column(self):
        assert mc.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_matches_triple_loop_exactly(self):
        rng = mc.SeededRng(7)
        a, b = rng.normal((5, 4)), rng.normal((4, 3))
        np.testing.assert_array_equal(mc.matmul(a, b), triple_loop(a, b))

    def test_rows_are_independent_bitwise(self):
        rng = mc.SeededRng(8)
        a, b = rng.normal((6, 9)), rng.normal((9, 4))
        full = mc.matmul(a, b)
        for i in range(6):
            np.testing.assert_array_equal(mc.matmul(a[i : i + 1], b), full[i : i + 1])

    def test_repeatable_bitwise(self):
        rng = mc.SeededRng(9)
        a, b = rng.normal((7, 5)), rng.normal((5, 6))
        assert mc.matmul(a, b).tobytes() == mc.matmul(a.copy(), b.copy()).tobytes()

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            mc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(mc.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_hand_value(self):
        expected = math.e / (math.e + math.e**2)
        out = mc.softmax_rows(np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out, [[expected, 1 - expected]], rtol=0, atol=1e-15)
        assert abs(out[0, 0] - 0.26894) < 1e-5

    def test_large_logit_no_overflow(self):
        out = mc.softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0] - 1.0) < 1e-12 and out[0, 1] < 1e-12

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = mc.softmax_rows(x)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_two_values(self):
        out = mc.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)

    def test_constant_input(self):
        out = mc.layer_norm(np.full(3, 5.0), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_random_statistics(self):
        x = mc.SeededRng(4).normal((8,))
        out = mc.layer_norm(x, np.ones(8), np.zeros(8), eps=1e-12)
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mc.layer_norm(np.zeros(3), np.ones(2), np.zeros(3))

    @settings(max_examples=50)
    @given(
        arrays(np.float64, 6, elements=st.floats(-10, 10)).filter(lambda v: v.std() > 1e-2),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, x, c):
        g, b = np.ones(6), np.zeros(6)
        np.testing.assert_allclose(mc.layer_norm(x + c, g, b), mc.layer_norm(x, g, b), atol=1e-9)


class TestMeanPool:
    def test_two_frames(self):
        np.testing.assert_array_equal(mc.mean_pool(np.array([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0])

    def test_single_frame(self):
        np.testing.assert_array_equal(mc.mean_pool(np.array([[5.0, -1.0]])), [5.0, -1.0])

    def test_sum_oracle(self):
        x = mc.SeededRng(3).normal((3, 5))
        oracle = np.array([sum(float(x[r, c]) for r in range(3)) / 3 for c in range(5)])
        np.testing.assert_allclose(mc.mean_pool(x), oracle, rtol=0, atol=1e-15)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            mc.mean_pool(np.zeros((0, 3)))


class TestDropout:
    @pytest.mark.parametrize("rate", [0.0, 0.3, 0.9])
    def test_eval_is_identity(self, rate):
        np.testing.assert_array_equal(mc.dropout_mask((4, 5), rate, mc.SeededRng(1), False), np.ones((4, 5)))

    def test_zero_rate_training(self):
        np.testing.assert_array_equal(mc.dropout_mask((3, 3), 0.0, mc.SeededRng(1), True), np.ones((3, 3)))

    def test_keep_fraction(self):
        m = mc.dropout_mask((100, 100), 0.5, mc.SeededRng(11), True)
        keep = (m > 0).mean()
        assert abs(keep - 0.5) <= 0.02
        np.testing.assert_array_equal(np.unique(m), [0.0, 2.0])

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ParameterError):
            mc.dropout_mask((2,), rate, mc.SeededRng(1), True)

    def test_replay_reproduces_masks(self):
        d = mc.Dropout(0.4, mc.SeededRng(2), training=True)
        first = [d.mask((3, 4)), d.mask((2,))]
        r = d.replay()
        np.testing.assert_array_equal(r.mask((3, 4)), first[0])
        np.testing.assert_array_equal(r.mask((2,)), first[1])
        with pytest.raises(ParameterError):
            r.mask((1,))


def test_rng_is_deterministic():
    a = mc.SeededRng(42).normal((5,))
    b = mc.SeededRng(42).normal((5,))
    assert a.tobytes() == b.tobytes()
    assert mc.SeededRng(42).spawn(3).normal((2,)).tobytes() == mc.SeededRng(42).spawn(3).normal((2,)).tobytes()
    assert mc.SeededRng(42).spawn(3).normal((2,)).tobytes() != mc.SeededRng(42).spawn(4).normal((2,)).tobytes()


class TestMatrixFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        m = mc.SeededRng(5).normal((4, 3)) * 1e-7
        path = tmp_path / "m.txt"
        mc.write_matrix(path, m)
        back = mc.read_matrix(path)
        assert back.tobytes() == m.tobytes()
        assert path.read_text().splitlines()[0] == "4 3"

    def test_float32_round_trip(self):
        m = mc.SeededRng(6).normal((2, 5)).astype(np.float32)
        back = mc.parse_matrix(mc.format_matrix(m), dtype=np.float32)
        assert back.tobytes() == m.tobytes()

    def test_header_mismatch(self):
        with pytest.raises(MatrixIOError):
            mc.parse_matrix("2 2\n1 2\n3\n")

    def test_missing_rows(self):
        with pytest.raises(MatrixIOError):
            mc.parse_matrix("3 1\n1\n2\n")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        mc.atomic_write_text(tmp_path / "x", "hello")
        assert [p.name for p in tmp_path.iterdir()] == ["x"]
