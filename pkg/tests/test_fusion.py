import math

import numpy as np
import pytest

from app.errors import ConfigError, ShapeError
from app.services.fusion import FusionService, FusorKind, FusorParams
from app.services.numerics import RngStream, finite_diff_grad, relative_error

NAMES = ["V", "W", "S"]


def random_features(rng: RngStream, m: int = 3, d: int = 5):
    return [rng.normal(1.0, d) for _ in range(m)]


class TestFuseExamples:
    """Reference values for every fusor"""

    def test_addition(self):
        """addition sums element-wise"""
        out = FusionService.fuse(FusorKind.ADDITION, [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert np.array_equal(out, [4.0, 6.0])

    def test_average_of_identical(self, rng):
        """averaging identical vectors returns them exactly"""
        v = rng.normal(1.0, 6)
        assert np.array_equal(FusionService.fuse(FusorKind.AVERAGE, [v, v, v]), v)

    def test_multiplication_annihilator(self, rng):
        """a zero vector zeroes the product"""
        out = FusionService.fuse(FusorKind.MULTIPLICATION, [rng.normal(1.0, 4), np.zeros(4)])
        assert np.all(out == 0.0)

    def test_max_and_min(self):
        """maximum and minimum pick per coordinate"""
        features = [np.array([1.0, 5.0]), np.array([3.0, 2.0])]
        assert np.array_equal(FusionService.fuse(FusorKind.MAXIMUM, features), [3.0, 5.0])
        assert np.array_equal(FusionService.fuse(FusorKind.MINIMUM, features), [1.0, 2.0])

    def test_gating_zero_weights(self, rng):
        """zero gates give sigmoid(0) = 0.5 everywhere"""
        params = FusorParams(gating={n: np.zeros((4, 4)) for n in NAMES})
        out = FusionService.fuse(FusorKind.GATING, random_features(rng, d=4), params, NAMES)
        assert np.array_equal(out, np.full(4, 0.5))

    def test_attention_equal_scores_is_average(self, rng):
        """equal attention scores reduce to the average"""
        params = FusorParams(attention={n: np.zeros(5) for n in NAMES})
        features = random_features(rng)
        out = FusionService.fuse(FusorKind.ATTENTION, features, params, NAMES)
        avg = FusionService.fuse(FusorKind.AVERAGE, features)
        assert np.allclose(out, avg, atol=1e-15)

    def test_concatenation_order(self):
        """concatenation keeps the input order"""
        out = FusionService.fuse(FusorKind.CONCATENATION, [np.array([1.0]), np.array([2.0]), np.array([3.0])])
        assert np.array_equal(out, [1.0, 2.0, 3.0])

    def test_mixed_lengths(self):
        """vectors of different lengths are rejected"""
        with pytest.raises(ShapeError):
            FusionService.fuse(FusorKind.ADDITION, [np.zeros(2), np.zeros(3)])

    def test_missing_params(self, rng):
        """learnable fusors need their parameters"""
        with pytest.raises(ConfigError):
            FusionService.fuse(FusorKind.GATING, random_features(rng), None, NAMES)

    def test_params_cover_only_present_modalities(self, rng):
        """fusing a subset uses only that subset's gates"""
        params = FusionService.init_params(FusorKind.GATING, NAMES, 5, rng)
        out = FusionService.fuse(FusorKind.GATING, random_features(rng, m=1), params, ["W"])
        assert out.shape == (5,)


class TestFusedDim:
    """Output size per fusor"""

    def test_concatenation(self):
        """concatenation widens to m x d"""
        assert FusionService.fused_dim(FusorKind.CONCATENATION, 3, 16) == 48

    def test_gating(self):
        """gating keeps d"""
        assert FusionService.fused_dim(FusorKind.GATING, 3, 16) == 16

    def test_single_modality(self):
        """one modality keeps d"""
        assert FusionService.fused_dim(FusorKind.AVERAGE, 1, 7) == 7

    def test_parses_lowercase_name(self):
        """fusor names are accepted as strings"""
        assert FusionService.fused_dim("concatenation", 2, 3) == 6


class TestFusionInvariants:
    """Properties over random instances"""

    def test_addition_is_m_times_average(self):
        """addition equals m times the average"""
        rng = RngStream(2)
        for _ in range(50):
            features = random_features(rng, m=4)
            add = FusionService.fuse(FusorKind.ADDITION, features)
            avg = FusionService.fuse(FusorKind.AVERAGE, features)
            assert np.allclose(add, 4 * avg, rtol=1e-14, atol=1e-14)

    def test_max_dominates_min(self):
        """maximum is never below minimum"""
        rng = RngStream(3)
        for _ in range(50):
            features = random_features(rng)
            assert np.all(FusionService.fuse(FusorKind.MAXIMUM, features)
                          >= FusionService.fuse(FusorKind.MINIMUM, features))

    def test_attention_is_convex(self):
        """attention output lies between the input extremes"""
        rng = RngStream(4)
        for _ in range(50):
            features = random_features(rng)
            params = FusionService.init_params(FusorKind.ATTENTION, NAMES, 5, rng)
            out = FusionService.fuse(FusorKind.ATTENTION, features, params, NAMES)
            lo = FusionService.fuse(FusorKind.MINIMUM, features)
            hi = FusionService.fuse(FusorKind.MAXIMUM, features)
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_gating_strictly_inside_unit_interval(self):
        """gated output lies in (0, 1)"""
        rng = RngStream(5)
        for _ in range(50):
            features = random_features(rng)
            params = FusionService.init_params(FusorKind.GATING, NAMES, 5, rng)
            out = FusionService.fuse(FusorKind.GATING, features, params, NAMES)
            assert np.all((out > 0.0) & (out < 1.0))

    def test_concatenation_offsets(self, rng):
        """each input occupies its own slice"""
        features = random_features(rng, d=3)
        out = FusionService.fuse(FusorKind.CONCATENATION, features)
        for i, f in enumerate(features):
            assert np.array_equal(out[i * 3:(i + 1) * 3], f)

    @pytest.mark.parametrize("kind", [FusorKind.ADDITION, FusorKind.AVERAGE, FusorKind.MULTIPLICATION,
                                      FusorKind.MAXIMUM, FusorKind.MINIMUM])
    def test_symmetric_fusors_ignore_order(self, kind, rng):
        """order-free fusors give the same result under permutation"""
        features = random_features(rng)
        reordered = [features[2], features[0], features[1]]
        assert np.allclose(FusionService.fuse(kind, features), FusionService.fuse(kind, reordered),
                           rtol=1e-14, atol=1e-14)

    def test_concatenation_depends_on_order(self, rng):
        """permuting inputs changes a concatenation"""
        features = random_features(rng)
        swapped = [features[1], features[0], features[2]]
        assert not np.array_equal(FusionService.fuse(FusorKind.CONCATENATION, features),
                                  FusionService.fuse(FusorKind.CONCATENATION, swapped))


class TestFuseBackward:
    """Hand-derived fusion gradients"""

    def test_addition_passes_through(self, rng):
        """addition passes the upstream gradient to every input"""
        d_out = rng.normal(1.0, 5)
        grads, param_grads = FusionService.fuse_backward(FusorKind.ADDITION, random_features(rng), None, d_out)
        assert all(np.array_equal(g, d_out) for g in grads)
        assert param_grads == {}

    def test_average_divides(self, rng):
        """average splits the upstream gradient m ways"""
        d_out = rng.normal(1.0, 5)
        grads, _ = FusionService.fuse_backward(FusorKind.AVERAGE, random_features(rng), None, d_out)
        assert all(np.array_equal(g, d_out / 3) for g in grads)

    def test_max_tie_goes_to_lowest_index(self):
        """ties route the gradient to the first input"""
        features = [np.array([1.0, 0.0]), np.array([1.0, 2.0])]
        grads, _ = FusionService.fuse_backward(FusorKind.MAXIMUM, features, None, np.ones(2))
        assert np.array_equal(grads[0], [1.0, 0.0])
        assert np.array_equal(grads[1], [0.0, 1.0])

    def test_wrong_upstream_size(self, rng):
        """an upstream gradient of the wrong size is rejected"""
        with pytest.raises(ShapeError):
            FusionService.fuse_backward(FusorKind.CONCATENATION, random_features(rng), None, np.ones(5))

    @pytest.mark.parametrize("kind", list(FusorKind))
    def test_feature_gradients_match_oracle(self, kind):
        """input gradients agree with central differences"""
        rng = RngStream(11)
        for _ in range(100):
            features = random_features(rng, d=4)
            params = FusionService.init_params(kind, NAMES, 4, rng)
            r = rng.normal(1.0, FusionService.fused_dim(kind, 3, 4))
            grads, _ = FusionService.fuse_backward(kind, features, params, r, NAMES)

            def f(flat):
                parts = [flat[i * 4:(i + 1) * 4] for i in range(3)]
                return float(r @ FusionService.fuse(kind, parts, params, NAMES))

            oracle = finite_diff_grad(f, np.concatenate(features))
            assert relative_error(np.concatenate(grads), oracle) <= 1e-5

    @pytest.mark.parametrize("kind", [FusorKind.GATING, FusorKind.ATTENTION])
    def test_param_gradients_match_oracle(self, kind):
        """gate and attention gradients agree with central differences"""
        rng = RngStream(13)
        for _ in range(100):
            features = random_features(rng, d=4)
            params = FusionService.init_params(kind, NAMES, 4, rng)
            r = rng.normal(1.0, 4)
            _, param_grads = FusionService.fuse_backward(kind, features, params, r, NAMES)
            for name in NAMES:
                table = params.for_kind(kind)
                shape = table[name].shape

                def f(flat, name=name, shape=shape):
                    patched = dict(table)
                    patched[name] = flat.reshape(shape)
                    trial = FusorParams(gating=patched) if kind == FusorKind.GATING else FusorParams(attention=patched)
                    return float(r @ FusionService.fuse(kind, features, trial, NAMES))

                oracle = finite_diff_grad(f, table[name].reshape(-1))
                assert relative_error(param_grads[name].reshape(-1), oracle) <= 1e-5


def elementwise_oracle(kind: FusorKind, features, params, names):
    """Scalar loops over coordinates, written without the service's helpers"""
    m, d = len(features), len(features[0])
    if kind == FusorKind.CONCATENATION:
        return np.array([float(features[i][j]) for i in range(m) for j in range(d)])
    out = np.empty(d)
    if kind == FusorKind.ATTENTION:
        scores = []
        for i in range(m):
            s = 0.0
            for j in range(d):
                s += params.attention[names[i]][j] * features[i][j]
            scores.append(s)
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        weights = [e / sum(exps) for e in exps]
    for j in range(d):
        column = [float(f[j]) for f in features]
        if kind == FusorKind.ADDITION:
            acc = column[0]
            for x in column[1:]:
                acc = acc + x
            out[j] = acc
        elif kind == FusorKind.AVERAGE:
            acc = column[0] - column[0]
            for x in column[1:]:
                acc = acc + (x - column[0])
            out[j] = column[0] + acc / m
        elif kind == FusorKind.MULTIPLICATION:
            acc = column[0]
            for x in column[1:]:
                acc = acc * x
            out[j] = acc
        elif kind == FusorKind.MAXIMUM:
            out[j] = max(column)
        elif kind == FusorKind.MINIMUM:
            out[j] = min(column)
        elif kind == FusorKind.GATING:
            z = 0.0
            for i in range(m):
                for k in range(d):
                    z += params.gating[names[i]][j, k] * features[i][k]
            out[j] = 1.0 / (1.0 + math.exp(-z))
        else:
            out[j] = sum(weights[i] * column[i] for i in range(m))
    return out


class TestElementwiseOracle:
    """A thousand random instances per fusor against scalar loops"""

    @pytest.mark.parametrize("kind", list(FusorKind))
    def test_thousand_instances(self, kind):
        """exact kinds match bit for bit, learnable kinds within 1e-12"""
        rng = RngStream(101)
        for _ in range(1000):
            m = int(rng.integers(1, 5))
            d = int(rng.integers(1, 7))
            names = NAMES[:m] if m <= 3 else NAMES + ["X"]
            features = [rng.normal(2.0, d) for _ in range(m)]
            params = FusionService.init_params(kind, names, d, rng)
            got = FusionService.fuse(kind, features, params, names)
            want = elementwise_oracle(kind, features, params, names)
            if kind.learnable:
                assert np.allclose(got, want, rtol=0, atol=1e-12)
            else:
                assert np.array_equal(got, want)
