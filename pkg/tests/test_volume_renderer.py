import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvseg.volume_renderer import (
    DELTA_SENTINEL,
    composite,
    compute_weights,
    render_colour,
    render_semantics,
    sample_along_ray,
)

from oracles import composite_loop, softmax_loop, weights_loop


def t64(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


class TestSampleAlongRay:
    def test_single_sample_is_bin_centre(self):
        s = sample_along_ray(t64([[0, 0, 0]]), t64([[0, 0, 1]]), 2.0, 4.0, 1)
        assert s.depths.tolist() == [[3.0]]
        assert s.deltas[0, -1] == DELTA_SENTINEL

    def test_bin_centres(self):
        s = sample_along_ray(t64([[0, 0, 0]]), t64([[1, 0, 0]]), 0.0, 4.0, 4)
        assert s.depths[0].tolist() == [0.5, 1.5, 2.5, 3.5]
        assert s.deltas[0, :3].tolist() == [1.0, 1.0, 1.0]
        np.testing.assert_allclose(s.positions[0, :, 0].numpy(), [0.5, 1.5, 2.5, 3.5])

    def test_stratified_within_bins(self):
        s = sample_along_ray(t64(np.zeros((50, 3))), t64(np.tile([0, 0, 1.0], (50, 1))), 1.0, 3.0, 8, True, 7)
        d = s.depths.numpy()
        assert (np.diff(d, axis=-1) > 0).all()
        lo = 1.0 + 0.25 * np.arange(8)
        assert ((d >= lo) & (d <= lo + 0.25)).all()
        assert (s.deltas[:, :-1] > 0).all()

    def test_stratified_seeded(self):
        args = (t64(np.zeros((4, 3))), t64(np.tile([0, 1.0, 0], (4, 1))), 0.0, 1.0, 5, True)
        a = sample_along_ray(*args, generator=3).depths
        b = sample_along_ray(*args, generator=3).depths
        assert torch.equal(a, b)


class TestComputeWeights:
    def test_transparent(self):
        w = compute_weights(t64([0, 0, 0]), t64([1, 1, 1]))
        assert w.tolist() == [0.0, 0.0, 0.0]

    def test_opaque_limit(self):
        w = compute_weights(t64([1e9]), t64([1.0]))
        assert w.item() == pytest.approx(1.0)

    def test_two_unit_samples(self):
        w = compute_weights(t64([1.0, 1.0]), t64([1.0, 1.0]))
        e = math.exp(-1)
        np.testing.assert_allclose(w.numpy(), [1 - e, e * (1 - e)], atol=1e-12)
        np.testing.assert_allclose(w.numpy(), [0.63212, 0.23254], atol=1e-5)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            compute_weights(t64([-1.0]), t64([1.0]))
        with pytest.raises(ValueError):
            compute_weights(t64([1.0]), t64([-1.0]))

    def test_sentinel_does_not_break_transmittance_float32(self):
        # regression: inclusive-cumsum-minus-self lost the prefix next to 1e10
        sig = torch.tensor([0.5, 0.7, 0.9, 1.3], dtype=torch.float32)
        dlt = torch.tensor([0.25, 0.25, 0.25, DELTA_SENTINEL], dtype=torch.float32)
        w = compute_weights(sig, dlt)
        assert float(w.sum()) <= 1.0 + 1e-6
        expected = weights_loop([0.5, 0.7, 0.9, 1.3], [0.25, 0.25, 0.25, DELTA_SENTINEL])
        np.testing.assert_allclose(w.numpy(), expected, atol=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0, 20), st.floats(1e-3, 2)),
            min_size=1,
            max_size=12,
        )
    )
    def test_sum_identity_and_bounds(self, pairs):
        sig = t64([p[0] for p in pairs])
        dlt = t64([p[1] for p in pairs])
        w = compute_weights(sig, dlt)
        assert (w >= 0).all() and (w <= 1).all()
        total = 1 - math.exp(-float((sig * dlt).sum()))
        assert float(w.sum()) == pytest.approx(total, abs=1e-6)
        assert float(w.sum()) <= 1 + 1e-6


class TestRenderColour:
    def test_single_weight(self):
        c = render_colour(t64([1.0]), t64([[0.2, 0.4, 0.6]]))
        np.testing.assert_allclose(c.numpy(), [0.2, 0.4, 0.6])

    def test_zero_weights(self):
        c = render_colour(t64([0.0, 0.0]), t64([[1, 1, 1], [0.5, 0.5, 0.5]]))
        assert c.tolist() == [0.0, 0.0, 0.0]

    def test_weighted_sum(self):
        c = render_colour(t64([0.5, 0.25]), t64([[1, 0, 0], [0, 1, 0]]))
        np.testing.assert_allclose(c.numpy(), [0.5, 0.25, 0.0])

    def test_split_sample_consistency(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            sig, d = rng.uniform(0, 5), rng.uniform(0.01, 1)
            col = rng.uniform(0, 1, 3)
            one = render_colour(compute_weights(t64([sig]), t64([d])), t64([col]))
            two = render_colour(compute_weights(t64([sig, sig]), t64([d / 2, d / 2])), t64([col, col]))
            assert float((one - two).abs().max()) < 1e-6

    def test_gradient_wrt_sigma(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n = 6
            sig = rng.uniform(0.1, 3, n)
            d = rng.uniform(0.05, 0.5, n)
            col = rng.uniform(0, 1, (n, 3))
            proj = rng.normal(size=3)

            def f(s):
                return float(render_colour(compute_weights(t64(s), t64(d)), t64(col)) @ t64(proj))

            s_t = t64(sig).requires_grad_(True)
            (render_colour(compute_weights(s_t, t64(d)), t64(col)) @ t64(proj)).backward()
            for i in range(n):
                num = (f(sig + np.eye(n)[i] * 1e-4) - f(sig - np.eye(n)[i] * 1e-4)) / 2e-4
                assert s_t.grad[i].item() == pytest.approx(num, rel=1e-3, abs=1e-9)


class TestRenderSemantics:
    def test_single_one_hot(self):
        seg = render_semantics(t64([1.0]), t64([[0, 0, 1, 0]]))
        assert int(seg.argmax()) == 2

    def test_identical_attrs_linearity(self):
        attrs = t64([[0.3, 1.2, -0.4], [0.3, 1.2, -0.4]])
        a = render_semantics(t64([0.9, 0.05]), attrs, normalize=False)
        b = render_semantics(t64([0.2, 0.75]), attrs, normalize=False)
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)
        np.testing.assert_allclose(a.numpy(), 0.95 * attrs[0].numpy(), atol=1e-12)

    def test_hand_case(self):
        logits = render_semantics(t64([0.6, 0.2]), t64([[2, 0], [0, 4]]), normalize=False)
        np.testing.assert_allclose(logits.numpy(), [1.2, 0.8], atol=1e-12)
        probs = render_semantics(t64([0.6, 0.2]), t64([[2, 0], [0, 4]]))
        np.testing.assert_allclose(probs.numpy(), softmax_loop([1.2, 0.8]), atol=1e-12)
        assert int(probs.argmax()) == 0

    def test_simplex(self):
        rng = np.random.default_rng(3)
        probs = render_semantics(t64(rng.uniform(0, 0.3, (20, 5))), t64(rng.normal(size=(20, 5, 4))))
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(-1).numpy(), 1.0, atol=1e-6)


def test_composite_shares_weights():
    rng = np.random.default_rng(4)
    sig, d = t64(rng.uniform(0, 4, (8, 10))), t64(rng.uniform(0.01, 0.4, (8, 10)))
    cols, attrs = t64(rng.uniform(0, 1, (8, 10, 3))), t64(rng.normal(size=(8, 10, 3)))
    out = composite(sig, d, cols, attrs)
    w = compute_weights(sig, d)
    assert torch.equal(out.weights, w)
    assert torch.equal(out.colour, render_colour(w, cols))
    assert torch.equal(out.seg_logits, render_semantics(w, attrs, normalize=False))
    np.testing.assert_allclose(out.accumulated_opacity.numpy(), w.sum(-1).numpy())


def test_matches_loop_oracle_small():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        sig, d = rng.uniform(0, 5, n), rng.uniform(0.01, 1, n)
        w = compute_weights(t64(sig), t64(d)).numpy()
        np.testing.assert_allclose(w, weights_loop(sig, d), atol=1e-12)
        cols = rng.uniform(0, 1, (n, 3))
        np.testing.assert_allclose(render_colour(t64(w), t64(cols)).numpy(), composite_loop(w, cols), atol=1e-12)
