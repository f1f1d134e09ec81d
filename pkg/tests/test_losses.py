import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfclip.backends import make_toy_suite, sample_latent, synthesize
from cfclip.errors import DimensionMismatch, MissingBackend, MissingTerm, ZeroVector
from cfclip.geometry import render_prompts
from cfclip.losses import (
    DirectionSet,
    LossWeights,
    TextBank,
    build_direction_set,
    clip_nce_loss,
    directional_clip_loss,
    global_clip_loss,
    identity_loss,
    latent_l2_loss,
    perceptual_loss,
    total_loss,
)

from .conftest import TOY_DIMS, assert_gradients_match


def t(v):
    return torch.tensor(v, dtype=torch.float64)


def brute_nce(query, pos_t, pos_i, negatives, tau):
    """Scalar reference: plain exp/log over Python lists, no stabilisation tricks."""
    def unit(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v]

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    k_t, k_i = unit(pos_t), unit(pos_i)
    k_n = [unit(v) for v in negatives]
    per_view = []
    for raw in query:
        q = unit(raw)
        neg = sum(math.exp(dot(q, k) / tau) for k in k_n)
        loss = 0.0
        for k in (k_t, k_i):
            pos = math.exp(dot(q, k) / tau)
            loss -= math.log(pos / (pos + neg))
        per_view.append(loss)
    return sum(per_view) / len(per_view)


def random_config(rng):
    dim = rng.randint(2, 16)
    views, negs = rng.randint(1, 4), rng.randint(1, 8)
    vec = lambda: [rng.gauss(0, 1) for _ in range(dim)]  # noqa: E731
    return [vec() for _ in range(views)], vec(), vec(), [vec() for _ in range(negs)], rng.choice([0.05, 0.1, 0.5, 1.0])


def as_set(query, pos_t, pos_i, negatives):
    return DirectionSet(t(query), t(pos_t), t(pos_i), t(negatives))


class TestGlobal:
    def test_examples(self):
        assert float(global_clip_loss(t([1, 2, 3]), t([1, 2, 3]))) == pytest.approx(0.0, abs=1e-12)
        assert float(global_clip_loss(t([1, 0]), t([0, 1]))) == 1.0
        assert float(global_clip_loss(t([1, 2, 2]), t([2, 0, 1]))) == pytest.approx(0.403715, abs=1e-6)

    def test_zero(self):
        with pytest.raises(ZeroVector):
            global_clip_loss(t([0, 0]), t([1, 0]))

    def test_gradient(self):
        txt = t([0.3, -1.0, 2.0, 0.5])
        assert_gradients_match(lambda x: global_clip_loss(x, txt), t([1.0, 0.2, -0.4, 0.9]))


class TestDirectional:
    def test_examples(self):
        d = t([0.5, -1.0, 2.0])
        assert float(directional_clip_loss(d, d)) == pytest.approx(0.0, abs=1e-12)
        assert float(directional_clip_loss(d, -d)) == pytest.approx(2.0, abs=1e-12)
        assert float(directional_clip_loss(d, 2 * d)) == pytest.approx(0.0, abs=1e-12)

    def test_zero_image_direction(self):
        with pytest.raises(ZeroVector):
            directional_clip_loss(t([1.0, 0.0]), t([0.0, 0.0]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: sum(x * x for x in v) > 1e-4),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: sum(x * x for x in v) > 1e-4))
    def test_symmetric(self, a, b):
        assert float(directional_clip_loss(t(a), t(b))) == pytest.approx(
            float(directional_clip_loss(t(b), t(a))), abs=1e-12)

    def test_gradient(self):
        dt = t([0.3, -1.0, 2.0])
        assert_gradients_match(lambda x: directional_clip_loss(dt, x), t([1.0, 0.4, -0.2]))


class TestNCE:
    def test_canonical_value(self):
        ds = as_set([[1, 0]], [1, 0], [1, 0], [[0, 1]])
        expected = 2 * math.log1p(math.exp(-10))
        assert float(clip_nce_loss(ds, 0.1)) == pytest.approx(9.07978e-5, abs=1e-9)
        assert float(clip_nce_loss(ds, 0.1)) == pytest.approx(expected, rel=1e-10)
        assert math.log1p(math.exp(-10)) == pytest.approx(4.53989e-5, abs=1e-10)

    def test_matches_brute_force_on_random_configs(self):
        rng = random.Random(1234)
        worst = 0.0
        for _ in range(100):
            query, pos_t, pos_i, negatives, tau = random_config(rng)
            ours = float(clip_nce_loss(as_set(query, pos_t, pos_i, negatives), tau))
            ref = brute_nce(query, pos_t, pos_i, negatives, tau)
            assert ours > 0
            worst = max(worst, abs(ours - ref) / abs(ref))
        assert worst < 1e-6

    def test_permuting_negatives(self):
        rng = random.Random(5)
        query, pos_t, pos_i, negatives, tau = random_config(rng)
        negatives = negatives + [[rng.gauss(0, 1) for _ in pos_t]]
        a = float(clip_nce_loss(as_set(query, pos_t, pos_i, negatives), tau))
        b = float(clip_nce_loss(as_set(query, pos_t, pos_i, negatives[::-1]), tau))
        assert a == pytest.approx(b, abs=1e-12)

    def test_monotone_in_positive_alignment(self):
        negatives = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        losses = []
        for angle in (1.2, 0.9, 0.6, 0.3, 0.0):
            q = [math.cos(angle), math.sin(angle) * 0.6, math.sin(angle) * 0.8]
            losses.append(float(clip_nce_loss(as_set([q], [1, 0, 0], [1, 0.2, 0.1], negatives), 0.1)))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.lists(st.floats(1e-3, 1e3), min_size=4, max_size=4))
    def test_scale_invariance(self, seed, scales):
        rng = random.Random(seed)
        query, pos_t, pos_i, negatives, tau = random_config(rng)
        base = float(clip_nce_loss(as_set(query, pos_t, pos_i, negatives), tau))
        sq, st_, si, sn = scales
        scaled = as_set([[sq * x for x in v] for v in query], [st_ * x for x in pos_t],
                        [si * x for x in pos_i], [[sn * x for x in v] for v in negatives])
        assert float(clip_nce_loss(scaled, tau)) == pytest.approx(base, rel=1e-9, abs=1e-12)

    def test_stable_at_tiny_temperature(self):
        ds = as_set([[1, 0]], [0, 1], [0, 1], [[1, 0]])
        value = float(clip_nce_loss(ds, 1e-4))
        assert math.isfinite(value) and value == pytest.approx(2e4, rel=1e-9)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            clip_nce_loss(as_set([[1, 0]], [1, 0], [1, 0], [[0, 1]]), 0.0)

    def test_zero_direction(self):
        with pytest.raises(ZeroVector):
            clip_nce_loss(as_set([[0, 0]], [1, 0], [1, 0], [[0, 1]]), 0.1)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            as_set([[1, 0, 0]], [1, 0], [1, 0], [[0, 1]])

    def test_gradient_wrt_query(self):
        rng = random.Random(9)
        query, pos_t, pos_i, negatives, _ = random_config(rng)
        rest = (t(pos_t), t(pos_i), t(negatives))
        assert_gradients_match(lambda q: clip_nce_loss(DirectionSet(q, *rest), 0.1), t(query))


class TestDirectionSet:
    @pytest.fixture
    def parts(self, toy_suite):
        bank = TextBank.build(toy_suite, "green lipstick", render_prompts("face"))
        src = synthesize(toy_suite, sample_latent(toy_suite, 0))
        views = torch.stack([synthesize(toy_suite, sample_latent(toy_suite, k)) for k in (1, 2, 3, 4)])
        return bank, src, views

    def test_cardinality(self, toy_suite, parts):
        bank, src, views = parts
        ds = build_direction_set(toy_suite, bank, src, views)
        assert ds.query.shape == (4, 16) and ds.negatives.shape == (8, 16)

    def test_identical_views(self, toy_suite, parts):
        bank, src, views = parts
        ds = build_direction_set(toy_suite, bank, src, views[:1].expand(3, -1, -1, -1))
        assert torch.equal(ds.query[0], ds.query[1]) and torch.equal(ds.query[1], ds.query[2])

    def test_positive_identity(self, toy_suite, parts):
        bank, src, views = parts
        ds = build_direction_set(toy_suite, bank, src, views)
        from cfclip.backends import encode_image
        gap = encode_image(toy_suite, src) - bank.canonical_source
        assert torch.allclose(ds.pos_text - ds.pos_image, gap, atol=1e-14, rtol=0)

    def test_unedited_view_reported(self, toy_suite, parts):
        bank, src, _ = parts
        with pytest.raises(ZeroVector):
            build_direction_set(toy_suite, bank, src, src[None])


class TestRegularisers:
    def test_l2_examples(self):
        w = torch.zeros(4, 8, dtype=torch.float64)
        assert float(latent_l2_loss(w, w)) == 0.0
        one = w.clone()
        one[2, 5] = 3.0
        assert float(latent_l2_loss(w, one)) == 3.0
        assert float(latent_l2_loss(w, w + 1)) == pytest.approx(math.sqrt(32), abs=1e-12)

    def test_l2_mismatch(self):
        with pytest.raises(DimensionMismatch):
            latent_l2_loss(torch.zeros(4, 8), torch.zeros(3, 8))

    def test_l2_gradient(self):
        w = torch.randn(4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        assert_gradients_match(lambda x: latent_l2_loss(w, x), w + 0.3)

    def test_identity_self_is_zero(self, toy_suite):
        img = synthesize(toy_suite, sample_latent(toy_suite, 0))
        assert float(identity_loss(toy_suite, img, img)) == pytest.approx(0.0, abs=1e-12)

    def test_identity_orthogonal_pair(self, toy_suite):
        # the toy identity net is linear, so preimages of two basis vectors are an orthogonal pair
        weight = toy_suite.identity_net.weight.detach()
        pinv = torch.linalg.pinv(weight)
        shape = (16, 16, 3)
        a = (pinv @ t([1, 0, 0, 0, 0, 0, 0, 0])).view(shape)
        b = (pinv @ t([0, 1, 0, 0, 0, 0, 0, 0])).view(shape)
        assert float(identity_loss(toy_suite, a, b)) == pytest.approx(1.0, abs=1e-10)

    def test_identity_bounds_and_missing(self, toy_suite):
        a = synthesize(toy_suite, sample_latent(toy_suite, 1))
        b = synthesize(toy_suite, sample_latent(toy_suite, 2))
        assert 0 <= float(identity_loss(toy_suite, a, b)) <= 2
        with pytest.raises(MissingBackend):
            identity_loss(make_toy_suite(0, TOY_DIMS, identity=False), a, b)

    def test_perceptual_hand_computed(self, toy_suite):
        gen = torch.Generator().manual_seed(3)
        a = torch.rand(16, 16, 3, dtype=torch.float64, generator=gen)
        b = torch.rand(16, 16, 3, dtype=torch.float64, generator=gen)
        kernel = toy_suite.perceptual_net.weight.detach().tolist()  # (F, C, s, s)
        s = toy_suite.perceptual_net.stride
        total, n = 0.0, 0
        for f in range(len(kernel)):
            for py in range(16 // s):
                for px in range(16 // s):
                    acc = 0.0
                    for c in range(3):
                        for dy in range(s):
                            for dx in range(s):
                                y, x = py * s + dy, px * s + dx
                                acc += kernel[f][c][dy][dx] * (float(a[y, x, c]) - float(b[y, x, c]))
                    total += abs(acc)
                    n += 1
        assert float(perceptual_loss(toy_suite, a, b)) == pytest.approx(total / n, rel=1e-12)

    def test_perceptual_identical_and_missing(self, toy_suite):
        img = synthesize(toy_suite, sample_latent(toy_suite, 0))
        assert float(perceptual_loss(toy_suite, img, img)) == 0.0
        with pytest.raises(MissingBackend):
            perceptual_loss(make_toy_suite(0, TOY_DIMS, perceptual=False), img, img)

    def test_image_gradients(self, toy_suite):
        src = synthesize(toy_suite, sample_latent(toy_suite, 0))
        start = synthesize(toy_suite, sample_latent(toy_suite, 1))
        assert_gradients_match(lambda x: identity_loss(toy_suite, x, src), start)
        # smooth surrogate check for the L1 term away from its kinks
        assert_gradients_match(lambda x: perceptual_loss(toy_suite, x, src), start)


class TestTotal:
    def test_all_zero_weights(self):
        w = LossWeights(0, 0, 0, 0)
        assert total_loss({}, w) == 0.0

    def test_facial_defaults(self):
        value = total_loss({"nce": 1.0, "l2": 1.0, "id": 1.0}, LossWeights.facial())
        assert value == pytest.approx(1.3, abs=1e-12)

    def test_non_facial_defaults(self):
        value = total_loss({"nce": 2.0, "l2": 0.5, "perc": 10.0}, LossWeights.non_facial())
        assert value == pytest.approx(1.1, abs=1e-12)

    def test_missing_term(self):
        with pytest.raises(MissingTerm):
            total_loss({"nce": 1.0, "l2": 1.0}, LossWeights.facial())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.sampled_from(["nce", "l2", "id", "perc"]),
           st.floats(-5, 5))
    def test_linear_in_each_term(self, lambdas, key, bump):
        weights = LossWeights(*lambdas)
        terms = {"nce": 1.0, "l2": 2.0, "id": 0.5, "perc": 3.0}
        moved = dict(terms, **{key: terms[key] + bump})
        lam = getattr(weights, {"nce": "lambda_nce", "l2": "lambda_l2", "id": "lambda_id",
                                "perc": "lambda_perc"}[key])
        assert total_loss(moved, weights) - total_loss(terms, weights) == pytest.approx(lam * bump, abs=1e-9)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_l2=-1)
        with pytest.raises(ValueError):
            LossWeights(tau=0)
