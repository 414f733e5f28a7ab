import dataclasses
import math
import time

import numpy as np
import pytest

from diffice import diffusion as D
from diffice import guidance as G
from diffice import models as M
from diffice import synthdata as sd
from diffice.autodiff import gradcheck
from diffice.autodiff import tensor as T
from diffice.autodiff.tensor import NonFiniteError, ShapeError, Tensor

F64 = np.float64


@pytest.fixture(scope="module")
def sched():
    return D.respace(D.build_schedule(1000), 400)


def small_bundle(sched, dtype=np.float32, seed=0):
    rng = np.random.default_rng(seed)
    den = D.UNetDenoiser(rng, (4, 8, 8), 8, dtype=dtype).freeze()
    f = M.QualityClassifier(rng, seg_widths=(4, 8, 8), pred_widths=(4, 8, 8), dtype=dtype).freeze()
    fg = M.FeatureNet(rng, dim=8, widths=(4, 8, 8), dtype=dtype).freeze()
    return G.ModelBundle(den, f, fg, sched)


@pytest.fixture(scope="module")
def bundle(sched):
    return small_bundle(sched)


@pytest.fixture(scope="module")
def bundle64(sched):
    return small_bundle(sched, F64, seed=1)


@pytest.fixture(scope="module")
def images():
    data = sd.generate_split(6, 0.0, seed=5, split="guid")
    return data.images, data.ids


def nhwc(x):
    return np.asarray(x)[..., None]


class _SureClassifier:
    """Logits putting all mass on one class."""

    def __init__(self, y):
        self.y = y

    def logits(self, x):
        z = np.full((x.shape[0], 2), -50.0)
        z[:, self.y] = 50.0
        return Tensor(z)


class TestLoss:
    def test_identical_input_has_no_proximity_term(self, bundle64, images):
        x = nhwc(images[0][:2]).astype(F64)
        lp = G.per_image_losses(Tensor(x), x, sd.SP, bundle64.classifier, bundle64.f_guid, 0.0, 30.0)
        assert np.all(lp.data == 0.0)
        total = G.guidance_loss(Tensor(x), x, sd.SP, bundle64.classifier, bundle64.f_guid, 0.0, 30.0)
        assert total.item() == 0.0

    def test_confident_target_has_no_classification_term(self, bundle64, images):
        x = nhwc(images[0][:2]).astype(F64)
        loss = G.per_image_losses(Tensor(x), x, sd.SP, _SureClassifier(sd.SP), bundle64.f_guid, 40.0, 0.0)
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-30)
        wrong = G.per_image_losses(Tensor(x), x, sd.SP, _SureClassifier(sd.NSP), bundle64.f_guid, 1.0, 0.0)
        np.testing.assert_allclose(wrong.data, 100.0, rtol=1e-12)

    def test_terms_match_hand_computation(self, bundle64, images):
        x = nhwc(images[0][:3]).astype(F64)
        xh = x + 0.05
        logits = bundle64.classifier.logits(Tensor(xh)).data
        nll = -(logits[:, 1] - np.log(np.exp(logits).sum(1)))
        fa = bundle64.f_guid.features(Tensor(xh)).data
        fb = bundle64.f_guid.features(Tensor(x)).data
        expected = 3.0 * nll + 7.0 * ((fa - fb) ** 2).sum(1)
        got = G.per_image_losses(Tensor(xh), x, sd.SP, bundle64.classifier, bundle64.f_guid, 3.0, 7.0)
        np.testing.assert_allclose(got.data, expected, rtol=1e-10)

    def test_errors(self, bundle64, images):
        x = nhwc(images[0][:2]).astype(F64)
        with pytest.raises(ShapeError):
            G.guidance_loss(Tensor(x), x[:1], sd.SP, bundle64.classifier, bundle64.f_guid, 1.0, 1.0)
        with pytest.raises(NonFiniteError):
            G.guidance_loss(Tensor(x * np.nan), x, sd.SP, bundle64.classifier, bundle64.f_guid, 1.0, 1.0)


class TestGradients:
    def test_half_square_norm_gives_x0(self, bundle, sched, images):
        xt = nhwc(images[0][:2]).astype(np.float32)
        g, eps = G.grad_wrt_denoised(xt, 50, bundle.denoiser, sched, lambda x0: T.sum_(T.square(x0)) * 0.5)
        np.testing.assert_allclose(g, D.one_step_denoise(xt, 50, eps, sched), rtol=1e-6)

    def test_denoised_matches_finite_differences(self, bundle64, sched, images):
        x = nhwc(images[0][:1]).astype(F64)
        xt = D.forward_sample(x, 60, np.random.default_rng(0).standard_normal(x.shape), sched)

        def loss(x0):
            return G.guidance_loss(x0, x, sd.SP, bundle64.classifier, bundle64.f_guid, 40.0, 30.0)

        g, eps = G.grad_wrt_denoised(xt, 60, bundle64.denoiser, sched, loss)
        x0 = D.one_step_denoise(xt, 60, eps, sched)
        res = gradcheck.finite_diff_check(loss, x0, step=1e-6, kink_tol=1e-3)
        np.testing.assert_allclose(g, res.analytic, rtol=1e-12)
        assert res.max_rel_error < 1e-3

    def test_noisy_matches_directional_differences(self, bundle64, sched, images):
        x = nhwc(images[0][:1]).astype(F64)
        t = 40
        xt = D.forward_sample(x, t, np.random.default_rng(1).standard_normal(x.shape), sched)

        def loss_of_xt(arr):
            eps = bundle64.denoiser(Tensor(arr), sched.model_t(t))
            return G.guidance_loss(D.one_step_denoise(Tensor(arr), t, eps, sched), x, sd.SP,
                                   bundle64.classifier, bundle64.f_guid, 40.0, 30.0).item()

        g, _ = G.grad_wrt_noisy(xt, t, bundle64.denoiser, sched,
                                lambda x0: G.guidance_loss(x0, x, sd.SP, bundle64.classifier, bundle64.f_guid,
                                                           40.0, 30.0))
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(8):
            v = rng.standard_normal(x.shape)
            v /= np.linalg.norm(v)
            numeric = (loss_of_xt(xt + h * v) - loss_of_xt(xt - h * v)) / (2 * h)
            assert abs(np.sum(g * v) - numeric) <= 1e-3 * (abs(numeric) + 1e-8)

    def test_zero_denoiser_scales_by_inverse_sqrt_alpha_bar(self, bundle64, sched, images):
        class Zero:
            def __call__(self, x, t):
                return x * 0.0

        x = nhwc(images[0][:2]).astype(F64)
        t = 90

        def loss(x0):
            return G.guidance_loss(x0, x, sd.SP, bundle64.classifier, bundle64.f_guid, 40.0, 30.0)

        gd, _ = G.grad_wrt_denoised(x + 0.1, t, Zero(), sched, loss)
        gn, _ = G.grad_wrt_noisy(x + 0.1, t, Zero(), sched, loss)
        np.testing.assert_allclose(gn, gd / math.sqrt(sched.ab(t)), rtol=1e-10, atol=1e-14)

    def test_terms_add_linearly(self, bundle64, sched, images):
        x = nhwc(images[0][:2]).astype(F64)
        xt = x * 0.8

        def g(lc, lp):
            return G.grad_wrt_denoised(xt, 30, bundle64.denoiser, sched, lambda x0: G.guidance_loss(
                x0, x, sd.SP, bundle64.classifier, bundle64.f_guid, lc, lp))[0]

        np.testing.assert_allclose(g(40.0, 30.0), g(40.0, 0.0) + g(0.0, 30.0), rtol=1e-9, atol=1e-12)
        p_only = g(0.0, 30.0).ravel()
        scaled = g(0.0, 1.0).ravel()
        assert p_only @ scaled / np.linalg.norm(p_only) / np.linalg.norm(scaled) == pytest.approx(1.0, abs=1e-12)

    def test_denoised_mode_never_tapes_the_denoiser(self, sched, images, monkeypatch):
        b = small_bundle(sched, seed=3)
        for p in b.denoiser.parameters():
            p.requires_grad = True  # unfrozen on purpose: the estimator itself must avoid the tape
        ids = {id(p) for p in b.denoiser.parameters()}
        taped = {"n": 0}
        real_make = T._make

        def spy(op, data, parents, backward_fn):
            out = real_make(op, data, parents, backward_fn)
            if out.requires_grad and any(id(p) in ids for p in parents):
                taped["n"] += 1
            return out

        monkeypatch.setattr(T, "_make", spy)
        x = nhwc(images[0][:2]).astype(np.float32)

        def loss(x0):
            return G.guidance_loss(x0, x, sd.SP, b.classifier, b.f_guid, 40.0, 30.0)

        G.grad_wrt_denoised(x, 20, b.denoiser, sched, loss)
        assert taped["n"] == 0
        assert all(p.grad is None for p in b.denoiser.parameters())
        G.grad_wrt_noisy(x, 20, b.denoiser, sched, loss)
        assert taped["n"] > 0  # the instrument does see the denoiser when it is taped

    def test_noisy_costs_more(self, bundle, sched, images):
        x = nhwc(images[0]).astype(np.float32)

        def loss(x0):
            return G.guidance_loss(x0, x, sd.SP, bundle.classifier, bundle.f_guid, 40.0, 30.0)

        def clock(fn, reps=5):
            fn(x, 20, bundle.denoiser, sched, loss)
            t0 = time.perf_counter()
            for _ in range(reps):
                fn(x, 20, bundle.denoiser, sched, loss)
            return time.perf_counter() - t0

        assert clock(G.grad_wrt_noisy) > clock(G.grad_wrt_denoised)


class TestGuidedStep:
    def test_zero_gradient_is_bit_identical(self, bundle, sched, images):
        x = nhwc(images[0]).astype(np.float32)
        for t in (1, 2, 77):
            a = G.guided_reverse_step(x, t, np.zeros_like(x), bundle.denoiser, sched, np.random.default_rng(4))
            b = D.reverse_step(x, t, bundle.denoiser, sched, np.random.default_rng(4))
            assert a.tobytes() == b.tobytes()

    def test_monte_carlo_mean_shift(self, sched):
        class Const:
            def __call__(self, x, t):
                return x * 0.0 + 0.3

        t, n = 120, 10_000
        xt = np.full((n, 1, 1, 1), 0.2)
        g = np.full_like(xt, 5.0)
        out = G.guided_reverse_step(xt, t, g, Const(), sched, np.random.default_rng(5))
        mu = D.predict_mu(xt[:1], t, np.full((1, 1, 1, 1), 0.3), sched).item()
        target = mu - sched.sigma2(t) * 5.0
        se = math.sqrt(sched.sigma2(t) / n)
        assert abs(out.mean() - target) < 3 * se
        assert abs(target - mu) > 10 * se  # the shift itself is resolvable at this sample size

    def test_doubling_gradient_doubles_shift(self, bundle, sched, images):
        x = nhwc(images[0][:2]).astype(F64)
        g = np.random.default_rng(6).standard_normal(x.shape)
        eps = np.zeros_like(x)

        def run(scale):
            return G.guided_reverse_step(x, 50, g * scale, bundle.denoiser, sched, np.random.default_rng(7), eps)

        base = run(0.0)
        np.testing.assert_allclose(run(2.0) - base, 2.0 * (run(1.0) - base), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(run(1.0) - base, -sched.sigma2(50) * g, rtol=1e-9, atol=1e-12)

    def test_errors(self, bundle, sched):
        x = np.zeros((1, 28, 36, 1), np.float32)
        with pytest.raises(ShapeError):
            G.guided_reverse_step(x, 5, np.zeros((1, 28, 36)), bundle.denoiser, sched, np.random.default_rng(0))
        with pytest.raises(NonFiniteError):
            G.guided_reverse_step(x, 5, x + np.inf, bundle.denoiser, sched, np.random.default_rng(0))
        with pytest.raises(ValueError, match="timestep"):
            G.guided_reverse_step(x, 0, x, bundle.denoiser, sched, np.random.default_rng(0))


def cfg(**kw):
    base = dict(tau=4, L=3, lambda_c_candidates=(40.0,), lambda_c=40.0)
    base.update(kw)
    return G.GuidanceConfig(**base)


class TestCounterfactual:
    def test_seeded_determinism_and_range(self, bundle, images):
        x, ids = images
        a = G.counterfactual_once(x[:3], x[:3], sd.SP, cfg(), bundle, 11, ids[:3])
        b = G.counterfactual_once(x[:3], x[:3], sd.SP, cfg(), bundle, 11, ids[:3])
        assert a.tobytes() == b.tobytes()
        assert a.min() >= -1 and a.max() <= 1
        c = G.counterfactual_once(x[:3], x[:3], sd.SP, cfg(), bundle, 12, ids[:3])
        assert a.tobytes() != c.tobytes()

    def test_batch_composition_is_irrelevant(self, bundle, images):
        x, ids = images
        whole = G.diff_ice(x, ids, cfg(L=2, lambda_c_candidates=(40.0, 80.0)), bundle, 3, score=False)
        for k in range(len(ids)):
            one = G.diff_ice(x[k:k + 1], ids[k:k + 1], cfg(L=2, lambda_c_candidates=(40.0, 80.0)), bundle, 3,
                             score=False)[0]
            assert one.content_hash() == whole[k].content_hash()

    def test_single_iteration_equals_one_pass(self, bundle, images):
        x, ids = images
        rec = G.diff_ice(x[:2], ids[:2], cfg(L=1), bundle, 9, score=False)
        once = G.counterfactual_once(x[:2], x[:2], sd.SP, cfg(L=1), bundle, 9, ids[:2])
        for k in range(2):
            assert rec[k].final.tobytes() == once[k, ..., 0].tobytes()

    def test_proximity_anchored_to_original(self, bundle, images):
        x, ids = images
        seen = []
        G.diff_ice(x[:2], ids[:2], cfg(L=3), bundle, 1, observer=lambda xh, xo: seen.append(xo.copy()),
                   score=False)
        assert len(seen) == 3 * 4
        for xo in seen:
            np.testing.assert_array_equal(xo[..., 0], x[:2])

    def test_iterations_feed_forward(self, bundle, images):
        x, ids = images
        recs = G.diff_ice(x[:2], ids[:2], cfg(L=2), bundle, 5, score=False)
        second = G.counterfactual_once(np.stack([r.iterations[0] for r in recs]), x[:2], sd.SP, cfg(L=2),
                                       bundle, 5, ids[:2], iteration=2)
        for k in range(2):
            assert recs[k].iterations[1].tobytes() == second[k, ..., 0].tobytes()

    def test_noise_redraw_flag(self, bundle, images):
        # at tau=1 the corruption draw is the only randomness (the last step adds none)
        x, ids = images
        z = dict(tau=1, lambda_c=0.0, lambda_p=0.0, lambda_c_candidates=(0.0,))

        def run(it, redraw):
            return G.counterfactual_once(x[:1], x[:1], sd.SP, cfg(redraw_noise=redraw, **z), bundle, 2, ids[:1],
                                         iteration=it).tobytes()

        assert run(2, True) != run(1, True)
        assert run(2, False) == run(1, True)

    def test_record_shape(self, bundle, images):
        x, ids = images
        recs = G.diff_ice(x[:2], ids[:2], cfg(L=3), bundle, 0)
        for r in recs:
            assert r.L == 3 and len(r.p_sp) == 3 and r.config["L"] == 3
            assert all(-1 <= im.min() and im.max() <= 1 for im in r.iterations)
            assert 0.0 <= r.p_sp_original <= 1.0

    def test_resolution_scale_equals_scaling_both_strengths(self, bundle, images):
        # the loss is linear in (lambda_c, lambda_p), so scaling g matches scaling both up to rounding
        x, ids = images
        strong = dict(tau=20, lambda_c=4e4, lambda_p=3e4)
        scaled = G.counterfactual_once(x[:2], x[:2], sd.SP, cfg(resolution_scale=0.25, **strong), bundle, 4, ids[:2])
        weaker = G.counterfactual_once(x[:2], x[:2], sd.SP, cfg(tau=20, lambda_c=1e4, lambda_p=7.5e3), bundle, 4,
                                       ids[:2])
        full = G.counterfactual_once(x[:2], x[:2], sd.SP, cfg(**strong), bundle, 4, ids[:2])
        np.testing.assert_allclose(scaled, weaker, atol=1e-5)
        assert np.abs(scaled - full).max() > 1e-2

    @pytest.mark.parametrize("bad", [dict(tau=0), dict(tau=401), dict(L=0), dict(lambda_p=-1.0),
                                     dict(grad_mode="both"), dict(search="global"), dict(lambda_c_candidates=()),
                                     dict(resolution_scale=0.0), dict(resolution_scale=float("nan"))])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            dataclasses.replace(G.GuidanceConfig(), **bad).validate(400)


class TestLambdaSearch:
    """The search rule on a stubbed chain: image k flips for lambda >= threshold[k]."""

    thresholds = {"a": 40.0, "b": 80.0, "c": 60.0, "d": 1e9, "e": 1e9}
    best_for_none = {"d": 60.0, "e": 40.0}

    @pytest.fixture
    def stubbed(self, monkeypatch):
        calls = []

        def chain(x, ids, lam, config, models, seed, timings, observer=None):
            calls.append((lam, list(ids)))
            out = np.stack([np.full((28, 36, 1), lam, np.float32)] * len(ids))
            out[:, 0, 0, 0] = [list(self.thresholds).index(i) for i in ids]
            return [out] * config.L

        def prob(models, x, target):
            keys = [list(self.thresholds)[int(v)] for v in x[:, 0, 0, 0]]
            lam = x[:, 1, 1, 0]
            p = []
            for k, l in zip(keys, lam):
                if l >= self.thresholds[k]:
                    p.append(0.9)
                else:  # no flip: the preferred candidate has the highest probability
                    p.append(0.4 if self.best_for_none.get(k) == l else 0.1)
            return np.array(p)

        monkeypatch.setattr(G, "_run_chain", chain)
        monkeypatch.setattr(G, "_target_prob", prob)
        return calls

    def brute_force(self, candidates):
        out = {}
        for k, th in self.thresholds.items():
            flips = [c for c in candidates if c >= th]
            out[k] = min(flips) if flips else self.best_for_none.get(k, candidates[0])
        return out

    def test_per_image_rule(self, stubbed, sched):
        b = G.ModelBundle(None, None, None, sched)
        ids = list(self.thresholds)
        x = np.zeros((5, 28, 36), np.float32)
        recs = G.diff_ice(x, ids, cfg(L=1, lambda_c_candidates=(80.0, 40.0, 60.0)), b, 0, score=False)
        assert {r.image_id: r.lambda_c for r in recs} == self.brute_force([40.0, 60.0, 80.0])
        # lazy evaluation: later candidates only run on images that have not flipped yet
        assert [c[0] for c in stubbed] == [40.0, 60.0, 80.0]
        assert stubbed[1][1] == ["b", "c", "d", "e"] and stubbed[2][1] == ["b", "d", "e"]

    def test_per_dataset_rule(self, stubbed, sched):
        b = G.ModelBundle(None, None, None, sched)
        ids = list(self.thresholds)
        x = np.zeros((5, 28, 36), np.float32)
        recs = G.diff_ice(x, ids, cfg(L=1, lambda_c_candidates=(40.0, 60.0, 80.0), search="per_dataset"), b, 0,
                          score=False)
        # flip counts 1, 2, 3 for 40, 60, 80
        assert {r.lambda_c for r in recs} == {80.0}
