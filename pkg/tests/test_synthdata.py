import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffice import synthdata as sd


def ideal_spec(**kw) -> sd.PhantomSpec:
    base = sd.PhantomSpec(
        cy=14.0, cx=18.0, ay=10.5, ax=14.0, rotation=0.0, ring_intensity=1.0, completeness=1.0, gap_angle=0.0,
        th=sd.Blob(True, -0.05, 0.24, 0.6), csp=sd.Blob(True, 0.36, 0.0, 0.6), fp=sd.Blob(False, -0.6, 0.0, 0.6),
        blur_sigma=0.0, speckle=0.0, gain=1.0, noise_seed=0)
    return dataclasses.replace(base, **kw)


class TestLabelRule:
    def test_ideal_is_sp(self):
        assert sd.label_spec(ideal_spec()) == sd.SP

    def test_fp_present_is_nsp(self):
        spec = ideal_spec(fp=sd.Blob(True, -0.6, 0.0, 0.6))
        assert sd.label_spec(spec) == sd.NSP

    @pytest.mark.parametrize("change", [
        {"th": sd.Blob(False, 0, 0, 0.5)},
        {"csp": sd.Blob(False, 0, 0, 0.5)},
        {"completeness": 0.89},
        {"blur_sigma": sd.SIGMA_MAX + 0.01},
    ])
    def test_each_violation_is_nsp(self, change):
        assert sd.label_spec(ideal_spec(**change)) == sd.NSP

    def test_thresholds_inclusive(self):
        assert sd.label_spec(ideal_spec(completeness=0.9, blur_sigma=sd.SIGMA_MAX)) == sd.SP

    @given(st.integers(0, 2**31 - 1), st.floats(0, 0.4))
    @settings(max_examples=25, deadline=None)
    def test_noise_never_changes_label(self, seed, speckle):
        spec = ideal_spec(noise_seed=seed, speckle=speckle)
        assert sd.render(spec).label == sd.label_spec(spec) == sd.SP


class TestSampleSpec:
    def test_target_sp_satisfies_all_criteria(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = sd.sample_spec(rng, sd.SP)
            assert s.th.present and s.csp.present and not s.fp.present
            assert s.completeness >= 0.9 and s.blur_sigma <= sd.SIGMA_MAX

    def test_target_nsp_violates_something(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert not sd.concept_vector(sd.sample_spec(rng, sd.NSP)).all()

    def test_seeded(self):
        a = sd.sample_spec(np.random.default_rng(5))
        b = sd.sample_spec(np.random.default_rng(5))
        assert a == b

    def test_rejection_budget(self):
        never = sd.Generator(p_th=0.0)
        with pytest.raises(RuntimeError, match="tries"):
            sd.sample_spec(np.random.default_rng(0), sd.SP, never)

    def test_geometry_inside_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            s = sd.sample_spec(rng)
            assert 0 <= s.cx - s.ax - 1 and s.cx + s.ax + 1 <= sd.W + 1.5
            assert 0 <= s.completeness <= 1 and 0 <= s.ring_intensity <= 1

    def test_unconditioned_sp_rate_is_near_clinical(self):
        rng = np.random.default_rng(3)
        labels = [sd.label_spec(sd.sample_spec(rng)) for _ in range(4000)]
        assert np.mean(labels) == pytest.approx(sd.CLINICAL_SP_SHARE, abs=0.03)


class TestRender:
    def test_brightest_pixel_on_ring_when_clean(self):
        spec = ideal_spec(th=sd.Blob(False, 0, 0, 0), csp=sd.Blob(False, 0, 0, 0))
        out = sd.render(spec)
        y, x = np.unravel_index(np.argmax(out.image), out.image.shape)
        assert out.mask[y, x] == sd.SKULL

    def test_masks_follow_presence(self):
        out = sd.render(ideal_spec())
        assert not (out.mask == sd.FP).any()
        assert (out.mask == sd.TH).any() and (out.mask == sd.CSP).any() and (out.mask == sd.SKULL).any()
        fp = sd.render(ideal_spec(fp=sd.Blob(True, -0.6, 0.0, 0.6)))
        assert (fp.mask == sd.FP).any()

    def test_deterministic_bytes(self):
        spec = sd.sample_spec(np.random.default_rng(8))
        assert sd.render(spec).image.tobytes() == sd.render(spec).image.tobytes()

    def test_range_and_shape(self):
        out = sd.render(ideal_spec(gain=3.0, speckle=0.5))
        assert out.image.shape == (sd.H, sd.W) and out.image.dtype == np.float32
        assert out.image.min() >= -1 and out.image.max() <= 1

    def test_structures_visible(self):
        # TH brightens and CSP darkens the interior relative to an empty head
        empty = sd.render(ideal_spec(th=sd.Blob(False, 0, 0, 0), csp=sd.Blob(False, 0, 0, 0))).image
        full = sd.render(ideal_spec())
        assert (full.image - empty)[full.mask == sd.TH].mean() > 0.2
        assert (full.image - empty)[full.mask == sd.CSP].mean() < -0.1


class TestDatasets:
    def test_balance_arithmetic(self):
        data = sd.generate_split(100, 0.15, seed=0)
        assert data.labels.sum() == 15 and len(data) == 100

    def test_paper_balance(self):
        data = sd.generate_split(1579, "paper", seed=0)
        assert data.labels.sum() == 240

    def test_labels_match_specs(self):
        data = sd.generate_split(50, 0.5, seed=1)
        assert [sd.label_spec(s) for s in data.specs] == data.labels.tolist()

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            sd.generate_split(0, 0.5, seed=0)
        with pytest.raises(ValueError, match="class_balance"):
            sd.generate_split(5, 1.5, seed=0)

    def test_splits_differ(self):
        a = sd.generate_split(10, 0.5, seed=0, split="train")
        b = sd.generate_split(10, 0.5, seed=0, split="test")
        assert a.content_hash() != b.content_hash()

    def test_persist_roundtrip_and_hash(self, tmp_path):
        m1 = sd.generate_dataset(tmp_path / "a", {"train": 12, "test": 5}, 0.25, seed=3)
        m2 = sd.generate_dataset(tmp_path / "b", {"train": 12, "test": 5}, 0.25, seed=3)
        assert m1["hash"] == m2["hash"]
        assert m1["splits"]["train"]["n_sp"] == 3
        back = sd.load_split(tmp_path / "a", "train")
        fresh = sd.generate_split(12, 0.25, seed=3, split="train")
        assert back.content_hash() == fresh.content_hash()
        assert back.specs == fresh.specs
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["rule_version"] == sd.RULE_VERSION and manifest["seed"] == 3

    def test_pgm_quantisation(self, tmp_path):
        img = np.linspace(-1, 1, sd.H * sd.W, dtype=np.float32).reshape(sd.H, sd.W)
        sd.write_pgm(tmp_path / "x.pgm", sd.quantize(img))
        assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5")
        back = sd.dequantize(sd.read_pgm(tmp_path / "x.pgm"))
        assert np.max(np.abs(back - img)) <= 1 / 127.5

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot write"):
            sd.generate_dataset(blocker / "sub", {"train": 2}, 0.5, seed=0)
