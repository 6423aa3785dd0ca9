import logging
import re
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import pytest

from src.errors import ShapeError
from src.explain import (RandomizationReport, combine_lead_maps, evidence_mass_fraction, grad_cam,
                         grad_cam_per_backbone, lead_wise_explanation, normalize_map, randomized_classifier,
                         rank_correlation, sanity_check, upsample)
from src.render import render_explanation, render_sanity_comparison


def count_axes(svg_path) -> int:
    root = ET.parse(svg_path).getroot()
    return sum(1 for el in root.iter() if re.fullmatch(r"axes_\d+", el.attrib.get("id", "")))


class TestGradCam:
    def test_gap_fc_closed_form(self, rng):
        # score = sum_ch w[ch] * mean_t A[ch, t]  =>  dS/dA[ch, t] = w[ch] / L
        a = rng.normal(size=(5, 12))
        w = rng.normal(size=5)
        gradient = np.repeat((w / 12)[:, None], 12, axis=1)
        expected = np.maximum((w[:, None] / 12 * a).sum(axis=0), 0.0)
        np.testing.assert_allclose(grad_cam(a, gradient), expected)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            grad_cam(np.zeros((2, 4)), np.zeros((2, 5)))

    def test_per_backbone_maps(self, tiny_model, rng):
        x = rng.normal(size=(3, 64)).astype(np.float32)
        cams = grad_cam_per_backbone(tiny_model, x, 1)
        tiny_model.forward(x[None])
        feature_length = tiny_model.backbones[0].final_activation.shape[-1]
        assert len(cams) == 3
        for cam in cams:
            assert cam.shape == (feature_length,)
            assert (cam >= 0).all()

    def test_model_is_not_written(self, tiny_model, rng):
        before = {name: p.value.copy() for name, p in tiny_model.named_parameters()}
        buffers = {name: b.copy() for name, b in tiny_model.named_buffers()}
        lead_wise_explanation(tiny_model, rng.normal(size=(3, 64)), 0)
        for name, p in tiny_model.named_parameters():
            assert not p.grad.any()
            np.testing.assert_array_equal(p.value, before[name])
        for name, b in tiny_model.named_buffers():
            np.testing.assert_array_equal(b, buffers[name])
        assert all(b.final_activation is None for b in tiny_model.backbones)

    def test_concurrent_explanations_match_sequential(self, tiny_model, rng):
        inputs = rng.normal(size=(8, 3, 64))
        expected = [lead_wise_explanation(tiny_model, x) for x in inputs]
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda x: lead_wise_explanation(tiny_model, x), inputs))
        for got, want in zip(results, expected):
            assert got.class_id == want.class_id
            np.testing.assert_allclose(got.alpha, want.alpha)
            np.testing.assert_allclose(got.maps, want.maps)


class TestMaps:
    def test_normalize_contract(self, rng):
        m = rng.normal(size=50)
        out = normalize_map(m)
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_allclose(normalize_map(3.5 * m + 2.0), out, atol=1e-12)
        np.testing.assert_array_equal(normalize_map(np.full(7, 0.3)), np.zeros(7))

    def test_upsample_aligns_endpoints(self):
        up = upsample(np.array([0.0, 1.0, 4.0]), 5)
        np.testing.assert_allclose(up, [0.0, 0.5, 1.0, 2.5, 4.0])
        np.testing.assert_array_equal(upsample(np.array([2.0]), 4), np.full(4, 2.0))

    def test_combine_zero_weight_lead(self):
        cams = [np.array([0.0, 1.0, 2.0])] * 3
        maps = combine_lead_maps(cams, np.array([0.0, 0.5, 1.0]), 9)
        assert maps.shape == (3, 9)
        np.testing.assert_array_equal(maps[0], 0.0)
        np.testing.assert_allclose(maps[1], maps[2])

    def test_zero_attention_lead_has_empty_map(self, tiny_model, rng):
        bias = tiny_model.attention.fc2.bias.value
        bias[0] = -1e4
        explanation = lead_wise_explanation(tiny_model, rng.normal(size=(3, 64)))
        assert explanation.alpha[0] == 0.0
        np.testing.assert_array_equal(explanation.maps[0], 0.0)

    def test_explanation_contract(self, tiny_model, rng):
        x = rng.normal(size=(1, 3, 64))
        explanation = lead_wise_explanation(tiny_model, x, record_id="r7")
        logits, _ = tiny_model.forward(x)
        assert explanation.class_id == int(np.argmax(logits[0]))
        assert explanation.maps.shape == (3, 64)
        assert ((explanation.maps >= 0) & (explanation.maps <= 1)).all()
        assert np.all((explanation.alpha > 0) & (explanation.alpha < 1))
        assert explanation.record_id == "r7"

    def test_bad_class_id(self, tiny_model):
        with pytest.raises(ShapeError):
            lead_wise_explanation(tiny_model, np.zeros((3, 64)), class_id=3)

    def test_evidence_mass_fraction(self):
        maps = np.zeros((3, 10))
        maps[:, 2:4] = 1.0
        maps[0, 8] = 2.0
        mask = np.zeros(10, dtype=bool)
        mask[2:4] = True
        assert evidence_mass_fraction(maps, mask) == pytest.approx(6 / 8)
        assert evidence_mass_fraction(np.zeros((3, 10)), mask) == 0.0


class TestRankCorrelation:
    def test_identity_and_reversal(self, rng):
        a = rng.random(40)
        assert rank_correlation(a, a) == (pytest.approx(1.0), False)
        assert rank_correlation(a, -a)[0] == pytest.approx(-1.0)

    def test_constant_map(self, rng):
        assert rank_correlation(np.zeros(10), rng.random(10)) == (0.0, True)


class TestSanityCheck:
    def test_randomized_copy_only_touches_classifier(self, tiny_model):
        randomized = randomized_classifier(tiny_model, seed=5)
        original = tiny_model.state_dict()
        changed = {name for name, value in randomized.state_dict().items()
                   if not np.array_equal(value, original[name])}
        assert changed == {"classifier.weight", "classifier.bias"}
        again = randomized_classifier(tiny_model, seed=5)
        np.testing.assert_array_equal(again.classifier.weight.value, randomized.classifier.weight.value)

    def test_report(self, tiny_model, rng, tmp_path, caplog):
        inputs = rng.normal(size=(3, 3, 64)).astype(np.float32)
        with caplog.at_level(logging.WARNING):
            report, pairs = sanity_check(tiny_model, inputs, ids=["a", "b", "c"], seed=2, progress=False)
        assert "at least 100" in caplog.text
        assert len(pairs) == 3
        assert len(report.table) == 9
        assert report.table["rho"].between(-1.0, 1.0).all()
        for original, randomized in pairs:
            assert original.class_id == randomized.class_id
        lines = report.write(tmp_path / "sanity.csv").read_text().splitlines()
        assert lines[0] == "# seed=2"
        assert lines[1] == "lead,recording_id,rho,undefined"
        assert lines[2].startswith("I,a,")
        assert len(lines) == 2 + 9
        assert list(report.per_lead().index) == ["I", "II", "V1"]

    def test_written_report_keeps_seed_and_undefined_flag(self, tmp_path):
        table = pd.DataFrame({"lead": ["I", "II"], "recording_id": ["007", "007"], "rho": [0.5, 0.0],
                              "undefined": [False, True]})
        path = RandomizationReport(table=table, seed=11).write(tmp_path / "sanity.csv")
        assert path.read_text().splitlines()[3] == "II,007,0.000000,1"
        assert path.read_text().splitlines()[0] == "# seed=11"
        again = pd.read_csv(path, comment="#", dtype={"recording_id": str})
        assert list(again.columns) == ["lead", "recording_id", "rho", "undefined"]
        assert list(again["undefined"]) == [0, 1]
        assert list(again["recording_id"]) == ["007", "007"]

    def test_rejects_flat_input(self, tiny_model):
        with pytest.raises(ShapeError):
            sanity_check(tiny_model, np.zeros((3, 64)), progress=False)


class TestRender:
    def test_explanation_figure(self, tiny_model, rng, tmp_path):
        x = rng.normal(size=(3, 64))
        explanation = lead_wise_explanation(tiny_model, x, record_id="r1")
        path = render_explanation(x, explanation, tmp_path / "fig" / "r1.svg", sampling_rate=32)
        assert path.stat().st_size > 0
        assert count_axes(path) == 3

    def test_sanity_figure(self, tiny_model, rng, tmp_path):
        x = rng.normal(size=(1, 3, 64))
        report, [(original, randomized)] = sanity_check(tiny_model, x, progress=False)
        path = render_sanity_comparison(x[0], original, randomized, tmp_path / "pair.svg",
                                        rhos=report.table["rho"].tolist())
        assert count_axes(path) == 6

    def test_shape_mismatch(self, tiny_model, rng, tmp_path):
        explanation = lead_wise_explanation(tiny_model, rng.normal(size=(3, 64)))
        with pytest.raises(ShapeError):
            render_explanation(np.zeros((3, 32)), explanation, tmp_path / "bad.svg")
