import numpy as np
import pytest

from src.data_loader import evidence_mask_path, read_manifest
from src.errors import ConfigError
from src.synthetic import CLASS_EDITS, render_pseudo_ecg, synth_dataset


def test_same_seed_same_bytes(tmp_path):
    a = synth_dataset(tmp_path / "a", n_per_class=2, classes=3, seed=5, duration_s=1.0)
    synth_dataset(tmp_path / "b", n_per_class=2, classes=3, seed=5, duration_s=1.0)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for name in a.entries["file"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_other_seed_differs(tmp_path):
    a = synth_dataset(tmp_path / "a", n_per_class=1, classes=2, seed=1, duration_s=1.0)
    synth_dataset(tmp_path / "b", n_per_class=1, classes=2, seed=2, duration_s=1.0)
    name = a.entries["file"].iloc[0]
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_balanced_labels(synth_dir):
    manifest = read_manifest(synth_dir / "manifest.csv")
    assert manifest.task == "multi_class"
    counts = np.bincount([labels[0] for labels in manifest.entries["labels"]])
    np.testing.assert_array_equal(counts, [6, 6, 6, 6])
    mask = np.load(evidence_mask_path(manifest.record_path(0)))
    assert mask.shape == (12, 1000)


@pytest.mark.parametrize("edit", ["no_p", "st_up", "wide_qrs", "st_down", "tall_t"])
def test_edit_confined_to_mask(edit):
    base, empty = render_pseudo_ecg([], 2500, period_s=0.8, phase_s=0.3)
    edited, mask = render_pseudo_ecg([edit], 2500, period_s=0.8, phase_s=0.3)
    assert not empty.any()
    assert mask.any() and not mask.all()
    # one sample of slack at window edges
    near = np.convolve(mask, np.ones(3), mode="same") > 0
    np.testing.assert_allclose(edited[:, ~near], base[:, ~near], atol=1e-12)
    assert np.abs(edited[:, mask] - base[:, mask]).max() > 0.05


def test_mask_covers_window_every_beat():
    lo, hi = CLASS_EDITS["st_up"].window
    _, mask = render_pseudo_ecg(["st_up"], 5000, period_s=1.0, phase_s=0.0)
    t = np.arange(5000) / 500
    expected = ((t % 1.0) >= lo - 1e-9) & ((t % 1.0) <= hi + 1e-9)
    assert np.mean(mask == expected) > 0.999


def test_multi_label_mode(tmp_path):
    manifest = synth_dataset(tmp_path, n_per_class=20, classes=["st_up", "st_down", "no_p", "tall_t"], seed=3,
                             task="multi_label", duration_s=0.5)
    labels = list(manifest.entries["labels"])
    assert any(len(l) == 2 for l in labels)
    assert all(len(l) <= 2 for l in labels)
    # both ST edits never land on one record
    assert not any({0, 1} <= set(l) for l in labels)
    assert read_manifest(tmp_path / "manifest.csv").task == "multi_label"


def test_rejects_bad_arguments(tmp_path):
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, classes=1)
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, classes=["normal", "flutter"])
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, task="regression")
