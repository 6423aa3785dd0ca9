import numpy as np
import pandas as pd
import pytest

from src.data_loader import (CHEST_LEAD_VARIANTS, STANDARD_LEADS, DatasetManifest, ECGDataLoader, ECGRecord,
                             describe_dataset, lead_indices, load_record, preprocess, read_manifest, write_manifest,
                             write_record)
from src.errors import RecordFormatError


def make_record(signals, leads=("I", "II", "V1"), rate=500, record_id="rec-1", labels=(1,)):
    return ECGRecord(id=record_id, signals=np.asarray(signals, dtype=np.float32), lead_names=tuple(leads),
                     sampling_rate=rate, labels=labels, age=54.0, sex="F")


def write_raw(path, header_lines, payload: bytes):
    path.write_bytes(("\n".join(header_lines) + "\n\n").encode("utf-8") + payload)


HEADER = ["id=raw", "leads=I,II,V1", "sampling_rate=500", "length=10", "labels=0"]


class TestRecords:
    def test_zeros_record(self, tmp_path):
        path = tmp_path / "zeros.ecg"
        write_record(make_record(np.zeros((3, 5000))), path)
        record = load_record(path)
        assert record.signals.shape == (3, 5000)
        assert not record.signals.any()
        x = preprocess(record).x
        assert x.shape == (3, 5000) and x.dtype == np.float32
        assert not x.any()

    def test_metadata_round_trip(self, tmp_path, rng):
        path = tmp_path / "r.ecg"
        write_record(make_record(rng.normal(size=(3, 20)), labels=(0, 2)), path)
        record = load_record(path)
        assert record.id == "rec-1"
        assert record.lead_names == ("I", "II", "V1")
        assert record.labels == (0, 2)
        assert record.age == 54.0 and record.sex == "F"

    def test_millivolt_is_scaled(self, tmp_path):
        path = tmp_path / "mv.ecg"
        write_raw(path, HEADER + ["unit=millivolt"], np.full(30, 1.5, dtype="<f4").tobytes())
        record = load_record(path)
        assert record.amplitude_unit == "microvolt"
        np.testing.assert_array_equal(record.signals, 1500.0)

    def test_truncated_payload_names_lead_row(self, tmp_path):
        path = tmp_path / "short.ecg"
        write_raw(path, HEADER + ["unit=microvolt"], np.ones(28, dtype="<f4").tobytes())
        with pytest.raises(RecordFormatError, match=r"lead row 2 \(V1\)"):
            load_record(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ecg"
        write_raw(path, ["id=x", "not a header line"], b"")
        with pytest.raises(RecordFormatError, match="line 2"):
            load_record(path)
        write_raw(path, HEADER + ["unit=volt"], np.ones(30, dtype="<f4").tobytes())
        with pytest.raises(RecordFormatError, match="volt"):
            load_record(path)

    def test_header_not_utf8(self, tmp_path):
        path = tmp_path / "latin.ecg"
        path.write_bytes(b"id=\xff\xfe\nleads=I\n\n")
        with pytest.raises(RecordFormatError, match="byte offset 3"):
            load_record(path)

    def test_bad_age(self, tmp_path):
        path = tmp_path / "age.ecg"
        write_raw(path, HEADER + ["unit=microvolt", "age=old"], np.ones(30, dtype="<f4").tobytes())
        with pytest.raises(RecordFormatError, match="old"):
            load_record(path)


class TestPreprocess:
    def test_pads_with_exact_zeros(self, rng):
        record = make_record(rng.normal(3.0, 2.0, size=(3, 300)))
        x = preprocess(record, length=500).x
        assert not x[:, 300:].any()
        np.testing.assert_allclose(x[:, :300].mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(x[:, :300].std(axis=1), 1.0, atol=1e-4)

    def test_truncates(self, rng):
        signals = rng.normal(size=(3, 300))
        x = preprocess(make_record(signals), length=100, standardize=False).x
        np.testing.assert_allclose(x, signals[:, :100].astype(np.float32))

    def test_selects_requested_leads(self, rng):
        signals = rng.normal(size=(12, 50))
        record = make_record(signals, leads=STANDARD_LEADS)
        out = preprocess(record, ("I", "II", "V2"), length=50, standardize=False)
        np.testing.assert_allclose(out.x, signals[[0, 1, 7]].astype(np.float32))
        assert out.leads == ("I", "II", "V2")

    def test_missing_lead(self, rng):
        with pytest.raises(RecordFormatError, match="V3"):
            preprocess(make_record(rng.normal(size=(3, 10))), ("I", "II", "V3"), length=10)

    def test_sampling_rate_mismatch(self, rng):
        with pytest.raises(RecordFormatError, match="250 Hz"):
            preprocess(make_record(rng.normal(size=(3, 10)), rate=250), length=10)


class TestLeads:
    def test_indices(self):
        assert lead_indices(("I", "II", "V2")) == (0, 1, 7)
        with pytest.raises(RecordFormatError):
            lead_indices(("I", "II", "V7"))

    def test_chest_variants(self):
        assert len(CHEST_LEAD_VARIANTS) == 6
        assert len({lead_indices(v) for v in CHEST_LEAD_VARIANTS}) == 6
        assert all(v[:2] == ("I", "II") for v in CHEST_LEAD_VARIANTS)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = pd.DataFrame({"file": ["a.ecg", "b.ecg", "c.ecg"], "labels": [(0,), (0, 2), (1,)]})
        manifest = DatasetManifest(root=tmp_path, entries=entries, task="multi_label", classes=["x", "y", "z"],
                                   leads=("I", "II", "V4"))
        write_manifest(manifest, tmp_path / "manifest.csv")
        text = (tmp_path / "manifest.csv").read_text()
        assert text.startswith("# task=multi_label\n# classes=x,y,z\n# leads=I,II,V4\nfile,labels\n")
        loaded = read_manifest(tmp_path / "manifest.csv")
        assert loaded.task == "multi_label"
        assert loaded.classes == ["x", "y", "z"]
        assert loaded.leads == ("I", "II", "V4")
        assert list(loaded.entries["labels"]) == [(0,), (0, 2), (1,)]

    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(RecordFormatError):
            DatasetManifest(root=tmp_path, entries=pd.DataFrame({"file": ["a"], "labels": [(5,)]}),
                            task="multi_class", classes=["a", "b"])

    @pytest.mark.parametrize("task,labels", [
        ("multi_class", [(0,), ()]),
        ("multi_class", [(0,), (0, 1)]),
        ("multi_label", [(0, 1), ()]),
    ])
    def test_entry_label_count(self, tmp_path, task, labels):
        entries = pd.DataFrame({"file": ["a.ecg", "b.ecg"], "labels": labels})
        with pytest.raises(RecordFormatError, match="b.ecg"):
            DatasetManifest(root=tmp_path, entries=entries, task=task, classes=["x", "y"])

    def test_read_manifest_rejects_unlabeled_row(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("# task=multi_class\n# classes=x,y\nfile,labels\na.ecg,0\nb.ecg,\n")
        with pytest.raises(RecordFormatError, match=r"manifest.csv: b.ecg"):
            read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(RecordFormatError, match="not found"):
            read_manifest(tmp_path / "nope.csv")

    def test_missing_record_file(self, tmp_path):
        entries = pd.DataFrame({"file": ["gone.ecg"], "labels": [(0,)]})
        write_manifest(DatasetManifest(root=tmp_path, entries=entries, task="multi_class", classes=["a", "b"]),
                       tmp_path / "manifest.csv")
        with pytest.raises(RecordFormatError, match="missing files"):
            ECGDataLoader(tmp_path / "manifest.csv", length=10).load_dataset()


class TestLoader:
    def test_load_with_masks(self, synth_dir):
        dataset = ECGDataLoader(synth_dir / "manifest.csv", length=1000).load_dataset(with_masks=True)
        assert dataset.x.shape == (24, 3, 1000)
        assert dataset.y.shape == (24, 4)
        assert (dataset.y.sum(axis=1) == 1).all()
        assert len(dataset.masks) == 24
        assert all(m.shape == (3, 1000) and m.dtype == bool for m in dataset.masks)
        normal = np.flatnonzero(dataset.y[:, 0])
        assert not any(dataset.masks[i].any() for i in normal)

    def test_pagination(self, synth_dir):
        loader = ECGDataLoader(synth_dir / "manifest.csv", leads=("I", "II", "V5"), length=1000)
        page = loader.load_dataset(start_index=20, limit=10)
        assert len(page) == 4
        assert page.leads == ("I", "II", "V5")
        assert [len(batch) for batch in loader.stream_batches(10)] == [10, 10, 4]

    def test_subset(self, synth_dir):
        dataset = ECGDataLoader(synth_dir / "manifest.csv", length=1000).load_dataset()
        part = dataset.subset(np.array([3, 0]))
        assert part.ids == [dataset.ids[3], dataset.ids[0]]
        np.testing.assert_array_equal(part.x[1], dataset.x[0])

    def test_describe(self, synth_dir):
        table = describe_dataset(synth_dir / "manifest.csv")
        assert list(table.index) == ["normal", "no_p", "st_up", "wide_qrs"]
        assert (table["count"] == 6).all()
        np.testing.assert_allclose(table["frequency_pct"], 25.0)
        assert table["age_mean"].between(20, 90).all()
        assert table["male_pct"].between(0, 100).all()
