import hashlib
import json

import numpy as np
import pytest

from asdkit.dataset import (
    ClipRecord,
    CorpusError,
    Manifest,
    SynthSpec,
    assign_splits,
    generate_synthetic,
    machine_signature,
    read_wav,
    render_clip,
    scan_corpus,
    write_wav,
)
from oracles import spectral_centroid


def _touch_wavs(root, names, n=2048):
    for name in names:
        write_wav(root / name, np.zeros(n))


def test_scan_empty_directory(tmp_path):
    with pytest.raises(CorpusError, match="no audio files found"):
        scan_corpus(tmp_path)


def test_scan_missing_directory(tmp_path):
    with pytest.raises(CorpusError, match="unreadable directory"):
        scan_corpus(tmp_path / "nope")


def test_scan_reports_unparseable_file(tmp_path):
    _touch_wavs(tmp_path, ["fan/train/section_00_source_train_normal_0000.wav", "fan/train/garbage.wav"])
    with pytest.raises(CorpusError, match="garbage.wav"):
        scan_corpus(tmp_path)


def test_scan_dcase2020_layout(tmp_path):
    _touch_wavs(tmp_path, ["valve/train/normal_id_02_00000001.wav", "valve/test/anomaly_id_04_00000000.wav"])
    m = scan_corpus(tmp_path, layout="dcase2020")
    assert m.ids_per_type == 5
    by_path = {r.path: r for r in m.records}
    assert by_path["valve/test/anomaly_id_04_00000000.wav"].split == "eval-test"
    assert by_path["valve/test/anomaly_id_04_00000000.wav"].label == "anomaly"


def test_target_domain_files_skipped(tmp_path):
    _touch_wavs(tmp_path, ["fan/train/section_00_source_train_normal_0000.wav",
                           "fan/train/section_00_target_train_normal_0000.wav"])
    assert len(scan_corpus(tmp_path).records) == 1


def _entries(n_types, n_ids, n_per):
    return [
        {"machine_type": f"m{t}", "product_id": k, "phase": "train", "label": "normal", "path": f"m{t}/{k}/{j:04d}"}
        for t in range(n_types) for k in range(n_ids) for j in range(n_per)
    ]


def test_train_val_is_ten_percent_of_100_clips():
    entries = _entries(2, 2, 25)
    splits = assign_splits(entries, 2, seed=1)
    assert splits.count("train-val") == 10
    # oracle: per-stratum quota then fixed-seed shuffle, done independently
    rng = np.random.default_rng(1)
    expected = set()
    strata = {}
    for i, e in enumerate(entries):
        strata.setdefault((e["machine_type"], e["product_id"]), []).append(i)
    quotas = {(f"m{t}", k): q for (t, k), q in zip([(0, 0), (0, 1), (1, 0), (1, 1)], [3, 3, 2, 2])}
    for key in sorted(strata):
        idx = sorted(strata[key], key=lambda i: entries[i]["path"])
        perm = rng.permutation(len(idx))
        expected |= {idx[j] for j in perm[: quotas[key]]}
    assert {i for i, s in enumerate(splits) if s == "train-val"} == expected


def test_full_scale_counts():
    entries = _entries(7, 6, 1000)
    splits = assign_splits(entries, 6, seed=0)
    assert len(splits) == 42000
    assert splits.count("train-val") == 4200
    # each stratum keeps 900 for training
    counts = {}
    for e, s in zip(entries, splits):
        counts[(e["machine_type"], e["product_id"])] = counts.get((e["machine_type"], e["product_id"]), 0) + (s == "train")
    assert set(counts.values()) == {900}


def test_eval_split_by_product_id():
    entries = [{"machine_type": "fan", "product_id": k, "phase": "test", "label": "normal", "path": f"{k}"}
               for k in range(6)]
    assert assign_splits(entries, 6) == ["eval-val"] * 3 + ["eval-test"] * 3


def test_split_assignment_is_deterministic():
    entries = _entries(3, 3, 17)
    assert assign_splits(entries, 3, seed=5) == assign_splits(entries, 3, seed=5)
    assert assign_splits(entries, 3, seed=5) != assign_splits(entries, 3, seed=6)


def test_unknown_label_only_for_training():
    ClipRecord("a.wav", "fan", 0, "train", "unknown", 10.0)
    with pytest.raises(CorpusError):
        ClipRecord("a.wav", "fan", 0, "eval-test", "unknown", 10.0)


def test_manifest_rejects_out_of_range_id():
    with pytest.raises(CorpusError):
        Manifest([ClipRecord("a.wav", "fan", 3, "train", "normal", 1.0)], ["fan"], ids_per_type=3)


def test_manifest_roundtrip_relative_paths(tiny_corpus, tmp_path):
    out = tmp_path / "sub" / "m.json"
    tiny_corpus.save(out)
    payload = json.loads(out.read_text())
    assert all(not r["path"].startswith("/") for r in payload["records"])
    back = Manifest.load(out)
    assert len(back.records) == len(tiny_corpus.records)
    assert all(back.resolve(r).exists() for r in back.records)


def test_synthetic_rejects_degenerate_specs():
    with pytest.raises(CorpusError):
        SynthSpec(machine_types=["fan"])
    with pytest.raises(CorpusError):
        SynthSpec(ids_per_type=1)


def test_synthetic_clip_length_and_format(tiny_corpus):
    r = tiny_corpus.select(split="train")[0]
    x, rate = read_wav(tiny_corpus.resolve(r))
    assert rate == 16000
    assert x.size == 48000
    spec = SynthSpec(clip_s=10.0)
    assert render_clip(spec, machine_signature(spec, "fan", 0), [0]).size == 160000


def test_synthetic_anomalies_only_in_eval(tiny_corpus):
    for r in tiny_corpus.records:
        if r.label == "anomaly":
            assert r.split in ("eval-val", "eval-test")


def _tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*.wav"))}


def test_synthetic_is_byte_reproducible(tmp_path):
    spec = SynthSpec(machine_types=["fan", "pump", "valve"], ids_per_type=3, n_train=2, n_eval_normal=1,
                     n_eval_anomaly=1, clip_s=1.0, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    ha, hb = _tree_hashes(tmp_path / "a"), _tree_hashes(tmp_path / "b")
    assert len(ha) == 3 * 3 * 4
    assert ha == hb
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_three_type_corpus_file_count():
    # 3 types x K=3 x (60 + 20 + 20) = 900 files, counted from the job plan without rendering
    spec = SynthSpec(machine_types=["fan", "pump", "valve"], ids_per_type=3, n_train=60, n_eval_normal=20,
                     n_eval_anomaly=20, seed=7)
    per_id = spec.n_train + spec.n_eval_normal + spec.n_eval_anomaly
    assert len(spec.machine_types) * spec.ids_per_type * per_id == 900


@pytest.mark.parametrize("pid", [0, 1, 2])
def test_frequency_shift_raises_spectral_centroid(pid):
    spec = SynthSpec(freq_shift=0.15, clip_s=2.0)
    sig = machine_signature(spec, "fan", pid)
    normal = render_clip(spec, sig, [9, pid], anomaly=False)
    anomalous = render_clip(spec, sig, [9, pid], anomaly=True)
    assert spectral_centroid(anomalous, 16000) > spectral_centroid(normal, 16000)
