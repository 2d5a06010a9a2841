import json

import numpy as np
import pytest

from mscnet.data import (
    Dataset, GenConfig, change_ratio_stats, generate_dataset, proportion_below, read_manifest,
)
from mscnet.data.dataset import binarize, collate, load_sample
from mscnet.data.stats import ascii_table
from mscnet.data.synth import largest_remainder, plan_dataset, synthesize_sample
from mscnet.errors import ConfigError, DataError
from mscnet.formats import encode_pnm, write_pgm

ONE_PCT = [{"max_pct": 0.9, "proportion": 0.0}, {"max_pct": 1.1, "proportion": 1.0}]


def _samples(cfg):
    return [synthesize_sample(cfg, i, p) for i, p in enumerate(plan_dataset(cfg))]


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    generate_dataset(GenConfig(count=20, size=64, seed=3, camouflage_fraction=0.5), d)
    return d


def test_same_seed_gives_identical_trees(tmp_path):
    cfg = GenConfig(count=6, size=64, seed=9)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b", threads=3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_one_percent_request_at_256():
    cfg = GenConfig(count=5, size=256, seed=1, unchanged_fraction=0.0, buckets=ONE_PCT)
    for s in _samples(cfg):
        assert 655 - 66 <= int((s.label > 0).sum()) <= 655 + 66


def test_unchanged_fraction_is_exact():
    plan = plan_dataset(GenConfig(count=100, size=64, unchanged_fraction=0.2))
    assert sum(p["bucket"] is None for p in plan) == 20


def test_label_is_footprint_symmetric_difference():
    for s in _samples(GenConfig(count=6, size=64, seed=2)):
        fp = np.zeros((2, 64, 64), bool)
        for b in s.buildings:
            for t, present in enumerate((b.in_t1, b.in_t2)):
                if present:
                    fp[t, b.y : b.y + b.h, b.x : b.x + b.w] = True
        assert np.array_equal(s.label > 0, fp[0] ^ fp[1])


def test_nir_separates_buildings_from_vegetation():
    for s in _samples(GenConfig(count=6, size=128, seed=4, camouflage_fraction=1.0)):
        nir = s.nir_t1 / 255.0
        built = np.zeros(nir.shape, bool)
        for b in s.buildings:
            if b.in_t1:
                assert nir[b.y : b.y + b.h, b.x : b.x + b.w].mean() < 0.35
                built[b.y : b.y + b.h, b.x : b.x + b.w] = True
        assert nir[~built].mean() > 0.55


def test_camouflaged_changes_invisible_in_rgb_but_not_masks_option():
    cfg = GenConfig(count=10, size=64, seed=6, camouflage_fraction=1.0, unchanged_fraction=0.0)
    for s in _samples(cfg):
        assert s.camouflaged
        for b in s.buildings:
            if b.changed:
                t = 0 if b.in_t1 else 1
                mask = s.mask_t1 if t == 0 else s.mask_t2
                assert not mask[b.y : b.y + b.h, b.x : b.x + b.w].any()
    oracle = _samples(GenConfig(**{**cfg.to_dict(), "masks_include_camouflaged": True}))
    assert any(s.mask_t1.any() or s.mask_t2.any() for s in oracle)


def test_split_ratio_default():
    plan = plan_dataset(GenConfig(count=200, size=64))
    got = {k: sum(p["split"] == k for p in plan) for k in ("train", "val", "test")}
    assert got == {"train": 140, "val": 20, "test": 40}
    assert largest_remainder([0.7, 0.1, 0.2], 7) == [5, 1, 1]


@pytest.mark.parametrize("bad", [
    {"buckets": [{"max_pct": 60, "proportion": 1.0}]},
    {"buckets": [{"max_pct": 2, "proportion": 0.7}, {"max_pct": 1, "proportion": 0.3}]},
    {"split_ratio": (0.5, 0.5, 0.5)},
    {"size": 48},
    {"nonsense": 1},
])
def test_generator_config_errors(bad):
    with pytest.raises(ConfigError):
        GenConfig.from_dict(bad)


def test_binarize_threshold():
    assert binarize(np.array([127, 128, 0, 255], np.uint8)).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_dataset_loading(small_ds):
    train = Dataset(small_ds, "train")
    everything = Dataset(small_ds)
    assert len(everything) == 20 and 0 < len(train) < 20
    s = train.samples[0]
    assert s.rgb_t1.shape == (3, 64, 64) and s.nir_t1.shape == (1, 64, 64) and s.size == (64, 64)
    assert set(np.unique(s.label)) <= {0.0, 1.0}
    assert train.by_id(s.id) is s
    with pytest.raises(DataError):
        train.by_id("zzz")
    b = collate(train.samples[:2], hflip=[True, False], nir_channels=3)
    assert b["nir_t1"].shape == (2, 3, 64, 64)
    assert np.array_equal(b["rgb_t1"][0], s.rgb_t1[..., ::-1])


def test_truncated_file_is_data_error_naming_path(small_ds, tmp_path):
    entry = dict(read_manifest(small_ds)[0])
    bad = tmp_path / "cut.pgm"
    bad.write_bytes(encode_pnm(np.zeros((64, 64), np.uint8))[:100])
    entry["label"] = str(bad)
    with pytest.raises(DataError, match="cut.pgm"):
        load_sample(entry, small_ds)


def test_size_mismatch_is_data_error(small_ds, tmp_path):
    entry = dict(read_manifest(small_ds)[0])
    write_pgm(tmp_path / "small.pgm", np.zeros((32, 32), np.uint8))
    entry["mask_t2"] = str(tmp_path / "small.pgm")
    with pytest.raises(DataError, match="small.pgm"):
        load_sample(entry, small_ds)


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(DataError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path)


def test_stats_single_image_one_percent(tmp_path):
    label = np.zeros(65536, np.uint8)
    label[:655] = 255
    write_pgm(tmp_path / "l.pgm", label.reshape(256, 256))
    stats = change_ratio_stats([{"label": "l.pgm"}], tmp_path)
    assert round(stats["mean_ratio_pct"], 2) == 1.00
    assert stats["buckets"][0] == {"max_pct": 1, "proportion": 1.0}


def test_stats_all_unchanged(tmp_path):
    write_pgm(tmp_path / "l.pgm", np.zeros((32, 32), np.uint8))
    stats = change_ratio_stats([{"label": "l.pgm"}] * 3, tmp_path)
    assert stats["changed"] == 0 and stats["unchanged"] == 3
    assert ascii_table(stats).startswith("0 changed images")


def test_stats_agree_with_generator(tmp_path):
    buckets = [{"max_pct": 1, "proportion": 0.3}, {"max_pct": 2, "proportion": 0.3},
               {"max_pct": 5, "proportion": 0.4}]
    generate_dataset(GenConfig(count=40, size=128, seed=8, buckets=buckets), tmp_path)
    stats = change_ratio_stats(read_manifest(tmp_path), tmp_path)
    assert abs(100 * proportion_below(stats, 2) - 60) <= 5
    assert stats["changed"] + stats["unchanged"] == 40
    json.dumps(stats)
    assert "changed images" in ascii_table(stats)
