import numpy as np
import pytest

from vitprune.data import (
    DataError,
    DomainDataset,
    SplitProtocol,
    SynthConfig,
    ingest_folder,
    load_dataset,
    save_dataset,
    split,
    synth_generate,
)


def small_synth(seed=0, per_domain=28):
    return synth_generate(SynthConfig(per_domain=per_domain), seed=seed)


# -- synthetic generator --------------------------------------------------------


def test_synth_deterministic():
    a = small_synth()
    b = small_synth()
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)
    for x, y in zip(a.labels, b.labels):
        assert np.array_equal(x, y)


def test_synth_seed_sensitivity():
    a = small_synth(seed=0)
    b = small_synth(seed=1)
    assert any(not np.array_equal(x, y) for x, y in zip(a.images, b.images))


def test_synth_label_invariance_across_domains():
    ds = small_synth()
    # construction: label sequence is the class cycle in every domain
    for labs in ds.labels:
        assert np.array_equal(labs, np.arange(len(labs)) % ds.num_classes)


def test_synth_shapes_and_ranges():
    ds = small_synth()
    assert ds.num_domains == 4 and ds.num_classes == 7
    assert ds.image_shape == (3, 32, 32)
    for imgs in ds.images:
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_synth_domain_statistics_separated():
    # regression values frozen from the first verified run (per_domain=200,
    # seed=0): sketch is bright (~0.89), texture dark (~0.24); separation
    # between them far exceeds the 3 sigma requirement
    ds = synth_generate(SynthConfig(per_domain=200), seed=0)
    sketch = ds.images[ds.domain_names.index("sketch")].mean(axis=(1, 2, 3))
    texture = ds.images[ds.domain_names.index("texture")].mean(axis=(1, 2, 3))
    assert abs(sketch.mean() - 0.894) <= 0.02
    assert abs(texture.mean() - 0.243) <= 0.02
    pooled = np.sqrt((sketch.var() + texture.var()) / 2)
    assert abs(sketch.mean() - texture.mean()) >= 3 * pooled


def test_synth_invalid_configs_rejected():
    with pytest.raises(DataError, match="classes"):
        synth_generate(SynthConfig(classes=1), seed=0)
    with pytest.raises(DataError, match="domains"):
        synth_generate(SynthConfig(domains=9), seed=0)


def test_dataset_archive_roundtrip(tmp_path):
    ds = small_synth()
    path = tmp_path / "ds.zip"
    save_dataset(ds, path)
    save_dataset(ds, tmp_path / "ds2.zip")
    assert path.read_bytes() == (tmp_path / "ds2.zip").read_bytes()
    loaded = load_dataset(path)
    assert loaded.class_names == ds.class_names
    assert loaded.domain_names == ds.domain_names
    for x, y in zip(loaded.images, ds.images):
        assert np.array_equal(x, y)


# -- folder ingestion -------------------------------------------------------------


def _write_tree(root, domains=("d0", "d1"), classes=("ca", "cb"), n=3, size=16):
    from PIL import Image

    rng = np.random.default_rng(0)
    for d in domains:
        for c in classes:
            folder = root / d / c
            folder.mkdir(parents=True)
            for i in range(n):
                arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
                Image.fromarray(arr, "RGB").save(folder / f"img_{i}.png")


def test_ingest_folder_enumerates_samples(tmp_path):
    _write_tree(tmp_path)
    ds = ingest_folder(tmp_path, image_size=16)
    assert ds.provenance == "folder"
    assert ds.domain_names == ["d0", "d1"]
    assert ds.class_names == ["ca", "cb"]
    assert ds.total_samples() == 12
    assert np.array_equal(ds.labels[0], np.array([0, 0, 0, 1, 1, 1]))
    # channel normalization: dataset mean ~0, std ~1
    stacked = np.concatenate(ds.images)
    assert np.all(np.abs(stacked.mean(axis=(0, 2, 3))) <= 1e-9)
    assert np.all(np.abs(stacked.std(axis=(0, 2, 3)) - 1.0) <= 1e-9)


def test_ingest_folder_deterministic_order(tmp_path):
    _write_tree(tmp_path)
    a = ingest_folder(tmp_path, image_size=16)
    b = ingest_folder(tmp_path, image_size=16)
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)


def test_ingest_missing_class_rejected(tmp_path):
    _write_tree(tmp_path)
    extra = tmp_path / "d1" / "cc"
    extra.mkdir()
    with pytest.raises(DataError, match="cc"):
        ingest_folder(tmp_path, image_size=16)


def test_ingest_undecodable_file_named(tmp_path):
    _write_tree(tmp_path)
    bad = tmp_path / "d0" / "ca" / "broken.png"
    bad.write_bytes(b"this is not an image")
    with pytest.raises(DataError, match="broken.png"):
        ingest_folder(tmp_path, image_size=16)


# -- splits -------------------------------------------------------------------------


def grid_dataset(per_domain=100, domains=4):
    rng = np.random.default_rng(3)
    images = [rng.random((per_domain, 1, 8, 8)) for _ in range(domains)]
    labels = [rng.integers(0, 5, size=per_domain).astype(np.int64) for _ in range(domains)]
    return DomainDataset(
        [f"c{i}" for i in range(5)],
        [f"dom{i}" for i in range(domains)],
        images,
        labels,
        provenance="synthetic",
    )


def test_pooled_holdout_sizes():
    ds = grid_dataset(per_domain=100, domains=4)
    train, valid, test = split(ds, SplitProtocol(seed=0))
    assert len(test) == 80  # 20 per domain
    assert len(train) + len(valid) == 320
    assert len(valid) == 4 * 8  # 10% of each domain's 80-sample pool
    for d in range(4):
        assert (test.domains == d).sum() == 20


def test_lodo_isolates_holdout_domain():
    ds = grid_dataset()
    train, valid, test = split(
        ds, SplitProtocol(kind="leave_one_domain_out", holdout_domain="dom2", seed=0)
    )
    assert set(test.domains.tolist()) == {2}
    assert 2 not in train.domains and 2 not in valid.domains
    assert len(test) == 100


def test_lodo_unknown_holdout_rejected():
    ds = grid_dataset()
    with pytest.raises(DataError, match="dom9"):
        split(ds, SplitProtocol(kind="leave_one_domain_out", holdout_domain="dom9"))


def test_split_deterministic():
    ds = grid_dataset()
    a = split(ds, SplitProtocol(seed=7))
    b = split(ds, SplitProtocol(seed=7))
    for x, y in zip(a, b):
        assert np.array_equal(x.images, y.images)
        assert np.array_equal(x.labels, y.labels)


def test_split_disjoint_and_exhaustive():
    ds = grid_dataset(per_domain=53)  # odd size exercises rounding
    train, valid, test = split(ds, SplitProtocol(seed=5))
    # tag each sample by (domain, fingerprint) and check the partition
    def tags(ss):
        return {
            (int(d), arr.tobytes())
            for d, arr in zip(ss.domains, ss.images)
        }

    t, v, e = tags(train), tags(valid), tags(test)
    assert t.isdisjoint(v) and t.isdisjoint(e) and v.isdisjoint(e)
    assert len(t | v | e) == ds.total_samples()


def test_invalid_protocol_rejected():
    ds = grid_dataset()
    with pytest.raises(DataError, match="train_fraction"):
        split(ds, SplitProtocol(train_fraction=1.5))
    with pytest.raises(DataError, match="holdout"):
        split(ds, SplitProtocol(kind="leave_one_domain_out"))
