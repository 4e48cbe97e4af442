import math

import numpy as np
import pytest

from vitprune.attention import (
    AnalysisError,
    attention_map,
    mean_attention_distance,
    patch_distance_matrix,
    saliency_svg,
    write_pgm,
)
from vitprune.model import AttentionRecord, init_model

from test_model import toy_config, toy_images


def make_record(weights_per_layer, has_cls, grid, patch_size):
    return AttentionRecord(
        layers=[np.asarray(w, dtype=np.float64) for w in weights_per_layer],
        has_cls=has_cls,
        grid=grid,
        patch_size=patch_size,
    )


def random_record(rng, layers=2, heads=3, grid=3, patch_size=8, batch=2, has_cls=True):
    t = grid * grid + (1 if has_cls else 0)
    per_layer = []
    for _ in range(layers):
        raw = rng.random((batch, heads, t, t)) + 1e-3
        per_layer.append(raw / raw.sum(axis=-1, keepdims=True))
    return make_record(per_layer, has_cls, grid, patch_size)


def oracle_distance(record):
    """Explicit double loop over query-key pairs."""
    grid, ps = record.grid, record.patch_size
    n = grid * grid
    per_layer = []
    for weights in record.layers:
        batch, heads = weights.shape[:2]
        acc = np.zeros(heads)
        for b in range(batch):
            for h in range(heads):
                a = weights[b, h]
                if record.has_cls:
                    a = a[1:, 1:]
                per_query = []
                for q in range(n):
                    row = a[q] / a[q].sum()
                    total = 0.0
                    for k in range(n):
                        dy = (q // grid) - (k // grid)
                        dx = (q % grid) - (k % grid)
                        total += row[k] * ps * math.hypot(dy, dx)
                    per_query.append(total)
                acc[h] += np.mean(per_query)
        per_layer.append(acc / batch)
    return per_layer


def test_identity_attention_zero_distance():
    grid, ps = 3, 8
    n = grid * grid
    eye = np.eye(n)[None, None].repeat(2, axis=1)  # 1 image, 2 heads
    record = make_record([eye], has_cls=False, grid=grid, patch_size=ps)
    table = mean_attention_distance(record)
    assert np.allclose(table.distances[0], 0.0)


def test_uniform_attention_on_2x2_grid():
    # hand enumeration: per query (0 + 16 + 16 + 16*sqrt(2)) / 4
    grid, ps = 2, 16
    t = grid * grid + 1  # with cls
    uniform = np.full((1, 1, t, t), 1.0 / t)
    record = make_record([uniform], has_cls=True, grid=grid, patch_size=ps)
    table = mean_attention_distance(record)
    expected = (0 + 16 + 16 + 16 * math.sqrt(2)) / 4
    assert abs(table.distances[0][0] - expected) <= 1e-6
    assert abs(expected - 13.65685424949238) <= 1e-9


def test_concentrated_attention_exact_distance():
    grid, ps = 3, 4
    n = grid * grid
    target = 7  # row 2, col 1
    att = np.zeros((1, 1, n, n))
    att[:, :, :, target] = 1.0
    record = make_record([att], has_cls=False, grid=grid, patch_size=ps)
    table = mean_attention_distance(record)
    dist = patch_distance_matrix(grid, ps)
    expected = dist[:, target].mean()
    assert abs(table.distances[0][0] - expected) <= 1e-12


def test_matches_pair_enumeration_oracle():
    rng = np.random.default_rng(17)
    for case in range(12):
        record = random_record(
            rng,
            layers=int(rng.integers(1, 3)),
            heads=int(rng.integers(1, 4)),
            grid=int(rng.integers(2, 5)),
            batch=int(rng.integers(1, 3)),
            has_cls=bool(rng.integers(0, 2)),
        )
        table = mean_attention_distance(record)
        expected = oracle_distance(record)
        for got, want in zip(table.distances, expected):
            assert np.max(np.abs(got - want)) <= 1e-9, f"case {case}"


def test_distance_bounds():
    rng = np.random.default_rng(23)
    record = random_record(rng, grid=4, patch_size=16)
    table = mean_attention_distance(record)
    bound = 16 * math.sqrt(2) * (4 - 1)
    for _, _, value in table.rows():
        assert 0.0 <= value <= bound
    assert table.max_possible == bound


def test_head_permutation_consistency():
    rng = np.random.default_rng(29)
    record = random_record(rng, layers=1, heads=4)
    perm = [3, 1, 0, 2]
    permuted = make_record(
        [record.layers[0][:, perm]], record.has_cls, record.grid, record.patch_size
    )
    base = mean_attention_distance(record).distances[0]
    swapped = mean_attention_distance(permuted).distances[0]
    assert np.allclose(swapped, base[perm], atol=1e-12)


def test_dataset_average_is_weighted_mean_of_images():
    rng = np.random.default_rng(31)
    rec_a = random_record(rng, batch=3)
    rec_b = random_record(rng, batch=2)
    combined = mean_attention_distance([rec_a, rec_b])
    only_a = mean_attention_distance(rec_a)
    only_b = mean_attention_distance(rec_b)
    for c, a, b in zip(combined.distances, only_a.distances, only_b.distances):
        weighted = (3 * a + 2 * b) / 5
        assert np.max(np.abs(c - weighted)) <= 1e-9


def test_token_count_mismatch_rejected():
    rng = np.random.default_rng(37)
    record = random_record(rng, grid=3, has_cls=False)
    record.grid = 4  # lie about the geometry
    with pytest.raises(AnalysisError, match="tokens"):
        mean_attention_distance(record)


def test_csv_layout():
    rng = np.random.default_rng(41)
    table = mean_attention_distance(random_record(rng, layers=2, heads=2))
    lines = table.to_csv().strip().splitlines()
    assert lines[0] == "layer,head,mean_distance_px,n_images"
    assert len(lines) == 1 + 4


# -- attention maps -----------------------------------------------------------


def test_attention_map_saliency_normalized():
    model = init_model(toy_config(), seed=3)
    img = toy_images(1, seed=3)[0]
    amap = attention_map(model, img, layer=1)
    assert abs(amap.saliency.sum() - 1.0) <= 1e-9
    assert amap.heatmap.shape == (32, 32)
    assert amap.blended.shape == (32, 32)
    assert np.all((amap.blended >= 0) & (amap.blended <= 1))


def test_attention_map_uniform_keeps_all_patches():
    model = init_model(toy_config(), seed=4)
    # overwrite the recorded attention path by constructing the mask directly
    from vitprune.attention import _token_mask

    uniform = np.full(16, 1.0 / 16)
    assert _token_mask(uniform, 0.9).all()


def test_attention_map_one_hot_mask_single_patch():
    from vitprune.attention import _token_mask

    sal = np.zeros(16)
    sal[5] = 1.0
    mask = _token_mask(sal, 0.9)
    assert mask[5] and mask.sum() == 1


def test_cls_mode_requires_cls_token():
    cfg = toy_config(pooling="mean", use_cls_token=False)
    model = init_model(cfg, seed=5)
    img = toy_images(1, seed=5, cfg=cfg)[0]
    with pytest.raises(AnalysisError, match="cls"):
        attention_map(model, img, layer=0, mode="cls_query")
    # token-mask mode falls back to received attention and still works
    amap = attention_map(model, img, layer=0, mode="token_mask")
    assert abs(amap.saliency.sum() - 1.0) <= 1e-9


def test_writers_emit_parseable_files(tmp_path):
    model = init_model(toy_config(), seed=6)
    img = toy_images(1, seed=6)[0]
    amap = attention_map(model, img, layer=0)
    pgm = tmp_path / "heat.pgm"
    write_pgm(pgm, amap.blended)
    raw = pgm.read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n")
    assert len(raw) == len(b"P5\n32 32\n255\n") + 32 * 32
    svg = saliency_svg(amap.saliency, amap.mask)
    assert svg.startswith("<svg") and svg.endswith("</svg>")
    assert svg.count("<rect") >= 16
