import math

import numpy as np
import pytest

from film.data import (
    BracketSpec,
    TripletRecord,
    estimate_motion_magnitude,
    generate_synthetic_triplets,
    generate_translation_triplets,
    list_sequences,
    load_dataset,
    make_sprite,
    mine_brackets,
    pan_sequence,
    quantize,
    read_image,
    read_index,
    render_sprite,
    select_blend,
    textured_image,
    write_dataset,
    write_image,
)


# generator --------------------------------------------------------------------

def test_zero_disparity_gives_identical_frames():
    for t in generate_synthetic_triplets(3, 32, (0, 0), rng=0):
        assert t.motion_px == 0.0
        assert np.array_equal(t.frame0, t.frame_t) and np.array_equal(t.frame0, t.frame1)


def test_generator_is_deterministic_per_seed():
    a = generate_synthetic_triplets(2, 32, (0, 8), rng=4)
    b = generate_synthetic_triplets(2, 32, (0, 8), rng=4)
    c = generate_synthetic_triplets(2, 32, (0, 8), rng=5)
    assert all(x.frame1.tobytes() == y.frame1.tobytes() for x, y in zip(a, b))
    assert a[0].frame1.tobytes() != c[0].frame1.tobytes()


def replay(seed, count, size, disparity, direction=None):
    """Re-draw the generator's random stream and render with scipy directly."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    s = max(8, size // 3)
    out = []
    for _ in range(count):
        noise = rng.standard_normal((size, size, 3))
        bg = ndimage.gaussian_filter(noise, sigma=(2.0, 2.0, 0), mode="wrap")
        bg = 0.1 + 0.8 * (bg - bg.min(axis=(0, 1))) / (bg - bg.min(axis=(0, 1))).max(axis=(0, 1))
        sprite = make_sprite(s, rng)
        mag = rng.uniform(*disparity) if disparity[1] > disparity[0] else disparity[0]
        angle = rng.uniform(0, 2 * np.pi) if direction is None else direction
        dx, dy = mag * math.cos(angle), mag * math.sin(angle)
        cx = rng.uniform(abs(dx) / 2 + 1, max(abs(dx) / 2 + 1, size - s - abs(dx) / 2 - 1))
        cy = rng.uniform(abs(dy) / 2 + 1, max(abs(dy) / 2 + 1, size - s - abs(dy) / 2 - 1))
        out.append((bg, sprite, mag, (cx, cy), (dx, dy)))
    return out


def test_middle_frame_is_sprite_rendered_half_way():
    trips = generate_synthetic_triplets(3, 48, (8, 8), rng=9, direction=0.0)
    for t, (bg, sprite, mag, (cx, cy), (dx, dy)) in zip(trips, replay(9, 3, 48, (8, 8), 0.0)):
        assert t.motion_px == 8.0 == mag
        np.testing.assert_allclose(t.frame_t, render_sprite(bg, sprite, (cx, cy)), atol=1e-6)
        np.testing.assert_allclose(t.frame0, render_sprite(bg, sprite, (cx - 4, cy)), atol=1e-6)
        np.testing.assert_allclose(t.frame1, render_sprite(bg, sprite, (cx + 4, cy)), atol=1e-6)


def test_integer_offset_rendering_is_index_shift():
    bg = np.zeros((20, 20, 3))
    sprite = make_sprite(8, np.random.default_rng(0))
    a = render_sprite(bg, sprite, (3, 5))
    b = render_sprite(bg, sprite, (7, 5))
    np.testing.assert_allclose(b[:, 4:], a[:, :-4], atol=1e-6)


def test_motion_equals_requested_disparity():
    trips = generate_synthetic_triplets(20, 64, (0, 16), rng=1)
    want = [r[2] for r in replay(1, 20, 64, (0, 16))]
    assert [t.motion_px for t in trips] == pytest.approx(want, rel=1e-15)
    assert all(0 <= t.motion_px <= 16 for t in trips)


def test_disparity_validation():
    with pytest.raises(ValueError):
        generate_synthetic_triplets(1, 16, (0, 9), rng=0)
    with pytest.raises(ValueError):
        generate_synthetic_triplets(1, 16, (4, 2), rng=0)
    with pytest.raises(ValueError):
        TripletRecord(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


def test_translation_triplets_move_whole_frame():
    t = generate_translation_triplets(1, 32, (6, 6), rng=3, direction=0.0)[0]
    assert t.motion_px == 6.0
    # integer shift of 3 px per half step: interior columns are index shifts
    np.testing.assert_allclose(t.frame_t[:, 3:], t.frame0[:, :-3], atol=1e-6)
    np.testing.assert_allclose(t.frame1[:, 3:], t.frame_t[:, :-3], atol=1e-6)


def test_pan_sequence_shift():
    frames = pan_sequence(3, (24, 32), (5, 0), rng=0)
    np.testing.assert_array_equal(frames[1][:, :-5], frames[0][:, 5:])
    np.testing.assert_array_equal(frames[2][:, :-10], frames[0][:, 10:])


# image io ---------------------------------------------------------------------

def test_image_roundtrip_is_quantized(tmp_path):
    img = textured_image((8, 8), 0)
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), quantize(img))


# estimator --------------------------------------------------------------------

def test_identical_frames_zero_motion():
    img = textured_image((64, 64), 0)
    assert estimate_motion_magnitude(img, img) == (0.0, False)


@pytest.mark.parametrize("step", [(6, 0), (0, 4), (3, 3), (-5, 2), (12, 0), (0, -9)])
def test_global_translation_recovered(step):
    f0, f1 = pan_sequence(2, (64, 64), step, rng=2)
    est = estimate_motion_magnitude(f0, f1, radius=12, block=8)
    assert abs(est.pixels - math.hypot(*step)) <= 1.0
    assert not est.low_confidence


def test_sprite_motion_mostly_recovered_within_one_pixel():
    # boundary blocks of a small sprite can still reach the 95th percentile,
    # so this is a rate over a fixed fixture rather than a per-triplet bound
    trips = generate_synthetic_triplets(20, 64, (4, 12), rng=11, sprite_size=32)
    hits = sum(abs(estimate_motion_magnitude(t.frame0, t.frame1, radius=12, block=8).pixels - t.motion_px) <= 1.0
               for t in trips)
    assert hits >= 18


def test_flat_frames_flagged():
    flat = np.full((32, 32, 3), 0.5)
    assert estimate_motion_magnitude(flat, flat) == (0.0, True)


def test_estimator_argument_checks():
    img = textured_image((32, 32), 0)
    with pytest.raises(ValueError):
        estimate_motion_magnitude(img, img, radius=128)
    with pytest.raises(ValueError):
        estimate_motion_magnitude(img, img, radius=40)
    with pytest.raises(ValueError):
        estimate_motion_magnitude(img, img[:16])


# brackets ---------------------------------------------------------------------

def test_bracket_membership():
    spec = BracketSpec()
    assert spec.labels()[spec.bracket_of(30)] == "20-40"
    assert spec.labels()[spec.bracket_of(40)] == "40-60"
    assert spec.bracket_of(0) == 0 and spec.bracket_of(120) is None
    assert [spec.labels()[i] for i in spec.blend_members("0-80")] == ["0-20", "20-40", "40-60", "60-80"]


def test_partition_and_blend_union_on_100_records():
    spec = BracketSpec()
    r = np.random.default_rng(0)
    rows = [{"path": f"r{i}", "motion_px": float(m), "bracket": spec.labels()[spec.bracket_of(m)]}
            for i, m in enumerate(r.uniform(0, 119.99, 100))]
    groups = {label: [x for x in rows if x["bracket"] == label] for label in spec.labels()}
    assert sum(len(g) for g in groups.values()) == 100
    assert all(lo <= x["motion_px"] < hi for (lo, hi), g in zip(spec.brackets, groups.values()) for x in g)
    for lo, hi in spec.blends:
        blend = select_blend(rows, spec, f"{lo:g}-{hi:g}")
        union = [x for i in spec.blend_members((lo, hi)) for x in groups[spec.labels()[i]]]
        assert sorted(x["path"] for x in blend) == sorted(x["path"] for x in union)
        assert len({x["path"] for x in blend}) == len(blend)
        assert all(lo <= x["motion_px"] < hi for x in blend)


def test_bracket_spec_validation():
    with pytest.raises(ValueError):
        BracketSpec(edges=(0, 20, 10))
    with pytest.raises(ValueError):
        BracketSpec(blends=((0, 30),))


# on-disk datasets and mining ------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    trips = generate_synthetic_triplets(3, 16, (0, 4), rng=0)
    write_dataset(tmp_path, trips)
    loaded = load_dataset(tmp_path)
    assert [t.source_id for t in loaded] == [t.source_id for t in trips]
    np.testing.assert_array_equal(loaded[1].frame_t, quantize(trips[1].frame_t))
    assert loaded[2].motion_px == trips[2].motion_px
    assert all(row["bracket"] == "0-20" for row in read_index(tmp_path / "index.csv"))


def test_mining_assigns_known_motions(tmp_path):
    seqs = {"slow": pan_sequence(3, (96, 96), (15, 0), rng=0),
            "fast": pan_sequence(3, (96, 96), (25, 0), rng=1),
            "flat": [np.full((96, 96, 3), 0.3)] * 3}
    result = mine_brackets(seqs, tmp_path, strides=(1,), radius=56, block=16)
    brackets = {row["path"].split("/")[2].split("_")[0]: row["bracket"] for row in result.rows}
    assert brackets == {"slow": "20-40", "fast": "40-60"}
    assert result.low_confidence == 1
    assert result.counts["20-40"] == result.counts["40-60"] == 1
    rows = read_index(tmp_path / "index.csv")
    assert [r["bracket"] for r in rows] == ["20-40", "40-60"]
    assert (tmp_path / "bracket_counts.csv").read_text().splitlines()[2] == "20-40,1"


def test_mining_reads_frame_directories(tmp_path):
    src = tmp_path / "src" / "seq"
    src.mkdir(parents=True)
    for i, f in enumerate(pan_sequence(4, (48, 48), (3, 0), rng=0)):
        write_image(src / f"{i:03d}.png", f)
    (src / "broken.png").write_bytes(b"not an image")
    seqs = list_sequences(tmp_path / "src")
    assert list(seqs) == ["seq"] and len(seqs["seq"]) == 5
    result = mine_brackets(seqs, tmp_path / "out", strides=(1,), radius=16, block=8)
    assert result.unreadable == 1  # only the last triplet touches the broken file
    assert [r["bracket"] for r in result.rows] == ["0-20"] * 2
    loaded = load_dataset(tmp_path / "out", blend="0-40")
    assert len(loaded) == 2 and loaded[0].motion_px == pytest.approx(6.0, abs=1.0)
