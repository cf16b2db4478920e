"""
Test PPM I/O, scene synthesis and the dataset layout
"""

import numpy as np
import pytest
from pydantic import ValidationError

from services.common.exceptions import ConfigError, DatasetError, DimensionError, FormatError
from services.data.dataset import (
    denormalize,
    iter_batches,
    load_dataset,
    member_path,
    normalize,
    read_split,
    sample_id,
    stack_batch,
    write_dataset,
)
from services.data.ppm import ppm_decode, ppm_encode, ppm_read, ppm_write
from services.data.scenes import (
    GROUND_GRASS,
    PALETTE,
    SceneObject,
    SceneSpec,
    background_mask,
    horizon_row,
    random_scene,
    render_aerial,
    render_ground,
    synth_triplet,
)


# ============ PPM ============

def test_ppm_header_is_canonical():
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    assert ppm_encode(img)[:11] == b"P6\n3 2\n255\n"
    assert len(ppm_encode(img)) == 11 + 18
    assert ppm_encode(np.full((1, 1, 3), 255, dtype=np.uint8)) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_round_trip(gen, tmp_path):
    img = gen.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    ppm_write(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(ppm_read(tmp_path / "x.ppm"), img)


def test_ppm_decode_accepts_flexible_whitespace():
    data = b"P6 \t2\r\n1  255\n" + bytes(range(6))
    img = ppm_decode(data)
    assert img.shape == (1, 2, 3)
    assert img[0, 1, 2] == 5


def test_ppm_bad_magic():
    with pytest.raises(FormatError) as exc_info:
        ppm_decode(b"P3\n1 1\n255\n\x00\x00\x00")
    assert exc_info.value.offset == 0


def test_ppm_truncated_payload_reports_counts():
    data = b"P6\n2 2\n255\n" + b"\x00" * 10
    with pytest.raises(FormatError) as exc_info:
        ppm_decode(data)
    details = exc_info.value.details
    assert details["expected_bytes"] == 12
    assert details["actual_bytes"] == 10
    assert details["offset"] == len(data)


def test_ppm_rejects_other_maxval():
    with pytest.raises(FormatError):
        ppm_decode(b"P6\n1 1\n65535\n" + b"\x00" * 6)


def test_ppm_rejects_trailing_bytes():
    with pytest.raises(FormatError):
        ppm_decode(b"P6\n1 1\n255\n" + b"\x00" * 4)


def test_ppm_header_digits_are_ascii_only():
    # 0xB2 is a digit to str.isdigit but not to the PPM grammar
    with pytest.raises(FormatError) as exc_info:
        ppm_decode(b"P6\n\xb2 1\n255\n" + bytes(6))
    assert exc_info.value.offset == 3


def test_ppm_encode_needs_rgb_uint8():
    with pytest.raises(DimensionError):
        ppm_encode(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(DimensionError):
        ppm_encode(np.zeros((2, 2, 3), dtype=np.float32))


def test_ppm_write_leaves_no_temp_files(tmp_path):
    ppm_write(tmp_path / "a.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
    assert [p.name for p in tmp_path.iterdir()] == ["a.ppm"]


# ============ Scenes ============

def test_random_scene_is_deterministic():
    assert random_scene(5) == random_scene(5)
    assert random_scene(5) != random_scene(6)


def test_random_scene_contents():
    for seed in range(20):
        spec = random_scene(seed)
        classes = [o.cls for o in spec.objects]
        assert 1 <= classes.count("building") <= 3
        assert classes.count("road") <= 1
        assert "sky" not in classes


def test_scene_object_validation():
    with pytest.raises(ValidationError):
        SceneObject(cls="building", x0=0.5, y0=0.1, x1=0.4, y1=0.2, color=(1, 2, 3))
    with pytest.raises(ValidationError):
        SceneObject(cls="sky", x0=0.1, y0=0.1, x1=0.2, y1=0.2, color=(1, 2, 3))
    with pytest.raises(ValidationError):
        SceneObject(cls="car", x0=0.1, y0=0.1, x1=0.2, y1=0.2, color=(1, 2, 300))


def test_empty_scene_is_all_background():
    triplet = synth_triplet(SceneSpec(), 64)
    assert background_mask(triplet.ground).all()
    hz = horizon_row(64)
    assert (triplet.semantic[:hz] == PALETTE["sky"]).all()
    assert (triplet.semantic[hz:] == PALETTE["grass"]).all()
    assert (triplet.aerial == triplet.aerial[0, 0]).all()


def test_building_appears_in_both_views():
    building = SceneObject(cls="building", x0=0.4, y0=0.3, x1=0.6, y1=0.5, height=0.5, color=(150, 150, 150))
    spec = SceneSpec(objects=[building])
    aerial = render_aerial(spec, 64)
    ground, semantic = render_ground(spec, 64)

    aerial_hits = (aerial == (150, 150, 150)).all(axis=-1)
    assert aerial_hits.sum() == pytest.approx(0.2 * 64 * 0.2 * 64, abs=2 * 64 * 0.2 + 1)
    assert (semantic == PALETTE["building"]).all(axis=-1).any()
    # a tall building rises above the horizon
    assert (semantic[: horizon_row(64)] == PALETTE["building"]).all(axis=-1).any()
    assert not background_mask(ground).all()
    assert len(np.unique(semantic.reshape(-1, 3), axis=0)) == 3


def test_grass_patch_only_changes_the_semantic_map():
    lawn = SceneObject(cls="grass", x0=0.2, y0=0.2, x1=0.6, y1=0.6, color=(120, 170, 90))
    ground, semantic = render_ground(SceneSpec(objects=[lawn]), 64)
    assert (ground[horizon_row(64):] == GROUND_GRASS).all()
    assert (semantic == PALETTE["grass"]).all(axis=-1).any()


def test_unsupported_size():
    with pytest.raises(ConfigError):
        synth_triplet(SceneSpec(), 48)


# ============ Dataset ============

def test_sample_ids_are_zero_padded():
    assert sample_id(7) == "00007"


def test_normalize_range_and_inverse(gen):
    img = gen.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    x = normalize(img)
    assert x.shape == (3, 4, 4)
    assert x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0
    np.testing.assert_array_equal(denormalize(x), img)
    ends = normalize(np.array([[[0, 255, 0]]], dtype=np.uint8))
    assert ends[0, 0, 0] == -1.0 and ends[1, 0, 0] == 1.0


def test_normalize_needs_uint8():
    with pytest.raises(DimensionError):
        normalize(np.zeros((2, 2, 3), dtype=np.float32))


def test_denormalize_clips():
    out = denormalize(np.full((3, 1, 1), 5.0))
    assert out.shape == (1, 1, 3)
    assert (out == 255).all()


def test_write_dataset_layout(tmp_path):
    splits = write_dataset(tmp_path, seed=7, count=5, size=32)
    assert splits == {"train": ["00000", "00001", "00002", "00003"], "test": ["00004"]}
    assert (tmp_path / "split.txt").read_text() == "train: 00000 00001 00002 00003\ntest: 00004\n"
    assert len(list(tmp_path.glob("*.ppm"))) == 15
    assert member_path(tmp_path, "00000", "aerial").name == "00000_a.ppm"


def test_write_dataset_is_byte_identical(tmp_path):
    write_dataset(tmp_path / "a", seed=3, count=4, size=32)
    write_dataset(tmp_path / "b", seed=3, count=4, size=32)
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes(), path.name


def test_write_dataset_rejects_bad_arguments(tmp_path):
    with pytest.raises(ConfigError):
        write_dataset(tmp_path, seed=0, count=0, size=32)
    with pytest.raises(ConfigError):
        write_dataset(tmp_path, seed=0, count=2, size=32, test_fraction=1.0)


def test_load_dataset(tiny_dataset_dir):
    train = load_dataset(tiny_dataset_dir, "train")
    test = load_dataset(tiny_dataset_dir, "test")
    assert [s.id for s in train] == [sample_id(i) for i in range(8)]
    assert [s.id for s in test] == ["00008", "00009"]
    assert train[0].aerial.shape == (3, 32, 32)


def test_missing_member_names_the_sample(tmp_path):
    write_dataset(tmp_path, seed=1, count=3, size=32)
    member_path(tmp_path, "00001", "ground").unlink()
    with pytest.raises(DatasetError) as exc_info:
        load_dataset(tmp_path, "train")
    assert exc_info.value.sample_id == "00001"


def test_corrupt_member_names_the_sample(tmp_path):
    write_dataset(tmp_path, seed=1, count=2, size=32)
    member_path(tmp_path, "00000", "semantic").write_bytes(b"P6\n32 32\n255\n\x00")
    with pytest.raises(DatasetError) as exc_info:
        load_dataset(tmp_path, "train")
    assert exc_info.value.sample_id == "00000"


def test_member_with_non_ascii_header_digit_names_the_sample(tmp_path):
    write_dataset(tmp_path, seed=1, count=2, size=32)
    member_path(tmp_path, "00000", "aerial").write_bytes(b"P6\n\xb2\xb2 32\n255\n" + bytes(32 * 32 * 3))
    with pytest.raises(DatasetError) as exc_info:
        load_dataset(tmp_path, "train")
    assert exc_info.value.sample_id == "00000"


def test_bad_split_file(tmp_path):
    (tmp_path / "split.txt").write_text("validation: 00000\n")
    with pytest.raises(DatasetError):
        read_split(tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "dev")


def test_iter_batches(tiny_train):
    order = np.arange(len(tiny_train))[::-1]
    batches = list(iter_batches(tiny_train, order, batch_size=3))
    assert [index for index, _ in batches] == [0, 1, 2]
    aerial, semantic, ground = batches[-1][1]
    assert aerial.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(batches[0][1][0][0], tiny_train[7].aerial)

    resumed = list(iter_batches(tiny_train, order, batch_size=3, start=2))
    assert [index for index, _ in resumed] == [2]


def test_stack_batch(tiny_train):
    aerial, semantic, ground = stack_batch(tiny_train[:2])
    assert aerial.shape == semantic.shape == ground.shape == (2, 3, 32, 32)
