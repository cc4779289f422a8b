"""Dataset decode, batching, synthetic data, and results CSV contracts."""

import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s3ta.data import (
    AugmentConfig,
    DataFormatError,
    DatasetSpec,
    ResultRow,
    augment_batch,
    iterate_batches,
    load_dataset,
    make_synthetic_batch,
    write_record_binary,
    write_results,
    write_synthetic_dataset,
)
from s3ta.model import ImageBatch

# ---------------------------------------------------------------------------
# record-binary decode
# ---------------------------------------------------------------------------


def small_spec(path, **kwargs) -> DatasetSpec:
    defaults = dict(height=2, width=3, channels=1, num_classes=4)
    defaults.update(kwargs)
    return DatasetSpec(path=str(path), **defaults)


def write_raw(path, records: list[tuple[int, list[int]]]) -> None:
    blob = b"".join(bytes([label, *pixels]) for label, pixels in records)
    path.write_bytes(blob)


def test_decode_is_exactly_byte_over_255(tmp_path):
    # One record with every interesting byte value; the expected pixel sum
    # is computed from the raw bytes, independent of the loader.
    pixel_bytes = [0, 1, 127, 128, 254, 255]
    path = tmp_path / "one.bin"
    write_raw(path, [(2, pixel_bytes)])
    batch = load_dataset(small_spec(path))
    assert batch.pixels.shape == (1, 2, 3, 1)
    assert batch.pixels.dtype == torch.float32
    assert int(batch.labels[0]) == 2
    flat = batch.pixels.reshape(-1)
    for value, byte in zip(flat.tolist(), pixel_bytes):
        assert value == np.float32(byte) / np.float32(255.0)
    assert float(flat.max()) == 1.0  # byte 255 decodes to exactly 1.0
    assert float(flat.min()) == 0.0
    expected_sum = float(sum(np.float32(b) / np.float32(255.0) for b in pixel_bytes))
    assert float(flat.sum()) == pytest.approx(expected_sum, abs=1e-6)


def test_fixture_pixel_sum_constant(tmp_path):
    # Deterministic fixture: record r has label r % 4 and pixel bytes
    # (r * 6 + j) % 256. The loader's total pixel mass must equal the
    # closed-form sum of those bytes divided by 255.
    path = tmp_path / "fixture.bin"
    records = []
    for r in range(32):
        records.append((r % 4, [(r * 6 + j) % 256 for j in range(6)]))
    write_raw(path, records)
    expected = sum(b for _, pixels in records for b in pixels) / 255.0
    batch = load_dataset(small_spec(path))
    assert float(batch.pixels.sum()) == pytest.approx(expected, rel=1e-6)
    assert batch.labels.tolist() == [r % 4 for r in range(32)]


def test_planar_channel_layout(tmp_path):
    # Record-binary stores channel planes contiguously: all of channel 0,
    # then channel 1. A 1x2x2-pixel record with distinct bytes pins the
    # transpose.
    path = tmp_path / "planar.bin"
    write_raw(path, [(0, [10, 20, 30, 40, 50, 60, 70, 80])])
    spec = DatasetSpec(path=str(path), height=2, width=2, channels=2, num_classes=2)
    batch = load_dataset(spec)
    img = batch.pixels[0].numpy() * 255.0
    assert np.allclose(img[:, :, 0], [[10, 20], [30, 40]])
    assert np.allclose(img[:, :, 1], [[50, 60], [70, 80]])


@given(seed=st.integers(0, 10_000))
@settings(max_examples=15)
def test_write_then_load_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(5, 2, 3, 1)).astype(np.float32) / 255.0
    batch = ImageBatch(torch.from_numpy(pixels), torch.from_numpy(rng.integers(0, 4, size=5)))
    path = tmp_path_factory.mktemp("roundtrip") / f"rt_{seed}.bin"
    write_record_binary(path, batch)
    loaded = load_dataset(small_spec(path))
    assert torch.equal(loaded.pixels, batch.pixels)
    assert torch.equal(loaded.labels, batch.labels)


def test_ten_thousand_record_file_shape(tmp_path):
    # CIFAR-10-style: 10000 records of 1 + 32*32*3 bytes.
    path = tmp_path / "big.bin"
    n, rec = 10_000, 1 + 32 * 32 * 3
    blob = np.zeros((n, rec), dtype=np.uint8)
    blob[:, 0] = np.arange(n) % 10
    blob.tofile(path)
    batch = load_dataset(DatasetSpec(path=str(path)))
    assert batch.pixels.shape == (n, 32, 32, 3)
    assert len(batch) == n


def test_truncated_file_reports_byte_offset(tmp_path):
    path = tmp_path / "trunc.bin"
    write_raw(path, [(0, [1] * 6), (1, [2] * 6)])
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])  # cut mid-record
    with pytest.raises(DataFormatError) as err:
        load_dataset(small_spec(path))
    assert err.value.byte_offset == 7  # first incomplete record starts here


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(DataFormatError):
        load_dataset(small_spec(path))


def test_label_out_of_range_reports_offset(tmp_path):
    path = tmp_path / "badlabel.bin"
    write_raw(path, [(0, [0] * 6), (9, [0] * 6)])
    with pytest.raises(DataFormatError) as err:
        load_dataset(small_spec(path))
    assert err.value.byte_offset == 7  # second record's label byte


def test_shuffle_seed_determinism(tmp_path):
    path = tmp_path / "shuffle.bin"
    write_raw(path, [(i % 4, [i] * 6) for i in range(16)])
    a = load_dataset(small_spec(path, shuffle_seed=3))
    b = load_dataset(small_spec(path, shuffle_seed=3))
    c = load_dataset(small_spec(path, shuffle_seed=4))
    assert torch.equal(a.pixels, b.pixels) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.labels, c.labels)
    # a permutation of the unshuffled batch, nothing lost
    plain = load_dataset(small_spec(path))
    assert sorted(a.labels.tolist()) == sorted(plain.labels.tolist())
    assert float(a.pixels.sum()) == pytest.approx(float(plain.pixels.sum()), rel=1e-6)


def test_dataset_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        DatasetSpec(path="x", format="tar")
    with pytest.raises(ValueError):
        DatasetSpec(path="x", height=0)
    with pytest.raises(ValueError):
        DatasetSpec(path="x", num_classes=1)
    assert small_spec(tmp_path / "f").record_length == 1 + 2 * 3 * 1


# ---------------------------------------------------------------------------
# directory-of-images
# ---------------------------------------------------------------------------


def test_directory_of_images_loader(tmp_path):
    from PIL import Image

    root = tmp_path / "imgdir"
    for label, name in enumerate(["a_cats", "b_dogs"]):
        d = root / name
        d.mkdir(parents=True)
        for j in range(2):
            arr = np.full((4, 4, 3), 40 * label + 10 * j, dtype=np.uint8)
            Image.fromarray(arr).save(d / f"im{j}.png")
    spec = DatasetSpec(
        path=str(root), format="directory-of-images", height=4, width=4, channels=3
    )
    batch = load_dataset(spec)
    assert batch.pixels.shape == (4, 4, 4, 3)
    assert batch.labels.tolist() == [0, 0, 1, 1]  # sorted dirs, sorted files
    assert float(batch.pixels[2].mean()) == pytest.approx(40 / 255.0, abs=1e-6)


def test_directory_loader_rejects_bad_shape(tmp_path):
    from PIL import Image

    root = tmp_path / "badshape"
    (root / "c0").mkdir(parents=True)
    Image.fromarray(np.zeros((5, 4, 3), dtype=np.uint8)).save(root / "c0" / "x.png")
    spec = DatasetSpec(
        path=str(root), format="directory-of-images", height=4, width=4, channels=3
    )
    with pytest.raises(DataFormatError):
        load_dataset(spec)


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------


def _arange_batch(n: int) -> ImageBatch:
    pixels = torch.arange(float(n)).reshape(n, 1, 1, 1) / max(n, 1)
    return ImageBatch(pixels, torch.arange(n, dtype=torch.int64) % 3)


def test_iterate_batches_covers_everything_once():
    batch = _arange_batch(10)
    seen = []
    for mini, idx in iterate_batches(batch, 4, seed=1):
        assert len(mini) == len(idx)
        for pos, i in enumerate(idx):
            assert float(mini.pixels[pos]) == pytest.approx(float(batch.pixels[i]))
        seen.extend(idx)
    assert sorted(seen) == list(range(10))


def test_iterate_batches_seeded_order_reproducible():
    batch = _arange_batch(12)
    a = [idx for _, idx in iterate_batches(batch, 5, seed=7)]
    b = [idx for _, idx in iterate_batches(batch, 5, seed=7)]
    c = [idx for _, idx in iterate_batches(batch, 5, seed=8)]
    assert a == b
    assert a != c
    natural = [idx for _, idx in iterate_batches(batch, 5)]
    assert natural == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9], [10, 11]]


def test_iterate_batches_drop_last():
    batch = _arange_batch(10)
    sizes = [len(mini) for mini, _ in iterate_batches(batch, 4, drop_last=True)]
    assert sizes == [4, 4]
    with pytest.raises(ValueError):
        next(iterate_batches(batch, 0))


def test_augment_default_is_identity():
    batch = _arange_batch(6)
    out = augment_batch(batch, AugmentConfig())
    assert torch.equal(out.pixels, batch.pixels)


def test_augment_seeded_and_shape_preserving():
    rng = np.random.default_rng(0)
    batch = ImageBatch(
        torch.from_numpy(rng.uniform(size=(6, 8, 8, 3)).astype(np.float32)),
        torch.zeros(6, dtype=torch.int64),
    )
    cfg = AugmentConfig(random_crop=True, horizontal_flip=True, rng_seed=5)
    a = augment_batch(batch, cfg, epoch=2)
    b = augment_batch(batch, cfg, epoch=2)
    c = augment_batch(batch, cfg, epoch=3)
    assert torch.equal(a.pixels, b.pixels)
    assert not torch.equal(a.pixels, c.pixels)
    assert a.pixels.shape == batch.pixels.shape
    assert torch.equal(a.labels, batch.labels)
    assert float(a.pixels.min()) >= 0.0 and float(a.pixels.max()) <= 1.0


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def test_synthetic_batch_basic_contracts():
    batch = make_synthetic_batch(64, sample_seed=1, pattern_seed=0)
    batch.validate(num_classes=10)
    assert batch.pixels.shape == (64, 32, 32, 3)
    assert batch.pixels.dtype == torch.float32
    assert set(batch.labels.tolist()) <= set(range(10))
    # mid-gray background plus bounded cues: mass concentrates near 0.5
    assert 0.35 < float(batch.pixels.mean()) < 0.65


def test_synthetic_batch_deterministic():
    a = make_synthetic_batch(16, sample_seed=3, pattern_seed=1)
    b = make_synthetic_batch(16, sample_seed=3, pattern_seed=1)
    c = make_synthetic_batch(16, sample_seed=4, pattern_seed=1)
    assert torch.equal(a.pixels, b.pixels) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.pixels, c.pixels)


def test_synthetic_fragile_cue_is_sub_epsilon():
    # The always-correlated cue must be rewritable inside an 8/255 ball;
    # the grating cue must not be.
    assert 0.028 < 8 / 255
    assert 0.25 > 8 / 255


def test_synthetic_class_signal_separation():
    # Noise-free images of different classes differ; same class and grating
    # gives identical signal.
    a = make_synthetic_batch(
        24, sample_seed=5, pattern_seed=2, noise_std=0.0, robust_correlation=1.0
    )
    by_label: dict[int, list[torch.Tensor]] = {}
    for i in range(24):
        by_label.setdefault(int(a.labels[i]), []).append(a.pixels[i])
    for label, imgs in by_label.items():
        for img in imgs[1:]:
            assert torch.equal(img, imgs[0])


def test_write_synthetic_dataset_files(tmp_path):
    train_path, test_path = write_synthetic_dataset(
        tmp_path, train_images=12, test_images=6, seed=0
    )
    train = load_dataset(DatasetSpec(path=str(train_path)))
    test = load_dataset(DatasetSpec(path=str(test_path)))
    assert len(train) == 12 and len(test) == 6
    # same pattern seed, different sample seeds: splits share class signals
    # but not images
    assert not torch.equal(train.pixels[:6], test.pixels)


def test_synthetic_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_synthetic_batch(0)
    with pytest.raises(ValueError):
        make_synthetic_batch(4, robust_correlation=1.5)


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------


def _row(top1: float) -> ResultRow:
    return ResultRow(
        model="desk_k2", attack="untargeted-pgd", steps=20, restarts=1,
        top1=top1, success_rate=1.0 - top1,
    )


def test_results_header_and_four_decimals(tmp_path):
    path = tmp_path / "results.csv"
    write_results([_row(0.123456)], path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["model", "attack", "steps", "restarts", "top1", "success_rate"]
    assert rows[1][4] == "0.1235"
    assert rows[1][5] == "0.8765"


def test_results_empty_list_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    write_results([], path)
    rows = list(csv.reader(open(path)))
    assert rows == [list(("model", "attack", "steps", "restarts", "top1", "success_rate"))]


def test_results_append_keeps_single_header(tmp_path):
    path = tmp_path / "app.csv"
    write_results([_row(0.5)], path)
    write_results([_row(0.5)], path, append=True)
    rows = list(csv.reader(open(path)))
    assert len(rows) == 3
    assert rows[1] == rows[2]  # identical rerun appends an identical row


def test_results_sweep_one_row_per_cell(tmp_path):
    path = tmp_path / "sweep.csv"
    rows_in = [
        ResultRow("desk_k2", "untargeted-pgd", s, 1, 0.9, 0.1)
        for s in (10, 100, 250, 1000)
    ]
    write_results(rows_in, path)
    rows = list(csv.reader(open(path)))
    assert len(rows) == 1 + 4
    assert [r[2] for r in rows[1:]] == ["10", "100", "250", "1000"]
