import itertools
import logging

import numpy as np
import pytest
import torch
from PIL import Image

from multistylegan.data import (
    DatasetError,
    DatasetIndex,
    SequenceRecord,
    count_windows,
    denormalize,
    epoch_batches,
    index_dataset,
    load_batch,
    load_window,
    normalize,
    read_frame,
    write_synthetic_dataset,
)


def _fake_index(lengths, k, s):
    recs = [SequenceRecord(str(i), [None] * n, [None] * n) for i, n in enumerate(lengths)]
    return DatasetIndex(recs, k, s, 16)


def test_empty_root(tmp_path):
    idx = index_dataset(tmp_path, resolution=16)
    assert idx.records == [] and count_windows(idx) == 0


def test_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        index_dataset(tmp_path / "nope")


def test_two_records(synthetic_tree):
    idx = index_dataset(synthetic_tree, resolution=16)
    assert [r.sequence_id for r in idx.records] == ["seq0000", "seq0001"]
    assert [r.length for r in idx.records] == [9, 10]
    assert count_windows(idx) == 15


def test_frames_sorted_numerically(tmp_path):
    img = np.zeros((4, 4), np.uint8)
    for d in ("bf", "gfp"):
        (tmp_path / "s" / d).mkdir(parents=True)
        for t in (10, 2, 1):
            Image.fromarray(img).save(tmp_path / "s" / d / f"{t}.png")
    rec = index_dataset(tmp_path, resolution=4, window_length=1).records[0]
    assert [p.stem for p in rec.frame_paths_bf] == ["1", "2", "10"]


def test_orphan_frame_reported(synthetic_tree):
    victim = synthetic_tree / "seq0001" / "gfp" / "0004.png"
    victim.unlink()
    with pytest.raises(DatasetError) as exc:
        index_dataset(synthetic_tree, resolution=16)
    assert len(exc.value.errors) == 1 and "0004" in exc.value.errors[0]


def test_all_errors_aggregated(synthetic_tree):
    (synthetic_tree / "seq0000" / "bf" / "0002.png").unlink()
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(synthetic_tree / "seq0001" / "bf" / "0003.png")
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(synthetic_tree / "seq0001" / "gfp" / "frame.png")
    with pytest.raises(DatasetError) as exc:
        index_dataset(synthetic_tree, resolution=16)
    text = "\n".join(exc.value.errors)
    assert len(exc.value.errors) == 3
    assert "0002" in text and "8x8" in text and "frame.png" in text


def test_missing_domain_folder(tmp_path):
    (tmp_path / "s" / "bf").mkdir(parents=True)
    with pytest.raises(DatasetError, match="gfp"):
        index_dataset(tmp_path, resolution=4)


def test_rgb_rejected(tmp_path):
    write_synthetic_dataset(tmp_path, n_sequences=1, length=1, resolution=4)
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "seq0000" / "bf" / "0000.png")
    with pytest.raises(DatasetError, match="single channel"):
        index_dataset(tmp_path, resolution=4, window_length=1)


def test_short_sequence_warns(tmp_path, caplog):
    write_synthetic_dataset(tmp_path, resolution=8, lengths=[2, 4])
    with caplog.at_level(logging.WARNING):
        idx = index_dataset(tmp_path, resolution=8)
    assert "seq0000" in caplog.text
    assert count_windows(idx) == 2


@pytest.mark.parametrize("lengths,k,s,expected", [([9], 3, 1, 7), ([9, 10], 3, 1, 15), ([2], 3, 1, 0), ([10], 3, 2, 4), ([3], 3, 5, 1)])
def test_window_counts(lengths, k, s, expected):
    idx = _fake_index(lengths, k, s)
    assert count_windows(idx) == expected == len(idx.windows())


def test_window_enumeration_exhaustive():
    for n, k, s in itertools.product(range(0, 9), range(1, 5), range(1, 4)):
        idx = _fake_index([n], k, s)
        brute = [start for start in range(n) if start + k <= n and start % s == 0]
        assert [st for _, st in idx.windows()] == brute
        assert count_windows(idx) == len(brute)


def test_normalization_endpoints():
    out = normalize(np.array([0, 255, 128], np.uint8), 255)
    assert out.dtype == np.float32
    assert out[0] == -1.0 and out[1] == 1.0
    assert out[2] == pytest.approx(1 / 255, abs=1e-7)


def test_eight_bit_round_trip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    x = read_frame(tmp_path / "x.png")
    assert x.min() >= -1 and x.max() <= 1
    assert np.array_equal(denormalize(x), arr)


def test_sixteen_bit_tiff(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], np.uint16)
    Image.fromarray(arr).save(tmp_path / "x.tif")
    x = read_frame(tmp_path / "x.tif")
    assert x[0, 0] == -1.0 and x[0, 1] == 1.0
    assert np.array_equal(denormalize(x, 65535), arr)


def test_denormalize_clamps():
    assert denormalize(np.array([-3.0, 3.0])).tolist() == [0, 255]


def test_load_window_contents(synthetic_tree):
    idx = index_dataset(synthetic_tree, resolution=16)
    pair = load_window(idx, 8)  # second record, start 1
    rec = idx.records[1]
    assert pair.bf.shape == pair.gfp.shape == (3, 16, 16)
    assert torch.equal(pair.gfp[0], torch.tensor(read_frame(rec.frame_paths_gfp[1])))
    with pytest.raises(IndexError):
        load_window(idx, 15)


def test_flip_shared_by_domains(synthetic_tree):
    idx = index_dataset(synthetic_tree, resolution=16)
    plain = load_window(idx, 0)
    for seed in range(8):
        p = load_window(idx, 0, torch.Generator().manual_seed(seed), augment_flip=True)
        flipped = torch.equal(p.bf, plain.bf.flip(-1))
        assert flipped or torch.equal(p.bf, plain.bf)
        assert torch.equal(p.gfp, plain.gfp.flip(-1) if flipped else plain.gfp)


def test_index_deterministic(synthetic_tree):
    a, b = index_dataset(synthetic_tree, resolution=16), index_dataset(synthetic_tree, resolution=16)
    assert a.windows() == b.windows()
    assert a.records == b.records
    x, y = load_batch(a, [3, 1]), load_batch(b, [3, 1])
    assert torch.equal(x.bf, y.bf) and torch.equal(x.gfp, y.gfp)


def test_epoch_batches():
    a = list(epoch_batches(10, 3, seed=1, epoch=0))
    assert a == list(epoch_batches(10, 3, seed=1, epoch=0))
    assert len(a) == 3 and all(len(b) == 3 for b in a)
    assert a != list(epoch_batches(10, 3, seed=1, epoch=1))
    full = list(epoch_batches(10, 3, seed=1, epoch=0, drop_last=False))
    assert sorted(i for b in full for i in b) == list(range(10))
