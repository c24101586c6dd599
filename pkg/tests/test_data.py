import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sit.autograd import ShapeError
from sit.data import (
    CKPT_MAGIC,
    METRICS_HEADER,
    CheckpointError,
    Dataset,
    FormatError,
    MetricsWriter,
    decode_checkpoint,
    decode_cifar,
    decode_stl10_images,
    decode_stl10_labels,
    encode_ppm,
    few_shot_split,
    load_checkpoint,
    load_cifar,
    load_stl10,
    read_metrics,
    read_ppm,
    restore_model,
    restore_optimizer,
    save_checkpoint,
    synthetic_dataset,
    to_bytes,
    truncate_metrics,
    write_image_ppm,
)
from sit.losses import UncertaintyWeights
from sit.model import ModelConfig, build_model, replace_task_heads
from sit.optim import AdamState, adam_step

SMALL = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, contrastive_dim=4)


# -- CIFAR ---------------------------------------------------------------------


def cifar_records():
    """Two CIFAR-10 records authored byte by byte."""
    recs = bytearray()
    for label, base in ((3, 0), (9, 100)):
        recs.append(label)
        # pixel (c, r, col) holds (base + c*50 + r + col) mod 256
        for c in range(3):
            for r in range(32):
                for col in range(32):
                    recs.append((base + c * 50 + r + col) % 256)
    return bytes(recs)


def test_cifar_two_records_size():
    assert len(cifar_records()) == 6146


def test_cifar_fixture_decodes_exactly():
    images, labels = decode_cifar(cifar_records(), 10)
    assert images.shape == (2, 3, 32, 32) and images.dtype == np.float32
    assert list(labels) == [3, 9]
    assert images[0, 0, 0, 0] == 0.0
    assert images[0, 2, 5, 7] == np.float32(112) / np.float32(255)
    assert images[1, 1, 31, 31] == np.float32((100 + 50 + 62) % 256) / np.float32(255)


def test_cifar_bad_length():
    with pytest.raises(FormatError):
        decode_cifar(cifar_records()[:-1], 10)


def test_cifar100_fine_labels(tmp_path):
    recs = bytearray()
    for coarse, fine in ((1, 57), (19, 99), (0, 0)):
        recs += bytes([coarse, fine]) + bytes(3072)
    (tmp_path / "train.bin").write_bytes(bytes(recs))
    ds = load_cifar(tmp_path, 100, "train")
    assert list(ds.labels) == [57, 99, 0]
    assert ds.class_count == 100 and ds.labels.max() < 100


def test_load_cifar10_directory(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for i in range(1, 6):
        (d / f"data_batch_{i}.bin").write_bytes(cifar_records())
    (d / "test_batch.bin").write_bytes(cifar_records()[:3073])
    train = load_cifar(tmp_path, 10, "train")
    test = load_cifar(tmp_path, 10, "test")
    assert len(train) == 10 and len(test) == 1
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path / "nowhere", 10, "train")


# -- STL-10 --------------------------------------------------------------------


def test_stl10_column_major_fixture(tmp_path):
    buf = bytearray(3 * 96 * 96)
    # on disk: channel-major, then column-major inside the channel
    buf[0 * 9216 + 2 * 96 + 5] = 255  # channel 0, row 5, col 2
    buf[2 * 9216 + 95 * 96 + 0] = 51  # channel 2, row 0, col 95
    images = decode_stl10_images(bytes(buf))
    assert images[0, 0, 5, 2] == 1.0
    assert images[0, 2, 0, 95] == np.float32(51) / np.float32(255)
    assert np.count_nonzero(images) == 2
    (tmp_path / "unlabeled_X.bin").write_bytes(bytes(buf) * 2)
    (tmp_path / "train_X.bin").write_bytes(bytes(buf))
    (tmp_path / "train_y.bin").write_bytes(bytes([10]))
    assert load_stl10(tmp_path, "unlabeled").labels is None
    assert list(load_stl10(tmp_path, "train").labels) == [9]


def test_stl10_truncated_and_labels():
    with pytest.raises(FormatError):
        decode_stl10_images(bytes(100))
    assert list(decode_stl10_labels(bytes([1, 10, 5]))) == [0, 9, 4]
    with pytest.raises(FormatError):
        decode_stl10_labels(bytes([0]))


# -- synthetic ---------------------------------------------------------------------


def test_synthetic_deterministic_and_valid():
    a, b = synthetic_dataset(40, 4, 16, seed=3), synthetic_dataset(40, 4, 16, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert not np.array_equal(a.images, synthetic_dataset(40, 4, 16, seed=4).images)


def test_synthetic_empty_rejected():
    with pytest.raises(ValueError):
        synthetic_dataset(0)


def test_synthetic_two_class_separable_by_pixel_mean():
    train = synthetic_dataset(400, 2, 16, seed=0)
    test = synthetic_dataset(400, 2, 16, seed=1)

    def feats(ds):
        f = ds.images.mean(axis=(2, 3)).astype(np.float64)
        return np.hstack([f, np.ones((len(f), 1))])

    x, y = feats(train), train.labels
    w = np.zeros(4)
    for _ in range(3000):
        p = 1 / (1 + np.exp(-(x @ w)))
        w -= 2.0 * x.T @ (p - y) / len(y)
    acc = np.mean(((feats(test) @ w) > 0) == test.labels)
    assert acc >= 0.95


def test_dataset_label_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 5]), 3, "bad")
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3, 4, 4)), None, 3, "empty")


# -- few-shot split ----------------------------------------------------------------


def balanced(n=100, classes=10):
    labels = np.repeat(np.arange(classes), n // classes)
    return Dataset(np.zeros((n, 1, 2, 2), dtype=np.float32), labels, classes, "bal")


def test_few_shot_ten_percent():
    sub, rest = few_shot_split(balanced(), 10, seed=0)
    assert len(sub) == 10
    assert np.bincount(sub.labels, minlength=10).tolist() == [1] * 10
    assert len(rest) == 90


def test_few_shot_hundred_is_everything():
    ds = balanced()
    sub, rest = few_shot_split(ds, 100)
    assert rest is None and np.array_equal(sub.labels, ds.labels)


@pytest.mark.parametrize("p", [0, -5, 100.5])
def test_few_shot_bad_percent(p):
    with pytest.raises(ValueError):
        few_shot_split(balanced(), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 99.5), st.integers(2, 6))
def test_few_shot_partition(seed, percent, classes):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, 60)
    labels[:classes] = np.arange(classes)
    ds = Dataset(np.arange(60, dtype=np.float32).reshape(60, 1, 1, 1), labels, classes, "r")
    sub, rest = few_shot_split(ds, percent, seed)
    ids_sub = set(sub.images.ravel().astype(int))
    ids_rest = set() if rest is None else set(rest.images.ravel().astype(int))
    assert ids_sub.isdisjoint(ids_rest)
    assert ids_sub | ids_rest == set(range(60))
    for k in range(classes):
        count = int((labels == k).sum())
        target = max(1, int(np.floor(count * percent / 100 + 1e-9)))
        assert abs(int((sub.labels == k).sum()) - target) <= 1
    again, _ = few_shot_split(ds, percent, seed)
    assert np.array_equal(again.images, sub.images)


# -- PPM -----------------------------------------------------------------------


def test_ppm_black_pixel(tmp_path):
    write_image_ppm(tmp_path / "a.ppm", np.zeros((3, 1, 1)))
    data = (tmp_path / "a.ppm").read_bytes()
    assert data == b"P6\n1 1\n255\n\x00\x00\x00"
    assert len(data) == 14


def test_ppm_rounding_half_up_and_clamp():
    assert to_bytes(np.array([0.5]))[0] == 128
    assert list(to_bytes(np.array([-1.0, 0.0, 1.0, 2.0]))) == [0, 0, 255, 255]
    assert to_bytes(np.array([0.5 / 255]))[0] == 1


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((3, 5, 7))
    write_image_ppm(tmp_path / "b.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), to_bytes(img))
    assert encode_ppm(img)[:11] == b"P6\n7 5\n255\n"


# -- checkpoints -----------------------------------------------------------------


def trained_bits():
    model = build_model(SMALL)
    opt = AdamState()
    for p in model.parameters():
        p.grad = np.full(p.shape, 0.1, dtype=p.dtype)
    adam_step(model.parameters(), opt)
    return model, opt


def test_checkpoint_round_trip(tmp_path):
    model, opt = trained_bits()
    unc = UncertaintyWeights((0.1, 0.2, -0.3))
    rng = np.random.default_rng(5)
    save_checkpoint(tmp_path / "c.sitc", model, opt, rng.bit_generator.state, {"step": 1, "epoch": 0}, unc)
    ck = load_checkpoint(tmp_path / "c.sitc")
    again = restore_model(ck)
    for n, p in model.named_parameters():
        assert np.array_equal(again[n].data, p.data), n
    o2 = restore_optimizer(ck)
    assert o2.hyperparams() == opt.hyperparams()
    for k in opt.m:
        assert np.array_equal(o2.m[k], opt.m[k]) and np.array_equal(o2.v[k], opt.v[k])
    assert ck.tensors["uncertainty.s3"] == np.float32(-0.3)
    assert ck.counters == {"step": 1, "epoch": 0}
    r2 = np.random.default_rng()
    r2.bit_generator.state = ck.meta["rng_state"]
    assert r2.random() == rng.random()
    assert len(ck.checkpoint_id) == 8


def test_checkpoint_header_layout(tmp_path):
    model, _ = trained_bits()
    save_checkpoint(tmp_path / "c.sitc", model)
    data = (tmp_path / "c.sitc").read_bytes()
    assert data[:8] == CKPT_MAGIC
    version, length, crc = struct.unpack("<IQI", data[8:24])
    assert version == 1 and length == len(data) - 24 and crc == zlib.crc32(data[24:])


def test_checkpoint_corrupt_byte(tmp_path):
    model, _ = trained_bits()
    save_checkpoint(tmp_path / "c.sitc", model)
    data = bytearray((tmp_path / "c.sitc").read_bytes())
    data[-5] ^= 0x40
    with pytest.raises(CheckpointError, match="CRC"):
        decode_checkpoint(bytes(data))


def test_checkpoint_version_rejected(tmp_path):
    model, _ = trained_bits()
    save_checkpoint(tmp_path / "c.sitc", model)
    data = bytearray((tmp_path / "c.sitc").read_bytes())
    data[8:12] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + bytes(data[8:]))


def test_checkpoint_mismatched_config_names_parameter(tmp_path):
    model, _ = trained_bits()
    save_checkpoint(tmp_path / "c.sitc", model)
    ck = load_checkpoint(tmp_path / "c.sitc")
    wider = ModelConfig(**{**SMALL.to_dict(), "mlp_ratio": 2.0})
    with pytest.raises(ShapeError, match=r"blocks\.0\.mlp\.fc1"):
        restore_model(ck, wider)
    deeper = ModelConfig(**{**SMALL.to_dict(), "depth": 2})
    with pytest.raises(CheckpointError, match="blocks.1"):
        restore_model(ck, deeper)


def test_checkpoint_with_replaced_heads(tmp_path):
    model = replace_task_heads(build_model(SMALL), 7, seed=1)
    save_checkpoint(tmp_path / "h.sitc", model)
    again = restore_model(load_checkpoint(tmp_path / "h.sitc"))
    assert again["rot_head.bias"].shape == (7,) and again["contr_head.bias"].shape == (7,)
    assert np.array_equal(again["contr_head.weight"].data, model["contr_head.weight"].data)


# -- metrics -------------------------------------------------------------------


def row(step):
    return dict(step=step, epoch=0, l_rec=0.5, l_rot=1.0, l_con=2.0, w1=1.0, w2=1.0, w3=1.0, total=3.5, lr=1e-3, ms=12.5)


def test_metrics_header_and_monotone(tmp_path):
    w = MetricsWriter(tmp_path / "m.csv")
    w.append(row(1))
    w.append(row(2))
    with pytest.raises(ValueError):
        w.append(row(2))
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert METRICS_HEADER == "step,epoch,l_rec,l_rot,l_con,w1,w2,w3,total,lr,ms".split(",")
    rows = read_metrics(tmp_path / "m.csv")
    assert [r["step"] for r in rows] == ["1", "2"] and float(rows[0]["lr"]) == 1e-3


def test_metrics_resume_and_truncate(tmp_path):
    w = MetricsWriter(tmp_path / "m.csv")
    for s in range(1, 6):
        w.append(row(s))
    truncate_metrics(tmp_path / "m.csv", 3)
    w2 = MetricsWriter(tmp_path / "m.csv", resume=True)
    assert w2.last_step == 3
    w2.append(row(4))
    assert [r["step"] for r in read_metrics(tmp_path / "m.csv")] == ["1", "2", "3", "4"]
