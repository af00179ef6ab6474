import json

import numpy as np
import pytest

from jointaug.data import (
    Dataset,
    Shift,
    TaskSpec,
    extract_patch,
    gen_task,
    load_dataset,
    load_task,
    sample_patch_batch,
    save_dataset,
    save_task,
)
from jointaug.errors import ConfigError, DataError, DatasetFormatError, DatasetValidationError


@pytest.fixture(scope="module")
def default_task():
    return gen_task(TaskSpec(), 0)


def test_generation_is_deterministic():
    spec = TaskSpec(size=32, n_train=3, n_val=2, n_test=2)
    a, b = gen_task(spec, 4), gen_task(spec, 4)
    assert all(x.equals(y) for x, y in zip(a, b))
    c = gen_task(spec, 5)
    assert not a[0].equals(c[0])


def test_default_prevalence_in_band(default_task):
    for ds in default_task:
        assert 0.01 <= ds.fg_fraction <= 0.04, ds.split
    train, val, test = default_task
    assert (len(train), len(val), len(test)) == (40, 10, 20)
    assert train.images.shape[1:] == (1, 96, 96) and train.images.dtype == np.float32


def test_zero_shift_matches_training_distribution():
    spec = TaskSpec(size=32, n_train=30, n_val=30, n_test=1, shift=Shift(0.0, 1.0, 0.0))
    train, val, _ = gen_task(spec, 0)
    assert abs(float(train.images.mean()) - float(val.images.mean())) < 0.05
    assert abs(float(train.images.std()) / float(val.images.std()) - 1) < 0.1


def test_shift_moves_validation_intensities():
    train, val, _ = gen_task(TaskSpec(size=32, n_train=20, n_val=20, n_test=1), 0)
    assert float(val.images.mean()) - float(train.images.mean()) > 0.2


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(prevalence=0.0)
    with pytest.raises(ConfigError):
        TaskSpec.from_json({"colour": "red"})
    spec = TaskSpec(size=40)
    assert TaskSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


# --------------------------------------------------------------- patches

def test_patch_quotas_and_tags(default_task):
    train = default_task[0]
    rng = np.random.default_rng(0)
    for frac, want in ((0.5, 5), (1.0, 10), (0.0, 0)):
        batch = sample_patch_batch(train, 10, frac, rng, 48)
        assert int(batch.classes.sum()) == want
        # every tag agrees with the centre of the extracted label patch and the source pixel
        assert np.array_equal(batch.classes, (batch.labels[:, 24, 24] > 0).astype(int))
        for (k, r, c), cls in zip(batch.centers, batch.classes):
            assert (train.labels[k, r, c] > 0) == bool(cls)


def test_patch_sampling_is_deterministic(default_task):
    a = sample_patch_batch(default_task[0], 10, 0.5, np.random.default_rng(7))
    b = sample_patch_batch(default_task[0], 10, 0.5, np.random.default_rng(7))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.centers, b.centers)


def test_patch_zero_padding():
    ds = Dataset(np.ones((1, 1, 8, 8), np.float32), np.zeros((1, 8, 8), np.uint8), 2, "train")
    img, lab = extract_patch(ds, 0, 0, 0, 6)
    assert img[:3].sum() == 0 and img[:, :3].sum() == 0 and img[3:, 3:].sum() == 9


def test_no_foreground_is_data_error():
    ds = Dataset(np.zeros((2, 1, 16, 16), np.float32), np.zeros((2, 16, 16), np.uint8), 2, "train")
    with pytest.raises(DataError):
        sample_patch_batch(ds, 4, 0.5, np.random.default_rng(0), 8)
    assert sample_patch_batch(ds, 4, 0.0, np.random.default_rng(0), 8).classes.sum() == 0


def test_patch_larger_than_image_rejected():
    ds = Dataset(np.zeros((1, 1, 16, 16), np.float32), np.zeros((1, 16, 16), np.uint8), 2, "train")
    with pytest.raises(ConfigError):
        sample_patch_batch(ds, 1, 0.0, np.random.default_rng(0), 32)


# ------------------------------------------------------------- persistence

@pytest.fixture
def small():
    return gen_task(TaskSpec(size=24, n_train=3, n_val=2, n_test=2), 1)


def test_round_trip(tmp_path, small):
    save_dataset(small[0], tmp_path / "d")
    assert load_dataset(tmp_path / "d").equals(small[0])
    save_task(tmp_path / "t", TaskSpec(size=24, n_train=3, n_val=2, n_test=2), 1, small)
    assert all(a.equals(b) for a, b in zip(load_task(tmp_path / "t"), small))


def test_bad_label_lists_indices():
    labels = np.zeros((2, 4, 4), np.uint8)
    labels[1, 2, 3] = 5
    with pytest.raises(DatasetValidationError, match=r"\[1, 2, 3\]"):
        Dataset(np.zeros((2, 1, 4, 4), np.float32), labels, 2, "train")


def _corrupt(root, name, fn):
    path = root / name
    path.write_bytes(fn(path.read_bytes()))


@pytest.mark.parametrize("damage,pattern", [
    (lambda b: b[:3] + b"?" + b[4:], "magic byte at offset 3"),
    (lambda b: b[:-5], "truncated payload"),
    (lambda b: b + b"\0\0", "trailing bytes"),
    (lambda b: b[:-1] + bytes([b[-1] ^ 1]), "checksum"),
])
def test_blob_damage_is_diagnosed(tmp_path, small, damage, pattern):
    save_dataset(small[0], tmp_path)
    _corrupt(tmp_path, "images.bin", damage)
    with pytest.raises(DatasetFormatError, match=pattern):
        load_dataset(tmp_path)


def test_manifest_damage_is_diagnosed(tmp_path, small):
    save_dataset(small[0], tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["blobs"]["labels"]["dtype"] = "f32le"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="dtype mismatch"):
        load_dataset(tmp_path)
    manifest["blobs"]["labels"]["dtype"] = "u8"
    manifest["count"] = 7
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="shape mismatch"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetFormatError, match="malformed manifest header"):
        load_dataset(tmp_path)
