import numpy as np
import pytest
from pydantic import ValidationError

from uflow.shared.errors import ArtifactError, ParameterError
from uflow.synthetic import (
    SynthConfig,
    gen_dataset,
    inject_defect,
    read_manifest,
    render_texture,
    write_dataset,
)


@pytest.fixture()
def small_config():
    return SynthConfig(image_size=(32, 32), n_train=3, n_test_normal=2, n_test_anomalous=3, seed=7)


def test_generation_is_deterministic(small_config):
    first = gen_dataset(small_config)
    second = gen_dataset(small_config)
    assert all(np.array_equal(a, b) for a, b in zip(first.train + first.test, second.train + second.test))
    assert all(np.array_equal(a, b) for a, b in zip(first.masks, second.masks))

    other = gen_dataset(small_config.model_copy(update={"seed": 8}))
    assert not np.array_equal(first.train[0], other.train[0])


def test_dataset_layout(small_config):
    dataset = gen_dataset(small_config)
    assert len(dataset.train) == 3
    assert len(dataset.test) == len(dataset.masks) == 5
    assert dataset.labels == [0, 0, 1, 1, 1]
    for image in dataset.train + dataset.test:
        assert image.shape == (32, 32)
        assert image.min() >= 0.0 and image.max() <= 1.0
    assert not any(mask.any() for mask in dataset.masks[:2])
    for mask in dataset.masks[2:]:
        assert 0 < mask.sum() <= (small_config.defect_size[1] + 1) ** 2


def test_train_images_are_pure_texture(small_config):
    dataset = gen_dataset(small_config)
    rng = np.random.default_rng(small_config.seed ^ 0)
    expected = np.clip(render_texture(small_config.texture, (32, 32), rng), 0.0, 1.0)
    assert np.array_equal(dataset.train[0], expected)


def test_defects_only_touch_the_masked_region(small_config):
    dataset = gen_dataset(small_config)
    for offset, (image, mask) in enumerate(zip(dataset.test[2:], dataset.masks[2:])):
        rng = np.random.default_rng(small_config.seed ^ (5 + offset))
        clean = np.clip(render_texture(small_config.texture, (32, 32), rng), 0.0, 1.0)
        assert np.array_equal(image[~mask], clean[~mask])
        assert np.all(np.abs(image[mask] - clean[mask]) > small_config.contrast / 4)


def test_no_anomalous_images_means_empty_masks():
    dataset = gen_dataset(SynthConfig(image_size=(16, 16), n_train=1, n_test_normal=2, n_test_anomalous=0))
    assert dataset.labels == [0, 0]
    assert not any(mask.any() for mask in dataset.masks)


@pytest.mark.parametrize("texture", ["gaussian_field", "grating", "checker"])
@pytest.mark.parametrize("defect", ["blob", "scratch", "patch"])
def test_every_texture_and_defect(texture, defect):
    config = SynthConfig(
        image_size=(32, 32),
        n_train=1,
        n_test_normal=0,
        n_test_anomalous=2,
        texture=texture,
        defects=[defect],
    )
    dataset = gen_dataset(config)
    assert all(mask.any() for mask in dataset.masks)
    assert all(0.0 <= image.min() and image.max() <= 1.0 for image in dataset.test)


def test_oversized_defect_is_rejected():
    with pytest.raises(ParameterError, match="exceeds"):
        gen_dataset(SynthConfig(image_size=(8, 8), n_train=1, n_test_normal=0, n_test_anomalous=1))
    with pytest.raises(ParameterError):
        inject_defect(np.full((8, 8), 0.5), "blob", 0.8, (6, 16), np.random.default_rng(0))


@pytest.mark.parametrize(
    "overrides",
    [{"contrast": 0.0}, {"defect_size": (9, 4)}, {"image_size": (0, 8)}, {"defects": []}, {"texture": "plaid"}],
)
def test_invalid_config(overrides):
    with pytest.raises(ValidationError):
        SynthConfig(**overrides)


def test_manifest_round_trip(tmp_path, small_config):
    dataset = gen_dataset(small_config)
    entries = write_dataset(dataset, tmp_path)
    assert read_manifest(tmp_path) == entries
    assert [entry.split for entry in entries] == ["train"] * 3 + ["test"] * 5
    assert entries[0].path == "train/train_0000.pgm"
    assert entries[-1].mask == "ground_truth/test_0004_mask.pgm"
    assert entries[-1].name == "test_0004"
    for entry in entries:
        assert (tmp_path / entry.path).exists()


def test_missing_manifest(tmp_path):
    with pytest.raises(ArtifactError, match="manifest"):
        read_manifest(tmp_path)
