import numpy as np
import pytest

from selectenc.dataio import RECORD, CifarFormatError, LabeledImage, load_cifar, parse_cifar, synth_images, write_cifar


def random_records(rng, n, variant):
    size = RECORD[variant]
    buf = rng.integers(0, 256, size=(n, size), dtype=np.uint8)
    if variant == "cifar10":
        buf[:, 0] = rng.integers(0, 10, size=n)
    else:
        buf[:, 0] = rng.integers(0, 20, size=n)
        buf[:, 1] = rng.integers(0, 100, size=n)
    return buf.tobytes()


class TestParse:
    def test_white_record(self):
        data = bytes([7]) + bytes([255]) * 3072
        (img,) = parse_cifar(data, "cifar10")
        assert img.label == 7 and img.source == "cifar10"
        np.testing.assert_array_equal(img.pixels, 1.0)
        assert img.pixels.shape == (32, 32, 3)

    def test_empty(self):
        assert parse_cifar(b"", "cifar10") == []

    def test_channel_major_layout(self):
        body = np.zeros((3, 32, 32), dtype=np.uint8)
        body[0, 0, 1] = 255  # red, row 0, column 1
        body[2, 5, 0] = 51  # blue, row 5, column 0
        (img,) = parse_cifar(bytes([1]) + body.tobytes(), "cifar10")
        assert img.pixels[0, 1, 0] == 1.0
        assert img.pixels[5, 0, 2] == 0.2
        assert img.pixels.sum() == 1.2

    def test_cifar100_uses_fine_label(self):
        (img,) = parse_cifar(bytes([3, 42]) + bytes(3072), "cifar100")
        assert img.label == 42 and img.coarse_label == 3

    @pytest.mark.parametrize("variant", ["cifar10", "cifar100"])
    def test_round_trip_is_byte_exact(self, variant):
        data = random_records(np.random.default_rng(0), 2, variant)
        images = parse_cifar(data, variant)
        assert write_cifar(images, variant) == data
        assert parse_cifar(write_cifar(images, variant), variant) == images

    def test_label_out_of_range(self):
        with pytest.raises(CifarFormatError, match="label 10"):
            parse_cifar(bytes([10]) + bytes(3072), "cifar10")
        with pytest.raises(CifarFormatError):
            parse_cifar(bytes([0, 100]) + bytes(3072), "cifar100")

    def test_length_error_reports_offset(self):
        with pytest.raises(CifarFormatError, match="offset 3073"):
            parse_cifar(bytes(3073 + 10), "cifar10")

    @pytest.mark.parametrize("variant", ["cifar10", "cifar100"])
    def test_truncation_fuzz(self, variant):
        rng = np.random.default_rng(1)
        data = random_records(rng, 3, variant)
        size = RECORD[variant]
        for _ in range(1000):
            cut = int(rng.integers(0, len(data)))
            if cut % size == 0:
                assert len(parse_cifar(data[:cut], variant)) == cut // size
                continue
            with pytest.raises(CifarFormatError):
                parse_cifar(data[:cut], variant)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            parse_cifar(b"", "svhn")

    def test_load_from_file(self, tmp_path):
        data = random_records(np.random.default_rng(2), 3, "cifar10")
        (tmp_path / "batch.bin").write_bytes(data)
        assert len(load_cifar(tmp_path / "batch.bin")) == 3


class TestSynthetic:
    def test_round_robin_labels(self):
        assert [im.label for im in synth_images(4, 0, 2)] == [0, 1, 0, 1]

    def test_same_seed_same_pixels(self):
        a, b = synth_images(3, 9, 10, (8, 8, 1)), synth_images(3, 9, 10, (8, 8, 1))
        assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))

    def test_pixel_range(self):
        for im in synth_images(100, 3, 10, (8, 8, 3)):
            assert im.pixels.min() >= 0 and im.pixels.max() <= 1

    def test_smooth(self):
        im = synth_images(1, 0, 10, (32, 32, 1))[0].pixels
        assert np.abs(np.diff(im, axis=0)).max() < 0.5

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            synth_images(0, 0, 2)

    def test_pixels_validated(self):
        with pytest.raises(ValueError):
            LabeledImage(np.array([[[1.5]]]), 0, "synthetic")
