import numpy as np
import pytest

from facepad import data as dio
from facepad.errors import ConfigError, ParseError, ShapeError


@pytest.fixture(scope="module")
def small():
    return dio.generate(dio.SyntheticConfig(n_identities=2, samples_per_id=4, image_size=(16, 16), seed=1))


def test_counts(small):
    assert len(small) == 16
    assert sum(s.liveness == "live" for s in small) == 8
    assert {s.domain for s in small} == {"A", "B"}
    assert all(s.image.shape == (3, 16, 16) for s in small)
    assert all(0 <= s.image.min() and s.image.max() <= 1 for s in small)


def test_deterministic(small):
    again = dio.generate(dio.SyntheticConfig(n_identities=2, samples_per_id=4, image_size=(16, 16), seed=1))
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(small, again))
    other = dio.generate(dio.SyntheticConfig(n_identities=2, samples_per_id=4, image_size=(16, 16), seed=2))
    assert small[0].image.tobytes() != other[0].image.tobytes()


@pytest.mark.parametrize("bad", [dict(n_identities=1), dict(samples_per_id=3), dict(image_size=(4, 4)),
                                 dict(domains=())])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        dio.SyntheticConfig(**bad).validate()


def test_linear_probe_beats_chance():
    samples = dio.select_domain(dio.generate(dio.SyntheticConfig(image_size=(16, 16), seed=3)), "A")
    train, test = dio.split(samples, 0.3, seed=0)
    X = dio.images_of(train).reshape(len(train), -1)
    y = 2.0 * dio.labels_of(train) - 1
    mu = X.mean(0)
    # ridge-regularised least squares as a linear probe
    Xc = X - mu
    w = np.linalg.solve(Xc.T @ Xc + 1.0 * np.eye(X.shape[1]), Xc.T @ y)
    pred = (dio.images_of(test).reshape(len(test), -1) - mu) @ w > 0
    acc = (pred == dio.labels_of(test).astype(bool)).mean()
    assert acc > 0.75


def test_split_is_stratified(small):
    a = dio.select_domain(small, "A")
    train, test = dio.split(a, 0.5, seed=0)
    assert len(train) == len(test) == 4
    assert sorted((s.identity, s.liveness) for s in test) == sorted((s.identity, s.liveness) for s in train)


class TestFlips:
    def make(self, n_live, n_attack):
        img = np.zeros((3, 4, 4))
        return ([dio.FaceSample(img, 0, "live", "A")] * n_live + [dio.FaceSample(img, 0, "attack", "A")] * n_attack)

    def test_triple(self):
        out = dio.augment_flips(self.make(3, 5), "triple")
        assert sum(s.liveness == "live" for s in out) == 9
        assert sum(s.liveness == "attack" for s in out) == 5

    def test_double(self):
        out = dio.augment_flips(self.make(3, 5), "double")
        assert sum(s.liveness == "live" for s in out) == 6

    def test_hflip_involution(self):
        img = np.random.default_rng(0).uniform(size=(3, 5, 6))
        assert np.array_equal(dio.hflip(dio.hflip(img)), img)
        assert np.array_equal(dio.hflip(img)[:, :, 0], img[:, :, -1])


class TestCrop:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 7, 7))
        assert np.array_equal(dio.center_crop(img, 1.0), img)

    def test_half(self):
        img = np.arange(48.0).reshape(3, 4, 4)
        assert np.array_equal(dio.center_crop(img, 0.5), img[:, 1:3, 1:3])

    def test_composition(self):
        img = np.random.default_rng(1).uniform(size=(3, 16, 16))
        assert np.array_equal(dio.center_crop(dio.center_crop(img, 0.5), 0.5), dio.center_crop(img, 0.25))

    def test_bad_fraction(self):
        with pytest.raises(ShapeError):
            dio.center_crop(np.zeros((3, 4, 4)), 0.0)

    def test_recognition_view_keeps_extent(self):
        img = np.random.default_rng(2).uniform(size=(3, 16, 16))
        assert dio.recognition_view(img).shape == img.shape


class TestPPM:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(3, 5, 7))
        dio.write_ppm(tmp_path / "x.ppm", img)
        back = dio.read_ppm(tmp_path / "x.ppm")
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_header_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# hello\n1 1\n255\n" + bytes([255, 0, 128]))
        assert dio.read_ppm(tmp_path / "c.ppm")[:, 0, 0].tolist() == [1.0, 0.0, 128 / 255]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ParseError, match="byte 0"):
            dio.read_ppm(tmp_path / "b.ppm")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ParseError, match="truncated"):
            dio.read_ppm(tmp_path / "t.ppm")


class TestManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,identity,liveness,domain\n")
        assert dio.load_manifest(tmp_path / "m.csv") == []

    def test_bad_liveness_names_line(self, tmp_path):
        dio.write_ppm(tmp_path / "a.ppm", np.zeros((3, 2, 2)))
        (tmp_path / "m.csv").write_text("path,identity,liveness,domain\na.ppm,0,live,A\na.ppm,1,alive,A\n")
        with pytest.raises(ParseError, match=":3:"):
            dio.load_manifest(tmp_path / "m.csv")

    def test_missing_image(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,identity,liveness,domain\nnone.ppm,0,live,A\n")
        with pytest.raises(ParseError, match="not found"):
            dio.load_manifest(tmp_path / "m.csv")

    def test_save_load(self, small, tmp_path):
        manifest = dio.save_dataset(small, tmp_path)
        back = dio.load_manifest(manifest)
        assert [(s.identity, s.liveness, s.domain) for s in back] == \
            [(s.identity, s.liveness, s.domain) for s in small]
        assert max(np.max(np.abs(a.image - b.image)) for a, b in zip(small, back)) <= 0.5 / 255 + 1e-12
