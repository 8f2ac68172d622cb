import json

import numpy as np
import pytest

from driftlab import synth
from driftlab.imgstats import amplitude_spectrum, channel_moments, highfreq_energy_ratio
from driftlab.synth import DomainId, generate_scene, make_split, make_task


@pytest.fixture(scope="module")
def val_sets():
    return {d: make_split(d, "val", 64) for d in DomainId}


class TestScene:
    @pytest.mark.parametrize("domain", list(DomainId))
    def test_masks_shared_across_domains(self, domain):
        for seed in range(5):
            _, ref = generate_scene(seed, DomainId.CLEAR, 32)
            img, mask = generate_scene(seed, domain, 32)
            assert mask.tobytes() == ref.tobytes()
            assert img.dtype == np.uint8 and img.shape == (32, 32, 3)

    def test_deterministic(self):
        a = generate_scene(42, "RainLike", 40)
        b = generate_scene(42, "RainLike", 40)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_min_size(self):
        with pytest.raises(ValueError):
            generate_scene(0, DomainId.CLEAR, 8)

    def test_mask_labels_every_pixel(self):
        _, mask = generate_scene(3, DomainId.CLEAR, 32)
        assert mask.max() < synth.CLASS_COUNT

    def test_object_count(self):
        # between 2 and 6 objects, so at least one object class per scene
        for seed in range(50):
            _, mask = generate_scene(seed, DomainId.CLEAR, 32)
            assert 1 <= len(set(np.unique(mask)) - {0}) <= 4

    def test_domain_parse(self):
        assert DomainId.parse("fog") is DomainId.FOG
        assert DomainId.parse("NightLike") is DomainId.NIGHT
        with pytest.raises(ValueError):
            DomainId.parse("sunny")


class TestDomainStatistics:
    def _v(self, val_sets, d):
        return channel_moments(val_sets[d].images).mean[2]

    def test_value_ordering(self, val_sets):
        v = {d: self._v(val_sets, d) for d in DomainId}
        assert v[DomainId.NIGHT] < v[DomainId.CLEAR] < v[DomainId.FOG] <= v[DomainId.SNOW]

    @pytest.mark.parametrize("domain", [DomainId.RAIN, DomainId.SNOW])
    def test_high_frequency(self, val_sets, domain):
        ratio = {d: highfreq_energy_ratio(amplitude_spectrum(val_sets[d].images), 0.5)
                 for d in (DomainId.CLEAR, domain)}
        assert ratio[domain] > ratio[DomainId.CLEAR]

    def test_fog_is_desaturated(self, val_sets):
        assert channel_moments(val_sets[DomainId.FOG].images).mean[1] < \
            channel_moments(val_sets[DomainId.CLEAR].images).mean[1]


class TestTasks:
    def test_same_arguments_identical(self):
        a = make_task("Clear", 5, 100)
        b = make_task("Clear", 5, 100)
        assert a.images.tobytes() == b.images.tobytes() and a.seeds == list(range(100, 105))

    def test_class_coverage(self):
        t = make_split("Clear", "train", 200)
        for c in range(synth.CLASS_COUNT):
            assert np.mean([(m == c).any() for m in t.masks]) >= 0.05

    def test_splits_disjoint(self):
        tr = make_split("Clear", "train", 50)
        va = make_split("Clear", "val", 50)
        assert not set(tr.seeds) & set(va.seeds)
        train_bytes = {img.tobytes() for img in tr.images}
        assert not any(img.tobytes() in train_bytes for img in va.images)

    def test_domains_draw_distinct_scenes(self):
        a = make_split("Clear", "train", 3)
        b = make_split("NightLike", "train", 3)
        assert not set(a.seeds) & set(b.seeds)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            make_task("Clear", 0, 0)

    def test_invalid_masks_rejected(self):
        with pytest.raises(ValueError):
            synth.TaskDataset(DomainId.CLEAR, np.zeros((1, 4, 4, 3), np.uint8), np.full((1, 4, 4), 9, np.uint8))


class TestFiles:
    def test_round_trip(self, tmp_path):
        t = make_task("FogLike", 4, 7, 24)
        synth.save_dataset(t, tmp_path)
        back = synth.load_dataset(tmp_path)
        assert back.domain is DomainId.FOG and back.seeds == t.seeds
        assert back.images.tobytes() == t.images.tobytes()
        assert back.masks.tobytes() == t.masks.tobytes()

    def test_index_contents(self, tmp_path):
        synth.save_dataset(make_task("Clear", 3, 0), tmp_path)
        index = json.loads((tmp_path / "index.json").read_text())
        assert len(index["pairs"]) == 3 and index["class_names"][0] == "background"
        assert len(list(tmp_path.glob("*.ppm"))) == 3 and len(list(tmp_path.glob("*.pgm"))) == 3

    def test_ppm_header(self, tmp_path):
        img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        synth.write_ppm(tmp_path / "a.ppm", img)
        data = (tmp_path / "a.ppm").read_bytes()
        assert data.startswith(b"P6\n3 2\n255\n")
        np.testing.assert_array_equal(synth.read_ppm(tmp_path / "a.ppm"), img)

    def test_pgm_with_comment(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(synth.read_pgm(tmp_path / "m.pgm"), [[1, 2]])

    def test_wrong_magic(self, tmp_path):
        synth.write_pgm(tmp_path / "m.pgm", np.zeros((2, 2), np.uint8))
        with pytest.raises(ValueError):
            synth.read_ppm(tmp_path / "m.pgm")

    def test_real_data_stub(self):
        with pytest.raises(NotImplementedError):
            synth.load_real_dataset("/data")
