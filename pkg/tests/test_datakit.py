import json

import numpy as np
import pytest

from msaff.datakit import (
    KINEMATIC_RANGES,
    DatasetManifest,
    GaitDataset,
    GaitSample,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_pgm,
    read_skeleton,
    save_dataset,
    walker_pose,
    write_pgm,
)
from msaff.errors import AlignmentError, DatasetError, ParseError, PreprocessingError, SpecError


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(identities=3, sequences_per_identity=2, frames=6, noise=0.02, seed=5))


def skeleton_features(joints):
    """Per-sequence descriptor from raw joints [N,3,Z]: mean pose about the hips and motion spread."""
    xy = joints[:, :2, :]
    hips = xy[:, :, 11:13].mean(axis=2, keepdims=True)
    rel = xy - hips
    return np.concatenate([rel.mean(axis=0).ravel(), xy.std(axis=0).ravel()])


class TestGenerator:
    def test_deterministic(self):
        spec = SyntheticSpec(identities=2, sequences_per_identity=2, frames=5, seed=11)
        a, ka = generate_synthetic(spec)
        b, kb = generate_synthetic(spec)
        assert ka == kb
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.silhouettes, y.silhouettes)
            np.testing.assert_array_equal(x.skeletons, y.skeletons)

    def test_raster_contract(self, small):
        samples, _ = small
        for s in samples:
            assert s.silhouettes.shape == (6, 64, 44)
            assert set(np.unique(s.silhouettes).tolist()) <= {0.0, 1.0}
            assert s.silhouettes.sum() > 0
            assert s.skeletons.shape == (6, 3, 17)
            np.testing.assert_array_equal(s.skeletons[:, 2], 1.0)

    def test_labels(self, small):
        samples, kin = small
        assert len(samples) == 6 and len(kin) == 3
        assert [s.subject_id for s in samples] == ["001", "001", "002", "002", "003", "003"]
        assert [s.condition for s in samples[:2]] == ["nm-01", "nm-02"]

    @pytest.mark.parametrize("seed", range(5))
    def test_nose_oscillates_at_identity_frequency(self, seed):
        frames = 64
        samples, kin = generate_synthetic(SyntheticSpec(identities=2, sequences_per_identity=1, frames=frames,
                                                        seed=seed))
        for s, k in zip(samples, kin):
            y = s.skeletons[:, 1, 0]
            spectrum = np.abs(np.fft.rfft(y - y.mean()))
            assert abs(int(np.argmax(spectrum)) - k["frequency"] * frames) <= 1.0

    def test_identities_are_separated(self):
        spec = SyntheticSpec(identities=8, min_gap=0.12, seed=3)
        _, kin = generate_synthetic(SyntheticSpec(identities=8, sequences_per_identity=1, frames=4, seed=3))
        names = list(KINEMATIC_RANGES)
        unit = [np.array([(k[n] - KINEMATIC_RANGES[n][0]) / (KINEMATIC_RANGES[n][1] - KINEMATIC_RANGES[n][0])
                          for n in names]) for k in kin]
        for i in range(len(unit)):
            for j in range(i):
                assert np.abs(unit[i] - unit[j]).max() >= spec.min_gap

    def test_nearest_centroid_on_skeletons(self):
        samples, _ = generate_synthetic(SyntheticSpec(identities=8, sequences_per_identity=4, frames=30, seed=1))
        feats = np.stack([skeleton_features(s.skeletons) for s in samples])
        labels = np.array([s.subject_id for s in samples])
        hits = 0
        for i in range(len(samples)):
            rest = np.arange(len(samples)) != i
            ids = sorted(set(labels.tolist()))
            cents = np.stack([feats[rest & (labels == u)].mean(axis=0) for u in ids])
            hits += ids[int(np.argmin(np.linalg.norm(cents - feats[i], axis=1)))] == labels[i]
        assert hits == len(samples)

    def test_zero_limb_length(self):
        k = {n: (lo + hi) / 2 for n, (lo, hi) in KINEMATIC_RANGES.items()}
        k["phase"] = 0.0
        k["leg_ratio"] = 0.0
        with pytest.raises(SpecError):
            generate_synthetic(SyntheticSpec(identities=2, sequences_per_identity=1, frames=4,
                                             kinematics=[k, dict(k, leg_ratio=0.5)]))

    @pytest.mark.parametrize("kw", [{"frames": 3}, {"identities": 1}])
    def test_degenerate_sizes(self, kw):
        with pytest.raises(SpecError):
            generate_synthetic(SyntheticSpec(**kw))

    @pytest.mark.parametrize("end", [0, 1])
    def test_tallest_and_shortest_walkers_fit_vertically(self, end):
        k = {n: r[end] for n, r in KINEMATIC_RANGES.items()}
        k["phase"] = 0.0
        pose = walker_pose(k, np.linspace(0, 1 / k["frequency"], 40), 64, 44)
        assert (pose[..., 1] >= 0).all() and (pose[..., 1] <= 64).all()


class TestFiles:
    def test_pgm_maps_255_to_one(self, tmp_path):
        frame = np.zeros((4, 3), dtype=np.uint8)
        frame[1, 2] = 255
        (tmp_path / "f.pgm").write_bytes(b"P5\n# comment\n3 4\n255\n" + frame.tobytes())
        out = read_pgm(tmp_path / "f.pgm")
        assert out.dtype == np.float64
        np.testing.assert_array_equal(out, frame / 255.0)
        assert set(np.unique(out).tolist()) == {0.0, 1.0}

    def test_pgm_header_bytes(self, tmp_path):
        write_pgm(tmp_path / "f.pgm", np.ones((2, 3)))
        assert (tmp_path / "f.pgm").read_bytes() == b"P5\n3 2\n255\n" + b"\xff" * 6

    def test_truncated_pgm_offset(self, tmp_path):
        (tmp_path / "f.pgm").write_bytes(b"P5\n3 4\n255\n" + b"\x00" * 5)
        with pytest.raises(ParseError, match="offset 11"):
            read_pgm(tmp_path / "f.pgm")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ParseError, match="offset 0"):
            read_pgm(tmp_path / "f.pgm")

    def test_bad_skeleton_json(self, tmp_path):
        (tmp_path / "s.json").write_text('{"joints": [1, 2')
        with pytest.raises(ParseError, match="byte offset"):
            read_skeleton(tmp_path / "s.json")


class TestDataset:
    def test_round_trip(self, small, tmp_path):
        samples, _ = small
        path = save_dataset(samples, tmp_path, ["001", "002"], ["003"], ["nm-02"])
        ds = load_dataset(path)
        assert len(ds) == len(samples)
        for a, b in zip(samples, ds):
            assert a.key == b.key
            np.testing.assert_array_equal(a.silhouettes, b.silhouettes)
            np.testing.assert_array_equal(a.skeletons, b.skeletons)
        assert [s.subject_id for s in ds.test()] == ["003", "003"]
        doc = json.loads(path.read_text())
        assert doc["schema_version"] == 1 and doc["frame_size"] == [64, 44]

    def test_alignment_error_names_entry(self, small, tmp_path):
        samples, _ = small
        path = save_dataset(samples[:1], tmp_path)
        frames = sorted((tmp_path / "001" / "nm-01-090" / "silhouettes").glob("*.pgm"))
        frames[-1].unlink()
        with pytest.raises(AlignmentError, match="001/nm-01-090"):
            load_dataset(path)

    def test_frame_size_checked(self, small, tmp_path):
        samples, _ = small
        path = save_dataset(samples[:1], tmp_path)
        with pytest.raises(PreprocessingError):
            load_dataset(path, frame_size=(16, 12))

    def test_overlapping_split(self, small, tmp_path):
        samples, _ = small
        path = save_dataset(samples, tmp_path, ["001", "002"], ["002", "003"])
        with pytest.raises(DatasetError, match="002"):
            load_dataset(path)
        with pytest.raises(DatasetError):
            GaitDataset(list(samples), ["001"], ["001"])

    def test_sample_alignment(self):
        with pytest.raises(AlignmentError):
            GaitSample("001", "nm-01", "090", np.zeros((29, 64, 44)), np.zeros((30, 3, 17)))

    def test_manifest_load(self, small, tmp_path):
        samples, _ = small
        m = DatasetManifest.load(save_dataset(samples, tmp_path, ["001"], ["002", "003"]))
        assert m.train_ids == ["001"] and m.frame_size == (64, 44)
