import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msaff.config import preset
from msaff.datakit import SyntheticSpec, generate_synthetic
from msaff.errors import DatasetError, TrainingError
from msaff.model import MSAFF
from msaff.numerics import Tensor
from msaff.numerics.gradcheck import gradcheck
from msaff.training import (
    Adam,
    Schedule,
    TrainingLog,
    ba_triplet_loss,
    fit,
    read_log,
    sample_batch,
    sample_frames,
    triplet_masks,
)


def loss_loops(emb, labels, margin, reduction="nonzero_mean"):
    B, P, _ = emb.shape
    per_part = []
    for p in range(P):
        terms = []
        for a, pos, neg in itertools.product(range(B), repeat=3):
            if a == pos or labels[a] != labels[pos] or labels[a] == labels[neg]:
                continue
            dap = np.sqrt(sum((emb[a, p] - emb[pos, p]) ** 2))
            dan = np.sqrt(sum((emb[a, p] - emb[neg, p]) ** 2))
            terms.append(max(0.0, margin + dap - dan))
        if reduction == "mean":
            per_part.append(sum(terms) / len(terms))
        else:
            nz = [t for t in terms if t > 0]
            per_part.append(sum(nz) / len(nz) if nz else 0.0)
    return sum(per_part) / P


class FakeItem:
    def __init__(self, sid, n=10):
        self.subject_id = sid
        self.silhouettes = np.arange(n, dtype=float)[:, None, None] * np.ones((n, 2, 2))
        self.skeletons = np.zeros((n, 3, 17))


class TestLoss:
    @pytest.mark.parametrize("ids,per_id,parts", [(2, 2, 2), (3, 3, 4), (2, 3, 1), (3, 2, 3)])
    @pytest.mark.parametrize("reduction", ["nonzero_mean", "mean"])
    def test_matches_triple_loop(self, ids, per_id, parts, reduction):
        rng = np.random.default_rng(ids * 10 + per_id)
        emb = rng.normal(size=(ids * per_id, parts, 3))
        labels = np.repeat(np.arange(ids), per_id)
        got = ba_triplet_loss(emb, labels, 0.2, reduction).item()
        assert got == pytest.approx(loss_loops(emb, labels, 0.2, reduction), abs=1e-9)

    def test_identical_embeddings_give_margin(self):
        emb = np.ones((4, 3, 5))
        assert ba_triplet_loss(emb, [0, 0, 1, 1], 0.3).item() == pytest.approx(0.3, abs=1e-12)

    def test_separated_clusters_give_zero(self):
        emb = np.zeros((4, 2, 3))
        emb[2:] += 10.0
        assert ba_triplet_loss(emb, [0, 0, 1, 1]).item() == 0.0

    @given(st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_permutation_and_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(6, 2, 3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        base = ba_triplet_loss(emb, labels).item()
        perm = rng.permutation(6)
        assert ba_triplet_loss(emb[perm], labels[perm]).item() == pytest.approx(base, abs=1e-9)
        shifted = emb + rng.normal(size=(1, 2, 3)) * 5
        assert ba_triplet_loss(shifted, labels).item() == pytest.approx(base, abs=1e-9)
        assert base >= 0

    def test_single_identity(self):
        with pytest.raises(TrainingError):
            ba_triplet_loss(np.zeros((3, 1, 2)), [5, 5, 5])

    def test_no_positive_pairs(self):
        with pytest.raises(TrainingError):
            ba_triplet_loss(np.zeros((3, 1, 2)), [0, 1, 2])

    def test_masks_exclude_self_pairs(self):
        m = triplet_masks([0, 0, 1])
        assert m.sum() == 2
        assert not m[0, 0].any()

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        emb = Tensor(rng.normal(size=(6, 2, 3)), requires_grad=True)
        labels = [0, 0, 1, 1, 2, 2]
        res = gradcheck(lambda: ba_triplet_loss(emb, labels), [emb], name="ba_triplet")
        assert res.passed, res


class TestSchedule:
    @pytest.mark.parametrize("it,lr", [(0, 1e-4), (29_999, 1e-4), (30_000, 1e-5), (59_999, 1e-5),
                                       (60_000, 1e-6), (99_999, 1e-6)])
    def test_default_milestones(self, it, lr):
        assert Schedule().lr_at(it) == pytest.approx(lr, rel=1e-12)

    def test_grew(self):
        s = Schedule.for_preset("grew")
        assert s.total_iterations == 210_000
        assert s.lr_at(149_999) == 1e-4
        assert s.lr_at(150_000) == pytest.approx(1e-5, rel=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        before = p.data.copy()
        opt = Adam([p])
        for _ in range(10):
            p.grad = np.zeros_like(p.data)
            opt.step(1e-4)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([2.0, -0.5, 1e3])
        Adam([p]).step(0.01)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-6)


class TestSampling:
    def test_batch_shape(self):
        data = [FakeItem(f"{i:03d}") for i in range(10) for _ in range(3)]
        b = sample_batch(data, 8, 8, 4, np.random.default_rng(0))
        assert b.silhouettes.shape[0] == 64
        assert len(set(b.labels.tolist())) == 8
        counts = {lab: (b.labels == lab).sum() for lab in set(b.labels.tolist())}
        assert set(counts.values()) == {8}

    @given(st.integers(1, 40), st.integers(1, 30), st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_frames_sorted(self, length, n, seed):
        idx = sample_frames(length, n, np.random.default_rng(seed))
        assert len(idx) == n
        assert (np.diff(idx) >= 0).all()
        assert idx.min() >= 0 and idx.max() < length
        if length >= n:
            assert len(set(idx.tolist())) == n

    def test_batch_frames_follow_sorted_indices(self):
        b = sample_batch([FakeItem("a"), FakeItem("b")], 2, 1, 5, np.random.default_rng(1))
        for seq in b.silhouettes:
            assert (np.diff(seq[:, 0, 0]) > 0).all()

    def test_too_few_identities(self):
        with pytest.raises(DatasetError):
            sample_batch([FakeItem("a"), FakeItem("b")], 3, 1, 2, np.random.default_rng(0))

    def test_identity_histogram_is_uniform(self):
        n_ids, p, batches = 12, 4, 1000
        data = [FakeItem(f"{i:02d}", 3) for i in range(n_ids)]
        rng = np.random.default_rng(42)
        counts = dict.fromkeys((f"{i:02d}" for i in range(n_ids)), 0)
        for _ in range(batches):
            for lab in set(sample_batch(data, p, 1, 1, rng).labels.tolist()):
                counts[lab] += 1
        q = p / n_ids
        expected = batches * q
        sigma = np.sqrt(batches * q * (1 - q))
        assert all(abs(c - expected) <= 3 * sigma for c in counts.values()), counts


class TestLog:
    def test_round_trip(self, tmp_path):
        log = TrainingLog(tmp_path / "log.csv")
        log.write(0, 0.5, 1e-4)
        log.write(1, 0.25, 1e-4)
        log.close()
        rows = read_log(tmp_path / "log.csv")
        assert rows == [{"iteration": 0, "loss": 0.5, "lr": 1e-4}, {"iteration": 1, "loss": 0.25, "lr": 1e-4}]
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "iteration,loss,lr"


@pytest.fixture(scope="module")
def tiny_data():
    cfg = preset("micro")
    samples, _ = generate_synthetic(SyntheticSpec(identities=4, sequences_per_identity=2, frames=4, noise=0.02,
                                                  height=cfg.height, width=cfg.width))
    return cfg, samples


class TestFit:
    def test_deterministic_given_seed(self, tiny_data):
        cfg, samples = tiny_data
        runs = [fit(MSAFF(cfg), samples, Schedule(5, 5e-4, ()), 4, 2, 4, seed=3) for _ in range(2)]
        assert runs[0] == runs[1]
        assert all(np.isfinite(runs[0]))

    def test_writes_log_and_checkpoints(self, tiny_data, tmp_path):
        cfg, samples = tiny_data
        fit(MSAFF(cfg), samples, Schedule(4, 5e-4, (2,)), 4, 2, 4, out_dir=tmp_path, checkpoint_every=2)
        rows = read_log(tmp_path / "train_log.csv")
        assert [r["lr"] for r in rows] == pytest.approx([5e-4, 5e-4, 5e-5, 5e-5])
        assert (tmp_path / "ckpt_0000002.bin").exists()
        assert (tmp_path / "final.bin").exists()

    def test_non_finite_parameter_is_named(self, tiny_data):
        cfg, samples = tiny_data
        model = MSAFF(cfg)
        model.affm_st.fc_b.data[0, 0] = np.inf
        with pytest.raises(TrainingError, match="affm_st.fc_b"):
            fit(model, samples, Schedule(1, 5e-4, ()), 4, 2, 4)
