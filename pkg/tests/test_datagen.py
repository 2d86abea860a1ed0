import numpy as np
import pytest

from bpinn_ip.datagen import (
    SceneSpec,
    blob_field,
    gen_observation,
    gen_reference,
    make_dataset,
    sample_true_field,
)
from bpinn_ip.fields import PsfKernel, identity_operator, op_apply, restoration_operator, superres_operator


def test_no_blobs_gives_constant_background():
    f = sample_true_field(SceneSpec(8, 6, n_blobs=(0, 0), background=0.25), 3)
    assert f.shape == (6, 8)
    np.testing.assert_array_equal(f, 0.25)


def test_single_centred_blob():
    f = blob_field((9, 9), [(4, 4)], [1.0], [2.0], background=0.5)
    assert f[4, 4] == pytest.approx(1.5, abs=1e-15)
    assert f[4, 6] == pytest.approx(0.5 + np.exp(-4 / 8), abs=1e-15)
    # radially decaying along a row from the centre
    assert np.all(np.diff(f[4, 4:]) < 0)


def test_blob_scene_is_non_negative_and_deterministic():
    spec = SceneSpec(16, 16, n_blobs=(3, 6), background=-0.2)
    a = sample_true_field(spec, 11)
    b = sample_true_field(spec, 11)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0
    assert not np.array_equal(a, sample_true_field(spec, 12))


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(n_blobs=(3, 1))
    with pytest.raises(ValueError):
        SceneSpec(blob_amplitude=(-1.0, 1.0))


class TestObservation:
    def test_noiseless(self, rng):
        A = restoration_operator((8, 8), PsfKernel.gaussian(1.0, 3))
        f = rng.random((8, 8))
        np.testing.assert_array_equal(gen_observation(f, A, 0.0, 1), op_apply(A, f))

    def test_noise_variance(self):
        A = identity_operator((400, 300))
        f = np.zeros((300, 400))
        g = gen_observation(f, A, 0.04, 5)
        assert g.size >= 1e5
        assert abs(np.var(g - f) / 0.04 - 1) < 0.05

    def test_reproducible(self, rng):
        A = identity_operator((5, 5))
        f = rng.random((5, 5))
        np.testing.assert_array_equal(gen_observation(f, A, 0.1, 7), gen_observation(f, A, 0.1, 7))


class TestReference:
    def test_zero_variance(self, rng):
        f = rng.random((4, 4))
        np.testing.assert_array_equal(gen_reference(f, 0.0, 1), f)

    def test_variance(self):
        f = np.ones((350, 300))
        r = gen_reference(f, 0.09, 2)
        assert abs(np.var(r - f) / 0.09 - 1) < 0.05

    def test_reproducible(self, rng):
        f = rng.random((4, 4))
        np.testing.assert_array_equal(gen_reference(f, 0.1, 9), gen_reference(f, 0.1, 9))


class TestMakeDataset:
    spec = SceneSpec(16, 16)
    A = restoration_operator((16, 16), PsfKernel.gaussian(1.5, 5))

    @pytest.mark.parametrize("counts", [(512, 128, 128), (128, 32, 32), (1, 0, 0)])
    def test_split_sizes(self, counts):
        spec = SceneSpec(8, 8)
        A = restoration_operator((8, 8), PsfKernel.gaussian(1.0, 3))
        tr, va, te = make_dataset(spec, A, *counts, v_eps=0.01, v_f=0.01, seed=0)
        assert (len(tr), len(va), len(te)) == counts
        assert tr.supervised and tr.f_T.shape == (counts[0], 8, 8)

    def test_unsupervised_carries_no_labels(self):
        tr, va, te = make_dataset(self.spec, self.A, 3, 2, 2, 0.01, None, 0)
        assert tr.f_T is None and va.f_T is None and not tr.supervised

    def test_bitwise_determinism(self):
        a = make_dataset(self.spec, self.A, 4, 2, 2, 0.01, 0.02, 42)
        b = make_dataset(self.spec, self.A, 4, 2, 2, 0.01, 0.02, 42)
        for x, y in zip(a, b):
            assert x.g.tobytes() == y.g.tobytes()
            assert x.f_T.tobytes() == y.f_T.tobytes()

    def test_changing_test_size_keeps_train(self):
        a, _, _ = make_dataset(self.spec, self.A, 5, 2, 2, 0.01, 0.02, 1)
        b, _, _ = make_dataset(self.spec, self.A, 5, 2, 9, 0.01, 0.02, 1)
        assert a.g.tobytes() == b.g.tobytes()

    def test_splits_are_disjoint_streams(self):
        tr, va, _ = make_dataset(self.spec, self.A, 3, 3, 0, 0.01, None, 1)
        assert not np.array_equal(tr.truth[0], va.truth[0])

    def test_noise_is_unbiased(self):
        tr, _, _ = make_dataset(self.spec, self.A, 64, 0, 0, 0.01, 0.02, 4)
        eg = (tr.g - op_apply(self.A, tr.truth)).ravel()
        ef = (tr.f_T - tr.truth).ravel()
        for e in (eg, ef):
            assert abs(e.mean()) <= 3 * e.std(ddof=1) / np.sqrt(e.size)

    def test_superres_shapes(self):
        A = superres_operator((16, 16), PsfKernel.gaussian(1.0, 3), 2)
        tr, _, _ = make_dataset(self.spec, A, 2, 0, 0, 0.01, 0.01, 0)
        assert tr.g.shape == (2, 8, 8) and tr.f_T.shape == (2, 16, 16)

    def test_operator_scene_mismatch(self):
        with pytest.raises(ValueError):
            make_dataset(SceneSpec(8, 8), self.A, 1, 0, 0, 0.01, None, 0)
