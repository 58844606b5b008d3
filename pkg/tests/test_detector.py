import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fedshield.config import MAEConfig
from fedshield.detector import DetectorCalibration, MAEModel, calibrate_threshold, \
    detection_score, detection_scores, mae_loss, num_patches, patchify, \
    sample_mask, sample_masks, train_mae, unpatchify
from fedshield.seeding import numpy_rng

from conftest import random_sampleset


def tiny_mae(image_size=8, patch=2, **overrides) -> MAEModel:
    base = dict(patch_size=patch, mask_ratio=0.75, depth=1, dim=32, heads=2,
                decoder_depth=1, epochs=1, lr=1e-3, batch_size=8)
    base.update(overrides)
    torch.manual_seed(0)
    return MAEModel(MAEConfig(**base), image_size, 3)


class TestPatchify:
    def test_patchify_counts(self):
        x32 = torch.rand(1, 3, 32, 32)
        assert patchify(x32, 4).shape == (1, 64, 48)
        assert num_patches(32, 32, 4) == 64
        x224 = torch.zeros(1, 3, 224, 224)
        assert patchify(x224, 16).shape == (1, 196, 768)
        assert num_patches(224, 224, 16) == 196

    def test_roundtrip_exact(self):
        x = torch.rand(2, 3, 16, 16)
        patches = patchify(x, 4)
        back = unpatchify(patches, 4, 3, 16, 16)
        assert torch.equal(back, x)

    def test_row_major_order(self):
        # first patch is the top-left corner
        x = torch.arange(16.0).reshape(1, 1, 4, 4)
        patches = patchify(x, 2)
        assert torch.equal(patches[0, 0], torch.tensor([0.0, 1.0, 4.0, 5.0]))
        assert torch.equal(patches[0, 1], torch.tensor([2.0, 3.0, 6.0, 7.0]))

    def test_indivisible_dimensions(self):
        with pytest.raises(ValueError, match="divisible"):
            patchify(torch.rand(1, 3, 10, 10), 4)


class TestSampleMask:
    def test_sample_mask_fixed_count(self):
        rng = numpy_rng(0, "m")
        mask = sample_mask(64, 0.75, rng)
        assert int(mask.sum()) == 48
        assert mask.shape == (64,)

    def test_minimal_ratio_masks_one(self):
        rng = numpy_rng(1, "m")
        mask = sample_mask(64, 0.01, rng)
        assert int(mask.sum()) == 1

    def test_deterministic_given_rng(self):
        a = sample_mask(16, 0.5, numpy_rng(2, "m"))
        b = sample_mask(16, 0.5, numpy_rng(2, "m"))
        assert torch.equal(a, b)

    def test_degenerate_ratio_rejected(self):
        with pytest.raises(ValueError, match="ratio"):
            sample_mask(16, 0.0, numpy_rng(3, "m"))
        with pytest.raises(ValueError, match="ratio"):
            sample_mask(16, 1.0, numpy_rng(3, "m"))

    def test_masks_roughly_uniform(self):
        # each patch should be masked about r of the time over many draws
        rng = numpy_rng(4, "m")
        counts = torch.zeros(16)
        draws = 400
        for _ in range(draws):
            counts += sample_mask(16, 0.5, rng).float()
        freq = counts / draws
        assert float(freq.min()) > 0.35 and float(freq.max()) < 0.65


class TestMAEForward:
    def test_encoder_blind_to_masked_content(self):
        mae = tiny_mae()
        x = torch.rand(2, 3, 8, 8)
        mask = sample_mask(16, 0.75, numpy_rng(5, "m"))
        out1 = mae(x, mask)
        # scramble the masked patches of the input
        patches = patchify(x, 2)
        scrambled = patches.clone()
        scrambled[:, mask] = torch.rand_like(scrambled[:, mask])
        x2 = unpatchify(scrambled, 2, 3, 8, 8)
        out2 = mae(x2, mask)
        assert torch.equal(out1, out2)

    def test_output_shape_and_finite(self):
        mae = tiny_mae()
        x = torch.rand(3, 3, 8, 8)
        mask = sample_mask(16, 0.5, numpy_rng(6, "m"))
        out = mae(x, mask)
        assert out.shape == x.shape
        assert torch.isfinite(out).all()

    def test_per_sample_masks(self):
        mae = tiny_mae()
        x = torch.rand(2, 3, 8, 8)
        masks = sample_masks(2, 16, 0.5, numpy_rng(7, "m"))
        batched = mae(x, masks)
        single0 = mae(x[0:1], masks[0:1])
        assert torch.allclose(batched[0], single0[0], atol=1e-6)

    def test_mask_size_mismatch(self):
        mae = tiny_mae()
        with pytest.raises(ValueError, match="patches"):
            mae(torch.rand(1, 3, 8, 8), torch.zeros(9, dtype=torch.bool))


class TestMAELoss:
    def test_zero_for_perfect_reconstruction(self):
        x = torch.rand(2, 3, 8, 8)
        mask = sample_mask(16, 0.5, numpy_rng(8, "m"))
        assert float(mae_loss(x, x.clone(), mask, 2)) == 0.0

    def test_visible_patch_changes_ignored(self):
        x = torch.rand(1, 3, 8, 8)
        x_hat = torch.rand(1, 3, 8, 8)
        mask = sample_mask(16, 0.5, numpy_rng(9, "m"))
        base = mae_loss(x, x_hat, mask, 2)
        patches = patchify(x_hat, 2)
        patches[:, ~mask] += torch.randn_like(patches[:, ~mask])
        perturbed = unpatchify(patches, 2, 3, 8, 8)
        assert float(mae_loss(x, perturbed, mask, 2)) == float(base)

    def test_mae_loss_masked_only_closed_form(self):
        # one masked patch with uniform per-pixel error e: loss = p*p*C * e^2
        x = torch.zeros(1, 3, 8, 8)
        x_hat = torch.zeros(1, 3, 8, 8)
        mask = torch.zeros(16, dtype=torch.bool)
        mask[5] = True
        e = 0.3
        patches = patchify(x_hat, 2)
        patches[:, 5] = e
        x_hat = unpatchify(patches, 2, 3, 8, 8)
        expected = (2 * 2 * 3) * e**2
        assert float(mae_loss(x, x_hat, mask, 2)) == pytest.approx(expected, rel=1e-6)

    def test_empty_mask_rejected(self):
        x = torch.rand(1, 3, 8, 8)
        with pytest.raises(ValueError, match="empty mask"):
            mae_loss(x, x, torch.zeros(16, dtype=torch.bool), 2)


class TestTrainMAE:
    def test_zero_epochs_unchanged(self):
        mae = tiny_mae()
        before = copy.deepcopy(mae.state_dict())
        rng = np.random.default_rng(0)
        history = train_mae(mae, random_sampleset(rng, n=8), 0, 1e-3, 4, seed=0)
        assert history == []
        assert all(torch.equal(before[k], v) for k, v in mae.state_dict().items())

    def test_train_mae_improves_reconstruction(self):
        # constant images are trivially learnable
        images = torch.full((16, 3, 8, 8), 0.5)
        labels = torch.zeros(16, dtype=torch.long)
        from fedshield.data import SampleSet
        ds = SampleSet(images, labels)
        mae = tiny_mae()
        history = train_mae(mae, ds, 30, 2e-3, 8, seed=1)
        assert history[-1] < history[0]
        assert history[-1] < 0.05

    def test_empty_dataset_rejected(self):
        from fedshield.data import SampleSet
        empty = SampleSet(torch.zeros(0, 3, 8, 8), torch.zeros(0).long())
        with pytest.raises(ValueError, match="empty"):
            train_mae(tiny_mae(), empty, 1, 1e-3, 4, seed=0)


class TestDetectionScore:
    def test_detection_score_reproducible_and_all_patches(self):
        mae = tiny_mae()
        x = torch.rand(1, 3, 8, 8)
        s1 = detection_score(mae, x[0], n_draws=2, seed=42, sample_id="a")
        s2 = detection_score(mae, x[0], n_draws=2, seed=42, sample_id="a")
        assert s1 == s2
        # score is the mean over all patches: reconstructing one patch badly
        # moves the score by err/P
        with torch.no_grad():
            recon = mae(x, torch.zeros(1, 16, dtype=torch.bool))
        err = ((patchify(x, 2) - patchify(recon, 2))**2).sum(-1).mean()
        unmasked = detection_scores(mae, x, 1, 0, masked=False)
        assert float(unmasked[0]) == pytest.approx(float(err), rel=1e-5)

    def test_score_independent_of_batch_composition(self):
        mae = tiny_mae()
        x = torch.rand(4, 3, 8, 8)
        batch_scores = detection_scores(mae, x, 2, 7, sample_ids=list("abcd"))
        solo = detection_scores(mae, x[2:3], 2, 7, sample_ids=["c"])
        assert float(batch_scores[2]) == pytest.approx(float(solo[0]), rel=1e-5)

    def test_more_draws_reduce_mask_variance(self):
        mae = tiny_mae()
        x = torch.rand(1, 3, 8, 8)
        few = [detection_scores(mae, x, 1, seed, ["s"])[0] for seed in range(24)]
        many = [detection_scores(mae, x, 8, seed, ["s"])[0] for seed in range(24)]
        assert np.std(many) < np.std(few)


class TestCalibration:
    def test_exact_tail_count_kappa_5(self):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal(1000)
        cal = calibrate_threshold(scores, 0.05)
        assert int((scores > cal.tau).sum()) == 50

    def test_exact_tail_count_kappa_18(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal(1000)
        cal = calibrate_threshold(scores, 0.18)
        assert int((scores > cal.tau).sum()) == 180

    def test_identical_scores(self):
        cal = calibrate_threshold(np.full(100, 2.5), 0.05)
        assert cal.tau == 2.5
        assert not cal.flag(2.5)
        assert cal.flag(2.6)

    def test_too_few_scores(self):
        with pytest.raises(ValueError, match="at least 20"):
            calibrate_threshold(np.arange(10), 0.05)

    def test_json_roundtrip(self, tmp_path):
        cal = calibrate_threshold(np.random.default_rng(2).random(50), 0.1)
        cal.to_json(tmp_path / "cal.json")
        loaded = DetectorCalibration.from_json(tmp_path / "cal.json")
        assert loaded.tau == cal.tau
        assert loaded.kappa == cal.kappa
        assert np.array_equal(loaded.scores, cal.scores)

    @given(kappa=st.floats(0.01, 0.5), n=st.integers(30, 300))
    @settings(max_examples=25, deadline=None)
    def test_tail_fraction_within_one_order_statistic(self, kappa, n):
        rng = np.random.default_rng(int(kappa * 1000) + n)
        scores = rng.standard_normal(n)
        cal = calibrate_threshold(scores, kappa)
        above = int((scores > cal.tau).sum())
        assert abs(above - kappa * n) <= 1.0
