"""
Test suite for karyosim.
"""

import csv
import json
import math
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from scipy import ndimage
from click.testing import CliRunner

from cli import cli
from config import (
    PhantomConfig, SplitConfig, EasConfig, run_config_from_dict,
    load_run_config, get_config,
)
from database import (
    DatasetDatabase, PoolDatabase, write_pgm, read_pgm, save_checkpoint, load_checkpoint,
)
from detector import (
    energy, energy_loss, total_loss, estimate_threshold, select_synthetic, blend_parameters,
    train_detector, eas_train, build_detector, decide, predict, rebalance, TrainingState,
)
from diffusion import (
    NoiseSchedule, schedule_new, marginal, forward_sample, exact_score, reverse_step,
    build_denoiser, TrainingPair, TrainingConfig, train_denoiser, restore, noise_loss, smoothed,
)
from exceptions import (
    ConfigInvalid, InvalidParameter, IndexOutOfRange, ShapeMismatch, TooSmall, TooFewSamples,
    SingleClass, SequenceTooShort, EmptyMask, MultipleComponents, AxisTooShort, DegenerateAxis,
    ZeroVariance, NonFiniteLoss, NoAbnormalSamples, MissingArtifact, UnknownClass, ValidationError,
    NoDonorAvailable, KarySimError,
)
from imaging import (
    Skeleton, binarize, largest_component, thin, extract_axis, sample_axis, extract_patches,
    stack_patches, rectify, fit_to_canvas, patch_width,
)
from metrics import (
    classification_metrics, confusion_from_labels, auc, psnr, ssim, mmd_kid, kid_features, aggregate,
)
from models import (
    GrayImage, BinaryMask, MedialAxis, Patch, PatchSequence, PerturbationOp, PerturbationKind,
    Confusion, ScoredSample, Label, Split, DatasetManifest,
)
from perturb import apply_perturbation, mac_score, filter_by_mac, simulate_abnormal, draw_interval, rearrange
from phantom import (
    generate_normal, generate_abnormal_gt, build_dataset, band_profile, registered_classes, edit_template,
)
from pipeline import build_pairs, cmd_phantom_gen, cmd_perturb, cmd_restore_train, cmd_restore_run
from plots import histogram_svg, roc_svg
from utils import derive_seed, sampling_epochs, format_metric, get_application_info

STRAIGHT = PhantomConfig(straight_fraction=1.0)
SLOW = get_config().SLOW_TESTS


def make_sequence(count, length=4, width=3):
    """Patches whose pixels encode their index, with a row gradient so flips are visible."""
    patches = []
    for k in range(count):
        pixels = np.clip(0.1 * k + np.linspace(0.0, 0.05, length)[:, None] * np.ones((1, width)), 0, 1)
        patches.append(Patch((float(k * length), 0.0), 0.0, pixels))
    return PatchSequence(patches)


def column_profile(image, top, length, column=32):
    rows = np.arange(int(math.ceil(top)) + 1, int(math.floor(top + length)) - 1)
    u = (rows - top) / length
    return u, image.pixels[rows, column - 1:column + 2].mean(axis=1)


def row_extent(mask):
    rows = np.flatnonzero(mask.bits.any(axis=1))
    return rows[-1] - rows[0] + 1


def read_rows(path):
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


# ============================================================================
# IMAGING
# ============================================================================

class TestImaging(unittest.TestCase):
    """Test cases for masks, skeletons, axes and patches."""

    def test_binarize(self):
        """Test the dark-foreground threshold convention."""
        mask = binarize(GrayImage([[0.2, 0.7]]), 0.5)
        self.assertEqual(mask.bits.tolist(), [[True, False]])
        self.assertEqual(binarize(GrayImage(np.ones((4, 4))), 0.5).area, 0)
        with self.assertRaises(InvalidParameter):
            binarize(GrayImage([[0.2]]), 1.0)

    def test_gray_image_validation(self):
        """Test that intensities outside [0,1] are rejected."""
        with self.assertRaises(InvalidParameter):
            GrayImage([[1.5]])
        self.assertEqual(GrayImage.clipped([[1.5, -1.0]]).pixels.tolist(), [[1.0, 0.0]])

    def test_thin_errors(self):
        """Test empty and multi-component masks."""
        with self.assertRaises(EmptyMask):
            thin(BinaryMask(np.zeros((5, 5), bool)))
        bits = np.zeros((10, 10), bool)
        bits[1:3, 1:3] = True
        bits[6:8, 6:8] = True
        with self.assertRaises(MultipleComponents):
            thin(BinaryMask(bits))
        self.assertEqual(largest_component(BinaryMask(bits)).area, 4)

    def test_thin_bar(self):
        """Test that a filled bar thins to a single one-pixel column."""
        bits = np.zeros((31, 15), bool)
        bits[5:26, 5:10] = True
        skeleton = thin(BinaryMask(bits))
        pixels = np.argwhere(skeleton.bits)
        self.assertGreaterEqual(len(pixels), 17)
        self.assertLessEqual(len(pixels), 21)
        self.assertEqual(len(np.unique(pixels[:, 1])), 1)
        self.assertTrue(np.all(bits[skeleton.bits]))
        blocks = skeleton.bits[:-1, :-1] & skeleton.bits[1:, :-1] & skeleton.bits[:-1, 1:] & skeleton.bits[1:, 1:]
        self.assertFalse(blocks.any())
        single = np.zeros((5, 5), bool)
        single[2, 2] = True
        np.testing.assert_array_equal(thin(BinaryMask(single)).bits, single)

    def test_thin_idempotent(self):
        """Test that thinning a skeleton returns the skeleton."""
        _, mask, _, _ = generate_normal(0, 11, PhantomConfig())
        skeleton = thin(mask)
        again = thin(skeleton.as_mask())
        np.testing.assert_array_equal(again.bits, skeleton.bits)

    def test_extract_axis_straight_identity(self):
        """Test that a straight path is returned unchanged, top first."""
        bits = np.zeros((30, 20), bool)
        bits[5:25, 10] = True
        axis = extract_axis(Skeleton.from_bits(bits))
        expected = np.column_stack([np.arange(5, 25), np.full(20, 10)])
        np.testing.assert_array_equal(axis.points, expected)

    def test_extract_axis_prunes_spur(self):
        """Test the Y-shaped skeleton with a short spur."""
        bits = np.zeros((80, 80), bool)
        bits[10:71, 40] = True
        bits[40, 41:46] = True
        axis = extract_axis(Skeleton.from_bits(bits), min_branch_length=8)
        self.assertEqual(len(axis), 61)
        self.assertEqual(tuple(axis.points[0]), (10.0, 40.0))
        self.assertEqual(tuple(axis.points[-1]), (70.0, 40.0))
        self.assertTrue(np.all(axis.points[:, 1] == 40))

    def test_extract_axis_merges_parallel_paths(self):
        """Test that two paths one pixel apart become one."""
        bits = np.zeros((40, 25), bool)
        bits[5:31, 10] = True
        bits[5:31, 12] = True
        axis = extract_axis(Skeleton.from_bits(bits), merge_distance=2.0)
        self.assertGreaterEqual(len(axis), 20)
        self.assertTrue(np.all((axis.points[:, 1] >= 9) & (axis.points[:, 1] <= 13)))

    def test_extract_axis_reversal_invariant(self):
        """Test that the axis does not depend on the order or orientation of the skeleton pixels."""
        pixels = [(5 + k, 5 + k // 2) for k in range(20)]
        forward = extract_axis(Skeleton.from_pixels(pixels, (30, 30)))
        backward = extract_axis(Skeleton.from_pixels(pixels[::-1], (30, 30)))
        np.testing.assert_array_equal(forward.points, backward.points)
        np.testing.assert_array_equal(forward.points, np.array(pixels, dtype=np.float64))
        bits = Skeleton.from_pixels(pixels, (30, 30)).bits
        flipped = extract_axis(Skeleton.from_bits(bits[::-1, ::-1].copy()))
        np.testing.assert_array_equal((29.0 - flipped.points)[::-1], forward.points)

    def test_sample_axis(self):
        """Test uniform arc-length sampling."""
        axis = MedialAxis(np.column_stack([np.zeros(11), np.arange(11)]))
        centers = sample_axis(axis, 2)
        np.testing.assert_allclose(centers, np.column_stack([np.zeros(6), np.arange(0, 11, 2)]))
        self.assertEqual(len(sample_axis(axis, 3)), 4)
        with self.assertRaises(AxisTooShort):
            sample_axis(axis, 11)

    def test_sample_axis_quarter_circle(self):
        """Test arc spacing on a quarter circle."""
        theta = np.linspace(0.0, math.pi / 2, 20001)
        axis = MedialAxis(np.column_stack([10 * np.sin(theta), 10 * np.cos(theta)]))
        centers = sample_axis(axis, 2)
        self.assertEqual(len(centers), 8)
        angles = np.arctan2(centers[:, 0], centers[:, 1])
        np.testing.assert_allclose(np.diff(angles) * 10.0, 2.0, atol=1e-6)

    def test_extract_patches_axis_aligned(self):
        """Test that axis-aligned patches are exact crops."""
        rng = np.random.default_rng(0)
        pixels = rng.uniform(0.0, 1.0, (40, 30))
        bits = np.zeros((40, 30), bool)
        bits[5:36, 12:19] = True
        axis = MedialAxis(np.column_stack([np.arange(5, 36), np.full(31, 15)]))
        centers = sample_axis(axis, 5)
        width = patch_width(BinaryMask(bits), centers)
        self.assertEqual(width, 11)
        sequence = extract_patches(GrayImage(pixels), BinaryMask(bits), centers, 5)
        self.assertEqual(len(sequence), len(centers))
        for patch, (r, c) in zip(sequence, centers.astype(int)):
            crop = pixels[r - 2:r + 3, c - 5:c + 6]
            self.assertLess(np.abs(patch.pixels - crop).max(), 1e-6)

    def test_extract_patches_rotation(self):
        """Test that patches of a chromosome rotated by 30 degrees match the unrotated crops."""
        pixels = np.ones((80, 80))
        rows = np.arange(18, 63)
        pixels[18:63, 36:45] = (0.4 + 0.2 * np.sin(rows / 4.0))[:, None]
        pixels = ndimage.gaussian_filter(pixels, 1.0)
        image = GrayImage.clipped(pixels)
        mask = binarize(image, 0.9)
        axis = MedialAxis(np.column_stack([np.arange(22, 59), np.full(37, 40)]))
        centers = sample_axis(axis, 5)
        upright = extract_patches(image, mask, centers, 5)

        angle = math.radians(30.0)
        rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        pivot = np.array([39.5, 39.5])
        grid = np.indices((80, 80)).reshape(2, -1).T - pivot
        source = grid @ rotation + pivot
        turned = ndimage.map_coordinates(pixels, source.T, order=1, mode='constant', cval=1.0).reshape(80, 80)
        turned_centers = (centers - pivot) @ rotation.T + pivot
        rotated = extract_patches(GrayImage.clipped(turned), binarize(GrayImage.clipped(turned), 0.9),
                                  turned_centers, 5, width=upright.width)

        self.assertEqual(len(rotated), len(upright))
        difference = np.abs(stack_patches(rotated).pixels - stack_patches(upright).pixels)
        self.assertLess(difference.mean(), 0.02)

    def test_stack_patches(self):
        """Test concatenation order and shape."""
        sequence = make_sequence(3, length=8, width=10)
        stacked = stack_patches(sequence)
        self.assertEqual(stacked.shape, (24, 10))
        np.testing.assert_array_equal(stacked.pixels[8:16], sequence[1].pixels)
        single = PatchSequence([sequence[0]])
        np.testing.assert_array_equal(stack_patches(single).pixels, sequence[0].pixels)

    def test_rectify_round_trip(self):
        """Test that stacking a straight chromosome's patches reproduces its crop."""
        pixels = np.full((90, 31), 0.97)
        bands = np.linspace(0.2, 0.6, 70)
        pixels[10:80, 12:19] = bands[:, None]
        image = GrayImage(pixels)
        axis, sequence = rectify(image, 0.9, 5)
        stacked = stack_patches(sequence)
        first = np.round(sequence[0].center).astype(int)
        width = sequence.width
        crop = pixels[first[0] - 2:first[0] - 2 + stacked.height, 15 - width // 2:15 + width // 2 + 1]
        self.assertEqual(crop.shape, stacked.shape)
        self.assertLess(np.abs(stacked.pixels - crop).mean(), 0.02)

    def test_fit_to_canvas(self):
        """Test centering and shrinking."""
        small = GrayImage(np.full((10, 6), 0.5))
        fitted = fit_to_canvas(small, (20, 20), fill=1.0)
        self.assertEqual(fitted.shape, (20, 20))
        self.assertEqual(fitted.pixels[10, 10], 0.5)
        self.assertEqual(fitted.pixels[0, 0], 1.0)
        large = GrayImage(np.full((80, 20), 0.3))
        self.assertEqual(fit_to_canvas(large, (64, 64)).shape, (64, 64))


# ============================================================================
# PERTURBATION
# ============================================================================

class TestPerturb(unittest.TestCase):
    """Test cases for perturbation operators and the MAC score."""

    def test_deletion(self):
        """Test deletion of s_3."""
        seq = make_sequence(4)
        out = apply_perturbation(seq, PerturbationOp.deletion(3))
        self.assertEqual([p.pixels[0, 0] for p in out], [seq[i].pixels[0, 0] for i in (0, 1, 3)])

    def test_duplication(self):
        """Test duplication of s_2."""
        seq = make_sequence(3)
        out = apply_perturbation(seq, PerturbationOp.duplication(2))
        self.assertEqual([p.pixels[0, 0] for p in out], [seq[i].pixels[0, 0] for i in (0, 1, 1, 2)])

    def test_inversion_involution(self):
        """Test inversion of s_2..s_3 and its involution."""
        seq = make_sequence(4)
        op = PerturbationOp.inversion(2, 3)
        out = apply_perturbation(seq, op)
        np.testing.assert_array_equal(out[1].pixels, seq[2].pixels[::-1])
        np.testing.assert_array_equal(out[2].pixels, seq[1].pixels[::-1])
        np.testing.assert_array_equal(out[0].pixels, seq[0].pixels)
        twice = apply_perturbation(out, op)
        for a, b in zip(twice, seq):
            np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_translocation(self):
        """Test replacement of s_2 with a donor patch."""
        seq = make_sequence(3)
        donor = np.full((4, 3), 0.9)
        out = apply_perturbation(seq, PerturbationOp.translocation(2, donor, donor_class=1))
        np.testing.assert_array_equal(out[1].pixels, donor)
        np.testing.assert_array_equal(out[2].pixels, seq[2].pixels)
        resized = apply_perturbation(seq, PerturbationOp.translocation(1, np.full((8, 6), 0.4), 1))
        self.assertEqual(resized[0].pixels.shape, (4, 3))

    def test_deletion_then_duplication_restores_length(self):
        """Test Deletion after Duplication at the same index."""
        seq = make_sequence(5)
        out = apply_perturbation(apply_perturbation(seq, PerturbationOp.duplication(2)),
                                 PerturbationOp.deletion(2))
        self.assertEqual(len(out), len(seq))

    def test_operator_errors(self):
        """Test index and length errors."""
        with self.assertRaises(IndexOutOfRange):
            apply_perturbation(make_sequence(3), PerturbationOp.deletion(4))
        with self.assertRaises(IndexOutOfRange):
            apply_perturbation(make_sequence(3), PerturbationOp.inversion(2, 5))
        with self.assertRaises(SequenceTooShort):
            apply_perturbation(make_sequence(2), PerturbationOp.deletion(1))

    def test_mac_straight(self):
        """Test that straight axes score 100 for every M."""
        axis = MedialAxis(np.column_stack([np.arange(30.0), 0.5 * np.arange(30.0)]))
        for samples in range(2, 10):
            self.assertAlmostEqual(mac_score(axis, samples), 100.0, places=9)

    def test_mac_polyline(self):
        """Test the hand-evaluated bent polyline."""
        axis = MedialAxis([[0, 0], [1, 0], [1, 1]])
        delta = 1.0 - 1.0 / math.sqrt(2.0)
        self.assertAlmostEqual(mac_score(axis, 3), (1.0 - 2 * delta / 3) * 100.0, places=9)
        self.assertAlmostEqual(mac_score(axis, 3), 80.474, places=3)
        self.assertAlmostEqual(mac_score(axis, 3, 'mean'), (1.0 - 2 * delta / 2) * 100.0, places=9)

    def test_mac_invariances(self):
        """Test translation, rotation and reversal invariance."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            points = np.cumsum(rng.normal(size=(8, 2)) + [2.0, 0.0], axis=0)
            axis = MedialAxis(points)
            try:
                reference = mac_score(axis)
            except DegenerateAxis:
                continue
            angle = rng.uniform(0, 2 * math.pi)
            rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
            moved = MedialAxis(points @ rotation.T + rng.normal(size=2) * 10)
            self.assertAlmostEqual(mac_score(moved), reference, places=9)
            self.assertAlmostEqual(mac_score(axis.reversed()), reference, places=9)

    def test_mac_degenerate(self):
        """Test that a closed loop has no global direction."""
        with self.assertRaises(DegenerateAxis):
            mac_score(MedialAxis([[0, 0], [0, 5], [5, 5], [5, 0], [0, 0]]))

    def test_filter_by_mac_strict(self):
        """Test the strict threshold and subsequence property."""
        scores = {'a': 100.0, 'b': 86.0, 'c': 85.0, 'd': 60.0}
        candidates = [(name, name) for name in scores]
        with mock.patch('perturb.mac_score', side_effect=lambda axis, *args: scores[axis]):
            kept = filter_by_mac(candidates, 85)
        self.assertEqual([c[0] for c in kept], ['a', 'b'])
        self.assertEqual(filter_by_mac([], 85), [])

    def test_filter_by_mac_phantoms(self):
        """Test that the filter equals an independent recomputation on bent phantoms."""
        kept_oracle, candidates = [], []
        for k in range(200):
            config = PhantomConfig(straight_fraction=0.0, max_bend=0.6 * k / 199)
            _, _, axis, _ = generate_normal(k % 4, 100 + k, config)
            candidates.append((k, axis))
            points = axis.points
            cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
            positions = np.linspace(0.0, cumulative[-1], 6)
            sampled = np.column_stack([np.interp(positions, cumulative, points[:, i]) for i in (0, 1)])
            g = (sampled[-1] - sampled[0]) / np.linalg.norm(sampled[-1] - sampled[0])
            total = 0.0
            for i in range(5):
                d = sampled[i + 1] - sampled[i]
                total += abs(1.0 - np.dot(d / np.linalg.norm(d), g))
            if (1.0 - total / 6) * 100.0 > 85:
                kept_oracle.append(k)
        self.assertIn(0, kept_oracle)
        self.assertLess(len(kept_oracle), 200)
        self.assertEqual([c[0] for c in filter_by_mac(candidates, 85)], kept_oracle)

    def test_straight_phantom_mac(self):
        """Test that straight phantoms score 100."""
        for seed in range(5):
            _, _, axis, _ = generate_normal(seed % 4, seed, STRAIGHT)
            self.assertAlmostEqual(mac_score(axis), 100.0, delta=0.5)

    def test_draw_interval_range(self):
        """Test that l stays within the fractions of the height."""
        rng = np.random.default_rng(0)
        values = [draw_interval(60, rng) for _ in range(200)]
        self.assertGreaterEqual(min(values), 3)
        self.assertLessEqual(max(values), 12)

    def test_simulate_deletion_height(self):
        """Test that deletion removes exactly one patch."""
        image, _, _, _ = generate_normal(1, 5, STRAIGHT)
        _, sequence = rectify(image, 0.9, 5)
        perturbed, record = simulate_abnormal(image, 1, PerturbationOp.deletion(2), seed=1, interval=5)
        self.assertEqual(perturbed.height, (len(sequence) - 1) * 5)
        self.assertEqual(record.op['kind'], 'deletion')
        self.assertGreater(record.source_mac, 85)

    def test_simulate_deterministic(self):
        """Test byte-identical output for a fixed seed."""
        image, _, _, _ = generate_normal(2, 9, STRAIGHT)
        a, ra = simulate_abnormal(image, 2, PerturbationKind.INVERSION, seed=42)
        b, rb = simulate_abnormal(image, 2, PerturbationKind.INVERSION, seed=42)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        self.assertEqual(ra.to_dict(), rb.to_dict())

    def test_simulate_duplication_repeats_band(self):
        """Test that duplication repeats the chosen patch's band profile."""
        image, _, _, _ = generate_normal(3, 21, STRAIGHT)
        _, sequence = rectify(image, 0.9, 6)
        j = len(sequence) // 2
        perturbed, _ = simulate_abnormal(image, 3, PerturbationOp.duplication(j), seed=0, interval=6)
        profile = perturbed.pixels.mean(axis=1)
        first = profile[(j - 1) * 6:j * 6]
        second = profile[j * 6:(j + 1) * 6]
        np.testing.assert_allclose(first, second)

    def test_translocation_needs_other_class(self):
        """Test donor selection across classes."""
        image, _, _, _ = generate_normal(0, 3, STRAIGHT)
        donor, _, _, _ = generate_normal(1, 4, STRAIGHT)
        _, record = simulate_abnormal(image, 0, PerturbationKind.TRANSLOCATION, seed=2,
                                      donors=[('d1', donor, 1)])
        self.assertEqual(record.op['donor_class'], 1)
        with self.assertRaises(NoDonorAvailable):
            simulate_abnormal(image, 0, PerturbationKind.TRANSLOCATION, seed=2, donors=[('d0', image, 0)])

    def test_rearrange_never_perturbs(self):
        """Test that rearrangement does not call the perturbation operators."""
        image, _, _, _ = generate_normal(0, 8, STRAIGHT)
        with mock.patch('perturb.apply_perturbation', side_effect=AssertionError('perturbed')):
            stacked, interval = rearrange(image, seed=3)
        self.assertEqual(stacked.height % interval, 0)


# ============================================================================
# DIFFUSION
# ============================================================================

class TestDiffusion(unittest.TestCase):
    """Test cases for the mean-reverting SDE and the denoiser."""

    def test_schedule_identity(self):
        """Test 2 lam^2 theta_i = sigma_i^2."""
        for steps, sigma_max, lam in [(100, 10 / 255, 2 / 255), (10, 1.0, 0.3), (50, 2.5, 0.5)]:
            schedule = schedule_new(steps, sigma_max, lam)
            np.testing.assert_allclose(2 * lam ** 2 * schedule.thetas[1:] / schedule.sigmas[1:] ** 2, 1.0,
                                       rtol=1e-12)
            self.assertEqual(schedule.thetas_cumsum[0], 0.0)

    def test_schedule_stationary(self):
        """Test that the default ratio reaches the stationary law."""
        self.assertLess(schedule_new(100, 10, 2).mean_factor(100), 0.01)
        self.assertLess(schedule_new(100, 10 / 255, 2 / 255).mean_factor(100), 0.01)
        self.assertLess(schedule_new(100, 10, 1e6).thetas.max(), 1e-9)

    def test_marginal(self):
        """Test the closed-form marginal."""
        schedule = schedule_new(10, 1.0, 0.3)
        m, v = marginal(np.ones((2, 2)), np.zeros((2, 2)), 0, schedule)
        np.testing.assert_array_equal(m, np.ones((2, 2)))
        self.assertEqual(v, 0.0)
        custom = NoiseSchedule(1, 1.0, 1.0, np.array([0.0, 1.0]), np.array([0.0, 0.5]),
                               np.array([0.0, math.log(2.0)]))
        m, v = marginal(np.array([1.0]), np.array([0.0]), 1, custom)
        self.assertAlmostEqual(float(m[0]), 0.5, places=12)
        self.assertAlmostEqual(v, 0.75, places=12)
        with self.assertRaises(ShapeMismatch):
            marginal(np.ones(2), np.ones(3), 1, schedule)

    def test_forward_sample_moments(self):
        """Test Monte-Carlo moments against the marginal."""
        schedule = schedule_new(100, 10 / 255, 2 / 255)
        count = 100000
        x0, s = np.full(count, 0.8), np.full(count, 0.2)
        for i in (5, 50, 100):
            x, _ = forward_sample(x0, s, i, schedule, np.random.default_rng(i))
            m, v = marginal(x0[:1], s[:1], i, schedule)
            self.assertLess(abs(x.mean() - m[0]), 4 * math.sqrt(v / count))
            self.assertLess(abs(x.var() - v) / v, 0.05)
        a = forward_sample(x0[:5], s[:5], 10, schedule, np.random.default_rng(1))
        b = forward_sample(x0[:5], s[:5], 10, schedule, np.random.default_rng(1))
        np.testing.assert_array_equal(a[0], b[0])

    def test_exact_score(self):
        """Test score values and the noise identity."""
        np.testing.assert_array_equal(exact_score(np.ones(3), np.ones(3), 0.5), np.zeros(3))
        self.assertAlmostEqual(float(exact_score(np.array([0.6]), np.array([0.5]), 0.25)[0]), -0.4, places=12)
        rng = np.random.default_rng(0)
        m, v = rng.uniform(size=10), 0.37
        eps = rng.normal(size=10)
        np.testing.assert_allclose(exact_score(m + math.sqrt(v) * eps, m, v) + eps / math.sqrt(v), 0, atol=1e-12)
        with self.assertRaises(ZeroVariance):
            exact_score(m, m, 0.0)

    def test_reverse_step_no_drift(self):
        """Test that zero score and zero theta leave x unchanged."""
        schedule = NoiseSchedule(2, 1.0, 1.0, np.zeros(3), np.zeros(3), np.zeros(3))
        x = np.array([0.3, 0.7])
        np.testing.assert_array_equal(reverse_step(x, np.zeros(2), np.zeros(2), 1, schedule, None, False), x)

    def test_exact_score_reverse_recovers_x0(self):
        """Test the ensemble mean of exact-score reverse trajectories on one pixel."""
        schedule = schedule_new(100, 2.5, 0.5)
        rng = np.random.default_rng(7)
        x0, s = np.full(1000, 0.8), np.full(1000, 0.2)
        x, _ = forward_sample(x0, s, 100, schedule, rng)
        for i in range(100, 0, -1):
            m, v = marginal(x0, s, i, schedule)
            x = reverse_step(x, s, exact_score(x, m, v), i, schedule, rng, True)
        self.assertLess(abs(x.mean() - 0.8), 0.05)

    def test_deterministic_reverse_monotone(self):
        """Test that the deterministic pass from m_T approaches x0 monotonically."""
        schedule = schedule_new(100, 2.5, 0.5)
        x0, s = np.array([0.8]), np.array([0.2])
        x, _ = marginal(x0, s, 100, schedule)
        errors = [abs(x[0] - 0.8)]
        for i in range(100, 0, -1):
            m, v = marginal(x0, s, i, schedule)
            x = reverse_step(x, s, exact_score(x, m, v), i, schedule, None, False)
            errors.append(abs(x[0] - 0.8))
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(errors, errors[1:])))
        self.assertLess(errors[-1], 1e-3)

    def _pairs(self, count=3, shape=(8, 8), seed=0):
        rng = np.random.default_rng(seed)
        return [TrainingPair(GrayImage(rng.uniform(0.2, 0.8, shape)), GrayImage(rng.uniform(0.2, 0.8, shape)))
                for _ in range(count)]

    def test_denoiser_gradient_check(self):
        """Test autograd gradients against central finite differences."""
        schedule = schedule_new(10, 1.0, 0.3)
        denoiser = build_denoiser((8, 8), schedule, widths=(2, 2, 2), embedding_dim=4, seed=1)
        module = denoiser.module
        rng = np.random.default_rng(2)
        x = torch.from_numpy(rng.uniform(size=(2, 8, 8)))
        s = torch.from_numpy(rng.uniform(size=(2, 8, 8)))
        steps = torch.tensor([3, 7])
        eps = torch.from_numpy(rng.normal(size=(2, 8, 8)))
        weights = torch.ones(2, dtype=torch.float64)

        def loss():
            return noise_loss(module(x, s, steps), eps, weights, 'l2')

        module.zero_grad()
        loss().backward()
        parameters = list(module.parameters())
        h = 1e-6
        for p_index in (0, 3, len(parameters) - 1):
            p = parameters[p_index]
            flat = p.data.view(-1)
            for k in range(min(3, flat.numel())):
                original = flat[k].item()
                with torch.no_grad():
                    flat[k] = original + h
                    up = loss().item()
                    flat[k] = original - h
                    down = loss().item()
                    flat[k] = original
                numeric = (up - down) / (2 * h)
                analytic = p.grad.view(-1)[k].item()
                self.assertLess(abs(numeric - analytic) / max(1e-4, abs(numeric) + abs(analytic)), 1e-5)

    def test_zero_weights_leave_parameters(self):
        """Test that gamma = 0 leaves the denoiser unchanged."""
        schedule = schedule_new(10, 1.0, 0.3)
        denoiser = build_denoiser((8, 8), schedule, widths=(2, 2, 2), seed=0)
        before = denoiser.parameters
        config = TrainingConfig(iterations=3, batch_size=2, learning_rate=0.1, gammas=np.zeros(11))
        train_denoiser(self._pairs(), schedule, config, seed=0, denoiser=denoiser)
        np.testing.assert_array_equal(denoiser.parameters, before)

    def test_training_trace_and_errors(self):
        """Test the loss trace, non-finite detection and shape checks."""
        schedule = schedule_new(10, 1.0, 0.3)
        config = TrainingConfig(iterations=4, batch_size=2, learning_rate=0.01, log_every=0)
        denoiser = train_denoiser(self._pairs(), schedule, config, seed=0, widths=(2, 2, 2))
        self.assertEqual([i for i, _ in denoiser.loss_trace], [1, 2, 3, 4])
        self.assertTrue(all(math.isfinite(v) for _, v in denoiser.loss_trace))
        with self.assertRaises(NonFiniteLoss):
            bad = TrainingConfig(iterations=2, batch_size=2, gammas=np.full(11, np.inf))
            train_denoiser(self._pairs(), schedule, bad, seed=0, widths=(2, 2, 2))
        with self.assertRaises(ShapeMismatch):
            train_denoiser(self._pairs() + self._pairs(1, (16, 8)), schedule, config, widths=(2, 2, 2))

    def test_restore_zero_predictor(self):
        """Test restoration with a predictor that outputs zero noise."""
        schedule = schedule_new(10, 1.0, 0.3)
        denoiser = build_denoiser((8, 8), schedule, widths=(2, 2, 2), seed=0)
        with torch.no_grad():
            denoiser.module.out.weight.zero_()
            denoiser.module.out.bias.zero_()
        s = GrayImage(np.full((8, 8), 0.5))
        restored = restore(s, denoiser, schedule, np.random.default_rng(5), stochastic=False)
        z = np.random.default_rng(5).standard_normal((1, 8, 8))[0]
        growth = np.prod(1.0 + schedule.thetas[1:] * schedule.dt)
        expected = np.clip(0.5 + schedule.lam * z * growth, 0.0, 1.0)
        np.testing.assert_allclose(restored.pixels, expected, atol=1e-12)
        again = restore(s, denoiser, schedule, np.random.default_rng(5), stochastic=False)
        np.testing.assert_array_equal(again.pixels, restored.pixels)
        with self.assertRaises(ShapeMismatch):
            restore(GrayImage(np.ones((16, 8))), denoiser, schedule, np.random.default_rng(0))

    def test_smoothed(self):
        """Test the moving average."""
        np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])


# ============================================================================
# DETECTOR
# ============================================================================

class TestDetector(unittest.TestCase):
    """Test cases for energy objectives and adaptive sampling."""

    def test_energy_examples(self):
        """Test energy values."""
        self.assertAlmostEqual(energy([0.0, 0.0]), -math.log(2), places=12)
        self.assertAlmostEqual(energy([5.0, 0.0]), -math.log(math.exp(5) + 1), places=12)
        self.assertAlmostEqual(energy([5.0, 0.0]), -5.0067153, places=6)
        self.assertAlmostEqual(energy([0.0, 0.0], 2.0), -2 * math.log(2), places=12)
        self.assertTrue(math.isfinite(energy([1000.0, -1000.0])))

    def test_energy_invariants(self):
        """Test the shift and temperature identities."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b, c = rng.normal(scale=5, size=3)
            t = rng.uniform(0.1, 5)
            self.assertAlmostEqual(energy([a + c, b + c], t), energy([a, b], t) - c, places=9)
            self.assertAlmostEqual(energy([t * a, t * b], t), t * energy([a, b], 1.0), places=9)

    def test_energy_loss_examples(self):
        """Test hinge arithmetic."""
        self.assertEqual(energy_loss([-30, -3], [0, 1], -27, -5), 0.0)
        self.assertAlmostEqual(energy_loss([-20], [0], -27, -5), 49.0, places=12)
        self.assertAlmostEqual(energy_loss([-30, -20, -10], [0, 0, 1], -27, -5), 49.5, places=12)
        self.assertEqual(energy_loss([], [], -27, -5), 0.0)

    def test_total_loss_examples(self):
        """Test the combined objective."""
        config = EasConfig(loss_weight=0.1)
        # E = -ln 2 lies above m_ab = -5, so the abnormal hinge is inactive
        value = total_loss([[0.0, 0.0]], [1], [-math.log(2)], config)
        self.assertAlmostEqual(value, math.log(2), places=12)
        active = total_loss([[0.0, 0.0]], [1], [-10.0], config)
        self.assertAlmostEqual(active, math.log(2) + 0.1 * 25.0, places=12)
        normal = total_loss([[0.0, 0.0]], [0], [-20.0], config)
        self.assertAlmostEqual(normal, math.log(2) + 0.1 * 49.0, places=12)
        plain = total_loss([[1.0, -1.0], [0.2, 0.4]], [0, 1], None, EasConfig(loss_weight=0.0))
        ce = -(math.log(math.exp(1) / (math.exp(1) + math.exp(-1)))
               + math.log(math.exp(0.4) / (math.exp(0.2) + math.exp(0.4)))) / 2
        self.assertAlmostEqual(plain, ce, places=12)
        confident = total_loss([[60.0, 0.0]], [0], None, EasConfig())
        self.assertLess(confident, 1e-12)

    def test_estimate_threshold_examples(self):
        """Test threshold selection."""
        energies = [-12, -8, -3, 1, -30, -28, -26]
        labels = [1, 1, 1, 1, 0, 0, 0]
        self.assertEqual(estimate_threshold(energies, labels, 0.7), -12.0)
        tau = estimate_threshold(energies, labels, 1.0)
        self.assertEqual(tau, np.nextafter(-30.0, -np.inf))
        self.assertEqual(len(select_synthetic([-12, -8, -3, 1], tau)), 4)
        single = estimate_threshold([0.0], [1], 0.5)
        self.assertEqual(len(select_synthetic([0.0], single)), 1)
        with self.assertRaises(NoAbnormalSamples):
            estimate_threshold([-1.0, -2.0], [0, 0], 0.7)

    def test_estimate_threshold_oracle(self):
        """Test against an exhaustive loop over candidates."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            energies = np.round(rng.normal(size=n) * 5, 1)
            labels = rng.integers(0, 2, size=n)
            labels[0] = 1
            level = float(rng.uniform(0.05, 1.0))
            abnormal = energies[labels == 1]
            best, best_gap = None, None
            for t in [np.nextafter(energies.min(), -np.inf)] + sorted(set(energies.tolist())):
                gap = abs(sum(e > t for e in abnormal) / len(abnormal) - level)
                if best_gap is None or gap < best_gap:
                    best, best_gap = t, gap
            self.assertEqual(estimate_threshold(energies, labels, level), best)

    def test_select_synthetic(self):
        """Test strict selection."""
        self.assertEqual(select_synthetic([-20, -11, -2], -12).tolist(), [1, 2])
        self.assertEqual(select_synthetic([-20, -11, -2], math.inf).tolist(), [])
        rng = np.random.default_rng(2)
        pool = rng.normal(size=1000)
        self.assertEqual(select_synthetic(pool, 0.3).tolist(), [i for i, e in enumerate(pool) if e > 0.3])

    def test_sampling_epochs(self):
        """Test the sampling condition."""
        self.assertEqual(sampling_epochs(100, 10, 10), list(range(10, 101, 10)))
        self.assertEqual(sampling_epochs(7, 3, 2), [3, 5, 7])
        self.assertEqual(sampling_epochs(50, 5, 7), [5, 12, 19, 26, 33, 40, 47])

    def test_blend_degeneracies(self):
        """Test momentum m = 1 and m = 0."""
        rng = np.random.default_rng(3)
        previous, current = rng.normal(size=50), rng.normal(size=50)
        np.testing.assert_array_equal(blend_parameters(previous, current, 1.0), previous)
        np.testing.assert_array_equal(blend_parameters(previous, current, 0.0), current)
        np.testing.assert_allclose(blend_parameters(previous, current, 0.9), 0.9 * previous + 0.1 * current)

    def test_training_state_grows(self):
        """Test that selections only accumulate."""
        state = TrainingState(rng=np.random.default_rng(0))
        self.assertEqual(state.grow([1, 2]), 2)
        self.assertEqual(state.grow([2, 3]), 1)
        self.assertEqual(state.selected, {1, 2, 3})

    def test_decide(self):
        """Test the decision rule."""
        label, probability, e = decide([3.0, -1.0])
        self.assertEqual(label, 0)
        self.assertAlmostEqual(probability, 1 / (1 + math.exp(4)), places=12)
        self.assertAlmostEqual(e, energy([3.0, -1.0]), places=12)
        label, probability, _ = decide([0.0, 0.0])
        self.assertEqual(label, 0)
        self.assertEqual(probability, 0.5)

    def test_predict_matches_energy(self):
        """Test that predicted energies come from the same code path."""
        detector = build_detector((8, 8), (2, 2), seed=0)
        image = GrayImage(np.random.default_rng(0).uniform(size=(8, 8)))
        label, probability, e = predict(detector, image)
        logits = detector.logits(image.pixels)[0]
        self.assertAlmostEqual(e, energy(logits), delta=1e-12)
        self.assertEqual(label, int(logits[1] > logits[0]))

    def test_classifier_gradient_check(self):
        """Test autograd gradients of the combined loss against finite differences."""
        detector = build_detector((8, 8), (2, 2), seed=4)
        module = detector.module
        rng = np.random.default_rng(5)
        x = torch.from_numpy(rng.uniform(size=(4, 8, 8)))
        y = torch.tensor([0, 1, 0, 1])
        config = EasConfig()

        def loss():
            return total_loss(module(x), y, None, config)

        module.zero_grad()
        loss().backward()
        h = 1e-6
        for p in module.parameters():
            flat = p.data.view(-1)
            for k in range(min(2, flat.numel())):
                original = flat[k].item()
                with torch.no_grad():
                    flat[k] = original + h
                    up = loss().item()
                    flat[k] = original - h
                    down = loss().item()
                    flat[k] = original
                numeric = (up - down) / (2 * h)
                analytic = p.grad.view(-1)[k].item()
                self.assertLess(abs(numeric - analytic) / max(1e-4, abs(numeric) + abs(analytic)), 1e-5)

    def _toy(self, seed=0):
        rng = np.random.default_rng(seed)
        normal = np.clip(0.2 + 0.05 * rng.normal(size=(32, 8, 8)), 0, 1)
        abnormal = np.clip(0.8 + 0.05 * rng.normal(size=(8, 8, 8)), 0, 1)
        pool = np.clip(rng.uniform(0.3, 0.9, size=(16, 1, 1)) + 0.05 * rng.normal(size=(16, 8, 8)), 0, 1)
        return normal, abnormal, pool

    def test_eas_sampling_schedule(self):
        """Test tau updates, monotone selection and snapshots."""
        normal, abnormal, pool = self._toy()
        config = EasConfig(epochs=7, warmup=3, interval=2, batch_size=16)
        _, log, snapshots = eas_train(normal, abnormal, pool, config, seed=0, widths=(2, 2))
        self.assertEqual([s['epoch'] for s in snapshots], [3, 5, 7])
        self.assertTrue(math.isinf(log[0]['tau']) and math.isinf(log[1]['tau']))
        self.assertTrue(all(math.isfinite(r['tau']) for r in log[2:]))
        counts = [r['selected_count'] for r in log]
        self.assertEqual(counts, sorted(counts))
        self.assertEqual(counts[0], 0)

    def test_eas_without_sampling_is_baseline(self):
        """Test that a warm-up beyond the last epoch reduces to baseline training."""
        normal, abnormal, pool = self._toy(1)
        config = EasConfig(epochs=3, warmup=5, interval=1, batch_size=16)
        eas, log, snapshots = eas_train(normal, abnormal, pool, config, seed=3, widths=(2, 2))
        baseline, _, _ = train_detector(normal, abnormal, config, seed=3, widths=(2, 2))
        self.assertEqual(snapshots, [])
        self.assertTrue(all(r['selected_count'] == 0 for r in log))
        np.testing.assert_array_equal(eas.parameters, baseline.parameters)

    def test_eas_separates_energy(self):
        """Test that trained energies rank abnormals above normals."""
        normal, abnormal, pool = self._toy(2)
        config = EasConfig(epochs=40, warmup=5, interval=5, batch_size=16)
        detector, _, _ = eas_train(normal, abnormal, pool, config, seed=0, widths=(4, 4))
        e_normal = energy(detector.logits(normal))
        e_abnormal = energy(detector.logits(abnormal))
        self.assertLess(e_normal.mean(), e_abnormal.mean())
        samples = [ScoredSample(e, 0) for e in e_normal] + [ScoredSample(e, 1) for e in e_abnormal]
        self.assertGreater(auc(samples), 0.95)

    def test_eas_momentum_degeneracies(self):
        """Test that m = 1 keeps the pre-event parameters and m = 0 keeps the freshly trained ones."""
        normal, abnormal, pool = self._toy(4)
        for momentum in (1.0, 0.0):
            config = EasConfig(epochs=7, warmup=3, interval=2, batch_size=16, momentum=momentum)
            with mock.patch('detector.blend_parameters', wraps=blend_parameters) as blend:
                trained, _, _ = eas_train(normal, abnormal, pool, config, seed=0, widths=(2, 2))
            self.assertEqual(blend.call_count, 3)
            previous, current, used = blend.call_args_list[-1].args
            self.assertEqual(used, momentum)
            self.assertFalse(np.array_equal(previous, current))
            np.testing.assert_array_equal(trained.parameters, previous if momentum == 1.0 else current)

    def test_rebalance(self):
        """Test over- and undersampling."""
        rng = np.random.default_rng(0)
        normal, abnormal = np.zeros((20, 2, 2)), np.ones((3, 2, 2))
        n, a = rebalance(normal, abnormal, 'oversample', rng)
        self.assertEqual((len(n), len(a)), (20, 20))
        n, a = rebalance(normal, abnormal, 'undersample', rng)
        self.assertEqual((len(n), len(a)), (3, 3))
        with self.assertRaises(InvalidParameter):
            rebalance(normal, abnormal, 'smote', rng)


# ============================================================================
# PHANTOM
# ============================================================================

class TestPhantom(unittest.TestCase):
    """Test cases for the phantom generator."""

    def test_determinism(self):
        """Test byte-identical rendering for a seed."""
        a = generate_normal(0, 123)[0]
        b = generate_normal(0, 123)[0]
        np.testing.assert_array_equal(a.pixels, b.pixels)
        c = generate_abnormal_gt(1, PerturbationKind.DUPLICATION, 5)[0]
        d = generate_abnormal_gt(1, PerturbationKind.DUPLICATION, 5)[0]
        np.testing.assert_array_equal(c.pixels, d.pixels)

    def test_unknown_class(self):
        """Test unregistered ids."""
        with self.assertRaises(UnknownClass):
            generate_normal(99, 0)

    def test_templates_distinct(self):
        """Test that class templates differ in level and shape."""
        classes = registered_classes()
        self.assertGreaterEqual(len(classes), 4)
        for i in classes:
            for j in classes:
                if i < j:
                    a, b = band_profile(i).template, band_profile(j).template
                    self.assertGreater(np.mean(np.abs(a - b)), 0.1)
                    self.assertLess(np.corrcoef(a, b)[0, 1], 0.5)

    def test_column_profile_matches_template(self):
        """Test that a straight phantom shows its band template along the axis."""
        for class_id in range(4):
            image, _, _, spec = generate_normal(class_id, 40 + class_id, STRAIGHT)
            template = band_profile(class_id).template
            top = (64 - spec.length) / 2.0
            u, profile = column_profile(image, top, spec.length)
            expected = np.interp(u, np.linspace(0, 1, len(template)), template)
            self.assertGreater(np.corrcoef(profile, expected)[0, 1], 0.9)

    def test_mask_agrees_with_binarize(self):
        """Test the threshold convention against the ground-truth mask over many phantoms."""
        for seed in range(200):
            image, mask, _, _ = generate_normal(seed % 4, seed)
            disagreement = np.mean(binarize(image, 0.9).bits != mask.bits)
            self.assertLess(disagreement, 0.02, f"seed {seed}")
            self.assertEqual(np.count_nonzero(largest_component(mask).bits), np.count_nonzero(mask.bits))

    def test_same_class_consistency(self):
        """Test that phantoms of one class share their banding."""
        profiles = []
        for seed in (1, 2):
            image, _, _, spec = generate_normal(2, seed, STRAIGHT)
            top = (64 - spec.length) / 2.0
            u, profile = column_profile(image, top, spec.length)
            profiles.append(np.interp(np.linspace(0.05, 0.95, 50), u, profile))
        self.assertGreater(np.corrcoef(profiles[0], profiles[1])[0, 1], 0.8)

    def test_abnormal_deletion_length(self):
        """Test that deleting a fraction q shortens the chromosome by q."""
        image_n, _, _, spec = generate_normal(0, 77, STRAIGHT)
        image_ab, descriptor = generate_abnormal_gt(0, PerturbationKind.DELETION, 77, STRAIGHT, span=(0.25, 0.5))
        self.assertAlmostEqual(descriptor['fraction'], 0.25)
        self.assertAlmostEqual(descriptor['length'], spec.length * 0.75)
        shortening = (row_extent(largest_component(binarize(image_n, 0.9))) - row_extent(largest_component(binarize(image_ab, 0.9)))) / spec.length
        self.assertAlmostEqual(shortening, 0.25, delta=0.05 + 2.0 / spec.length)

    def test_abnormal_full_inversion(self):
        """Test that inverting the whole template reverses the profile."""
        image, descriptor = generate_abnormal_gt(3, PerturbationKind.INVERSION, 12, STRAIGHT, span=(0.0, 1.0))
        _, _, _, spec = generate_normal(3, 12, STRAIGHT)
        template = band_profile(3).template[::-1]
        top = (64 - spec.length) / 2.0
        u, profile = column_profile(image, top, spec.length)
        expected = np.interp(u, np.linspace(0, 1, len(template)), template)
        self.assertGreater(np.corrcoef(profile, expected)[0, 1], 0.9)

    def test_edit_template(self):
        """Test template edits."""
        t = np.arange(20, dtype=float)
        self.assertEqual(len(edit_template(t, PerturbationKind.DELETION, 2, 5)), 17)
        self.assertEqual(len(edit_template(t, PerturbationKind.DUPLICATION, 2, 5)), 23)
        np.testing.assert_array_equal(edit_template(t, PerturbationKind.INVERSION, 0, 20), t[::-1])
        with self.assertRaises(InvalidParameter):
            edit_template(t, PerturbationKind.TRANSLOCATION, 2, 5, donor=np.zeros(2))

    def test_build_dataset_counts(self):
        """Test split counts, ratio arithmetic and balanced operator kinds."""
        split = SplitConfig(train_normal=8, imbalance_ratio=2, val_normal=1, val_abnormal=1,
                            test_normal=2, test_abnormal=4)
        self.assertEqual(SplitConfig(train_normal=2000, imbalance_ratio=100).train_abnormal, 20)
        images = {}
        manifest = build_dataset([0, 1], split, PhantomConfig(), 7, images.__setitem__)
        counts = manifest.counts()
        self.assertEqual(counts['train/normal'], 16)
        self.assertEqual(counts['train/abnormal'], 8)
        self.assertEqual(counts['test/abnormal'], 8)
        self.assertEqual(len(images), len(manifest.samples))
        kinds = [s.op['kind'] for s in manifest.select(0, Label.ABNORMAL, Split.TEST)]
        self.assertEqual(sorted(kinds), sorted(k.value for k in PerturbationKind))
        again = build_dataset([0, 1], split, PhantomConfig(), 7)
        self.assertEqual(manifest.to_dict(), again.to_dict())


# ============================================================================
# METRICS
# ============================================================================

class TestMetrics(unittest.TestCase):
    """Test cases for classification, fidelity and distribution metrics."""

    def test_classification_example(self):
        """Test the hand-computed confusion example."""
        m = classification_metrics(Confusion(tp=7, fp=10, tn=90, fn=3))
        self.assertAlmostEqual(m['sen'], 0.7, places=12)
        self.assertAlmostEqual(m['spe'], 0.9, places=12)
        self.assertAlmostEqual(m['pre_ab'], 7 / 17, places=12)
        self.assertAlmostEqual(m['acc'], 97 / 110, places=12)
        self.assertAlmostEqual(m['f1'], 0.51852, places=5)
        self.assertAlmostEqual(m['pre_n'], 90 / 93, places=12)

    def test_classification_edge_cases(self):
        """Test perfect classifiers and undefined denominators."""
        perfect = classification_metrics(Confusion(tp=5, fp=0, tn=5, fn=0))
        self.assertTrue(all(v == 1.0 for v in perfect.values()))
        undefined = classification_metrics(Confusion(tp=0, fp=0, tn=5, fn=3))
        self.assertTrue(math.isnan(undefined['pre_ab']))
        self.assertEqual(classification_metrics(Confusion(tp=0, fp=2, tn=5, fn=3))['f1'], 0.0)
        self.assertEqual(confusion_from_labels([0, 1, 1, 0], [0, 1, 0, 1]), Confusion(tp=1, fp=1, tn=1, fn=1))

    def test_auc_examples(self):
        """Test AUC values and errors."""
        scores = lambda normals, abnormals: ([ScoredSample(s, 0) for s in normals]
                                             + [ScoredSample(s, 1) for s in abnormals])
        self.assertEqual(auc(scores([0.1, 0.2], [0.5, 0.9])), 1.0)
        self.assertEqual(auc(scores([0.3, 0.3], [0.3, 0.3])), 0.5)
        self.assertAlmostEqual(auc(scores([0.1, 0.4], [0.35, 0.8])), 0.75, places=12)
        with self.assertRaises(SingleClass):
            auc(scores([0.1, 0.2], []))

    def test_auc_oracle_and_monotone_invariance(self):
        """Test against pairwise counting and under a monotone transform."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            normals = np.round(rng.normal(size=int(rng.integers(1, 12))), 1)
            abnormals = np.round(rng.normal(0.5, size=int(rng.integers(1, 12))), 1)
            pairs = [(a > n) + 0.5 * (a == n) for a in abnormals for n in normals]
            samples = [ScoredSample(s, 0) for s in normals] + [ScoredSample(s, 1) for s in abnormals]
            value = auc(samples)
            self.assertAlmostEqual(value, float(np.mean(pairs)), places=12)
            transformed = [ScoredSample(math.exp(3 * s.score), s.label) for s in samples]
            self.assertAlmostEqual(auc(transformed), value, places=12)

    def test_psnr(self):
        """Test PSNR values."""
        a = GrayImage(np.zeros((4, 4)))
        self.assertEqual(psnr(a, a), float('inf'))
        self.assertAlmostEqual(psnr(a, GrayImage(np.ones((4, 4)))), 0.0, places=12)
        self.assertAlmostEqual(psnr(a, GrayImage(np.full((4, 4), 1 / 255))), 10 * math.log10(255 ** 2), places=9)
        self.assertAlmostEqual(psnr(a, GrayImage(np.full((4, 4), 1 / 255))), 48.131, places=3)
        self.assertGreater(psnr(a, GrayImage(np.full((4, 4), 0.1))), psnr(a, GrayImage(np.full((4, 4), 0.2))))
        with self.assertRaises(ShapeMismatch):
            psnr(a, GrayImage(np.zeros((4, 5))))

    def test_ssim(self):
        """Test SSIM values and errors."""
        rng = np.random.default_rng(1)
        a = GrayImage(rng.uniform(size=(16, 16)))
        b = GrayImage(rng.uniform(size=(16, 16)))
        self.assertAlmostEqual(ssim(a, a), 1.0, places=12)
        self.assertAlmostEqual(ssim(a, b), ssim(b, a), places=12)
        constant = ssim(GrayImage(np.zeros((16, 16))), GrayImage(np.ones((16, 16))))
        self.assertAlmostEqual(constant, 1e-4 / (1 + 1e-4), places=10)
        with self.assertRaises(TooSmall):
            ssim(GrayImage(np.zeros((10, 10))), GrayImage(np.zeros((10, 10))))

    def test_mmd_examples(self):
        """Test the unbiased MMD estimator."""
        self.assertAlmostEqual(mmd_kid([[0.0], [0.0]], [[1.0], [1.0]]), 7.0, places=12)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(10, 3))
        self.assertAlmostEqual(mmd_kid(x, x + 10.0), mmd_kid(x + 10.0, x), places=9)
        self.assertGreater(mmd_kid(x, x + 10.0), mmd_kid(x, x.copy()))
        with self.assertRaises(TooFewSamples):
            mmd_kid(x[:1], x)

    def test_mmd_identical_sets(self):
        """Test that identical sets give a near-zero estimate."""
        x = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
        # with X = Y the off-diagonal means match and the cross term includes the diagonal
        kxx = (np.dot(x, x.T) / 2 + 1) ** 3
        expected = 2 * (kxx.sum() - np.trace(kxx)) / 6 - 2 * kxx.mean()
        self.assertAlmostEqual(mmd_kid(x, x), expected, places=12)

    def test_mmd_oracle(self):
        """Test against a brute-force double sum."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            x, y = rng.normal(size=(10, 4)), rng.normal(0.3, size=(10, 4))
            k = lambda a, b: (np.dot(a, b) / 4 + 1) ** 3
            xx = sum(k(x[i], x[j]) for i in range(10) for j in range(10) if i != j) / 90
            yy = sum(k(y[i], y[j]) for i in range(10) for j in range(10) if i != j) / 90
            xy = sum(k(x[i], y[j]) for i in range(10) for j in range(10)) / 100
            self.assertAlmostEqual(mmd_kid(x, y), xx + yy - 2 * xy, delta=1e-12 * max(1.0, abs(xx)))

    def test_kid_features_and_aggregate(self):
        """Test pooled features and NaN-aware aggregation."""
        features = kid_features([GrayImage(np.ones((8, 8))), GrayImage(np.zeros((8, 8)))])
        self.assertEqual(features.shape, (2, 4))
        rows = [{'f1': 0.5}, {'f1': 0.7}, {'f1': float('nan')}]
        self.assertAlmostEqual(aggregate(rows, ['f1'])['f1']['mean'], 0.6, places=12)


# ============================================================================
# PERSISTENCE AND CONFIGURATION
# ============================================================================

class TestDatabase(unittest.TestCase):
    """Test cases for artifact storage."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        """Clean up test fixtures."""
        self.temp_dir.cleanup()

    def test_pgm_round_trip(self):
        """Test 8-bit PGM storage."""
        pixels = np.arange(64).reshape(8, 8) / 255.0
        write_pgm(self.root / 'a.pgm', GrayImage(pixels))
        self.assertTrue((self.root / 'a.pgm').read_bytes().startswith(b'P5'))
        np.testing.assert_allclose(read_pgm(self.root / 'a.pgm').pixels, pixels, atol=1e-12)
        with self.assertRaises(MissingArtifact):
            read_pgm(self.root / 'missing.pgm')

    def test_checkpoint_round_trip(self):
        """Test the checkpoint container."""
        detector = build_detector((8, 8), (2, 2), seed=0)
        path = save_checkpoint(self.root / 'd.ckpt', 'detector', detector.architecture, detector.module)
        header, vector = load_checkpoint(path)
        self.assertEqual(header['format_version'], 1)
        self.assertEqual(header['architecture'], detector.architecture)
        np.testing.assert_array_equal(vector, detector.parameters)
        (self.root / 'bad.ckpt').write_bytes(b'NOTACKPT' + bytes(16))
        with self.assertRaises(ValidationError):
            load_checkpoint(self.root / 'bad.ckpt')

    def test_manifest_round_trip(self):
        """Test manifest persistence."""
        database = DatasetDatabase(self.root)
        split = SplitConfig(train_normal=2, imbalance_ratio=2, val_normal=1, val_abnormal=1,
                            test_normal=1, test_abnormal=1)
        manifest = build_dataset([0], split, PhantomConfig(), 1, database.save_image, database.save_mask)
        database.save_manifest(manifest)
        loaded = database.get_manifest()
        self.assertEqual(loaded.to_dict(), manifest.to_dict())
        self.assertEqual(database.load_image(loaded.samples[0]).shape, (64, 64))
        with self.assertRaises(MissingArtifact):
            DatasetDatabase(self.root / 'other').get_manifest()

    def test_pool_missing(self):
        """Test that a missing pool is reported."""
        pool = PoolDatabase(self.root, 'syn')
        self.assertFalse(pool.exists())
        with self.assertRaises(MissingArtifact):
            pool.get_entries()


class TestConfig(unittest.TestCase):
    """Test cases for run configuration."""

    def test_defaults_validate(self):
        """Test that the defaults are consistent."""
        run = run_config_from_dict({'seed': 1})
        self.assertEqual(run.classes, [0, 1, 2, 3])
        self.assertEqual(run.split.train_abnormal, 20)

    def test_rejections(self):
        """Test invalid documents."""
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({})
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({'seed': 1, 'colour': 'red'})
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({'seed': 1, 'eas': {'margin_normal': -5, 'margin_abnormal': -27}})
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({'seed': 1, 'eas': {'epochs': 5, 'warmup': 6}})
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({'seed': 1, 'arms': ['focal']})
        with self.assertRaises(ConfigInvalid):
            run_config_from_dict({'seed': 1, 'schedule': {'lam': 0}})

    def test_seed_override_and_tuples(self):
        """Test the seed override and list-to-tuple conversion."""
        run = run_config_from_dict({'seed': 1, 'phantom': {'canvas': [64, 64]}}, seed=9)
        self.assertEqual(run.seed, 9)
        self.assertEqual(run.phantom.canvas, (64, 64))


class TestUtils(unittest.TestCase):
    """Test cases for utility functions."""

    def test_derive_seed(self):
        """Test seed derivation."""
        self.assertEqual(derive_seed(1, 2, 3), derive_seed(1, 2, 3))
        self.assertNotEqual(derive_seed(1, 2, 3), derive_seed(1, 2, 4))

    def test_format_metric(self):
        """Test metric formatting."""
        self.assertEqual(format_metric(float('nan')), 'nan')
        self.assertEqual(format_metric(float('inf')), 'inf')
        self.assertEqual(format_metric(0.5), '0.5000')
        self.assertEqual(format_metric(3), '3')

    def test_application_info(self):
        """Test application information."""
        self.assertEqual(get_application_info()['name'], 'karyosim')

    def test_svg(self):
        """Test that figures are well-formed SVG documents."""
        svg = histogram_svg({'normal': [-30, -28], 'abnormal': [-3, -1], 'empty': []}, 'Energy <test>')
        self.assertTrue(svg.startswith('<svg'))
        self.assertIn('&lt;test&gt;', svg)
        self.assertIn('<rect', roc_svg(np.array([[0, 0], [0.5, 0.8], [1, 1]]), 'ROC'))


# ============================================================================
# PIPELINE / CLI
# ============================================================================

TINY = {
    'seed': 3,
    'classes': [0, 1],
    'split': {'train_normal': 12, 'imbalance_ratio': 4, 'val_normal': 1, 'val_abnormal': 1,
              'test_normal': 4, 'test_abnormal': 4},
    'perturb': {'per_class': 4},
    'schedule': {'steps': 5},
    'restore': {'iterations': 2, 'batch_size': 2, 'train_pairs': 3, 'holdout_pairs': 2},
    'eas': {'epochs': 3, 'warmup': 1, 'interval': 1, 'batch_size': 8},
    'detector': {'widths': [2, 4]},
}


class TestPipeline(unittest.TestCase):
    """Test cases for the staged command-line pipeline."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.runner = CliRunner()

    def tearDown(self):
        """Clean up test fixtures."""
        self.temp_dir.cleanup()

    def write_config(self, **overrides):
        document = json.loads(json.dumps(TINY))
        document['workdir'] = str(self.root / 'work')
        document.update(overrides)
        path = self.root / 'config.json'
        path.write_text(json.dumps(document), encoding='utf-8')
        return str(path)

    def invoke(self, *args):
        return self.runner.invoke(cli, list(args))

    def test_validation_exit_code(self):
        """Test that an invalid configuration exits with 1."""
        config = self.write_config(eas={'margin_normal': 0, 'margin_abnormal': -1})
        self.assertEqual(self.invoke('phantom-gen', '--config', config).exit_code, 1)
        self.assertEqual(self.invoke('phantom-gen', '--config', str(self.root / 'none.json')).exit_code, 1)

    def test_missing_artifact_exit_code(self):
        """Test that a missing pool exits with 2 and an unknown arm with 1."""
        config = self.write_config()
        self.assertEqual(self.invoke('phantom-gen', '--config', config).exit_code, 0)
        self.assertEqual(self.invoke('detect-train', '--config', config, '--arm', 'syn').exit_code, 2)
        self.assertEqual(self.invoke('detect-train', '--config', config, '--arm', 'focal').exit_code, 1)

    def test_phantom_gen_deterministic(self):
        """Test manifest counts, ratio and byte-identical reruns."""
        config = self.write_config()
        result = self.invoke('phantom-gen', '--config', config)
        self.assertEqual(result.exit_code, 0, result.output)
        manifest_file = self.root / 'work' / 'dataset' / 'manifest.json'
        first = manifest_file.read_bytes()
        manifest = DatasetManifest.from_dict(json.loads(first))
        self.assertEqual(len(manifest.select(0, Label.NORMAL, Split.TRAIN)), 12)
        self.assertEqual(len(manifest.select(0, Label.ABNORMAL, Split.TRAIN)), 3)
        self.assertEqual(self.invoke('phantom-gen', '--config', config).exit_code, 0)
        self.assertEqual(manifest_file.read_bytes(), first)

    def test_training_pairs_never_perturb(self):
        """Test that restoration pairs come from unperturbed rearrangements."""
        config = self.write_config()
        self.assertEqual(self.invoke('phantom-gen', '--config', config).exit_code, 0)
        run = load_run_config(config)
        with mock.patch('perturb.apply_perturbation', side_effect=AssertionError('perturbed')):
            train, holdout, descriptors = build_pairs(run, DatasetDatabase(run.root))
        self.assertGreater(len(train), 0)
        self.assertEqual(len(train) + len(holdout), len(descriptors))

    def test_reruns_byte_identical(self):
        """Test that every stage writes identical artifacts for the same config and seed."""
        stages = [
            ('phantom-gen',), ('perturb',), ('restore-train',), ('restore-run',),
            ('detect-train', '--arm', 'syn_star_eas'), ('evaluate', '--arm', 'syn_star_eas'),
        ]
        trees = []
        for name in ('first', 'second'):
            config = self.write_config(workdir=str(self.root / name))
            for stage in stages:
                result = self.invoke(stage[0], '--config', config, *stage[1:])
                self.assertEqual(result.exit_code, 0, f"{stage[0]}: {result.output}")
            base = self.root / name
            trees.append({p.relative_to(base).as_posix(): p.read_bytes() for p in base.rglob('*') if p.is_file()})
        first, second = trees
        for key in ('dataset/manifest.json', 'pools/syn/pool.json', 'restore/denoiser.ckpt',
                    'pools/syn_star/pool.json', 'detectors/syn_star_eas/class_0/detector.ckpt',
                    'reports/syn_star_eas/metrics.csv', 'reports/syn_star_eas/predictions.csv'):
            self.assertIn(key, first)
        self.assertEqual(sorted(first), sorted(second))
        for key in sorted(first):
            self.assertEqual(first[key], second[key], key)

    def test_full_pipeline(self):
        """Test every stage end to end, determinism of training and the metrics report."""
        config = self.write_config()
        work = self.root / 'work'
        for stage in ('phantom-gen', 'perturb', 'restore-train', 'restore-run'):
            result = self.invoke(stage, '--config', config)
            self.assertEqual(result.exit_code, 0, f"{stage}: {result.output}")

        pool = json.loads((work / 'pools' / 'syn' / 'pool.json').read_text())
        self.assertTrue(all(e['record']['source_mac'] > 85 for e in pool['entries']))
        for class_id in (0, 1):
            kinds = [e['record']['op']['kind'] for e in pool['entries'] if e['class'] == class_id]
            counts = [kinds.count(k.value) for k in PerturbationKind]
            self.assertLessEqual(max(counts) - min(counts), 1)
        restore_loss = [float(r['loss']) for r in read_rows(work / 'restore' / 'loss.csv')]
        self.assertTrue(all(math.isfinite(v) for v in restore_loss))
        self.assertTrue((work / 'pools' / 'syn_star' / 'pool.json').exists())

        for arm in ('baseline', 'syn_star_eas'):
            result = self.invoke('detect-train', '--config', config, '--arm', arm)
            self.assertEqual(result.exit_code, 0, result.output)
        checkpoint = work / 'detectors' / 'baseline' / 'class_0' / 'detector.ckpt'
        first = checkpoint.read_bytes()
        self.assertEqual(self.invoke('detect-train', '--config', config, '--arm', 'baseline',
                                     '--class', '0').exit_code, 0)
        self.assertEqual(checkpoint.read_bytes(), first)

        baseline_log = read_rows(work / 'detectors' / 'baseline' / 'class_0' / 'log.csv')
        self.assertTrue(all(r['selected_count'] == '0' for r in baseline_log))
        eas_log = read_rows(work / 'detectors' / 'syn_star_eas' / 'class_0' / 'log.csv')
        self.assertEqual(len(eas_log), 3)
        self.assertTrue(all(r['tau'] != 'inf' for r in eas_log))

        result = self.invoke('evaluate', '--config', config, '--arm', 'syn_star_eas')
        self.assertEqual(result.exit_code, 0, result.output)
        report = work / 'reports' / 'syn_star_eas'
        rows = read_rows(report / 'metrics.csv')
        per_class = [r for r in rows if r['class'] not in ('mean', 'std')]
        self.assertEqual(len(per_class), 2)
        predictions = read_rows(report / 'predictions.csv')
        for row in per_class:
            mine = [p for p in predictions if p['class'] == row['class']]
            conf = confusion_from_labels([int(p['label']) for p in mine], [int(p['predicted']) for p in mine])
            recomputed = classification_metrics(conf)
            for key in ('acc', 'sen', 'spe'):
                self.assertAlmostEqual(float(row[key]), recomputed[key], delta=1e-9)
        mean_row = [r for r in rows if r['class'] == 'mean'][0]
        self.assertAlmostEqual(float(mean_row['acc']), np.mean([float(r['acc']) for r in per_class]), delta=1e-9)
        self.assertTrue((report / 'energy_class_0.svg').exists())


@unittest.skipUnless(SLOW, "set KARYOSIM_SLOW_TESTS=1 to run desk-scale experiments")
class TestDeskScale(unittest.TestCase):
    """Desk-scale training checks."""

    def test_denoiser_loss_drops(self):
        """Test that denoiser training materially reduces the loss on phantom pairs."""
        pairs = []
        for seed in range(64):
            image, _, _, _ = generate_normal(seed % 4, seed, STRAIGHT)
            try:
                stacked, _ = rearrange(image, seed)
            except KarySimError:
                continue
            pairs.append(TrainingPair(image, fit_to_canvas(stacked, image.shape)))
        schedule = schedule_new(100, 10 / 255, 2 / 255)
        config = TrainingConfig(iterations=2000, batch_size=8, learning_rate=1e-3, optimizer='adam', log_every=0)
        denoiser = train_denoiser(pairs, schedule, config, seed=0)
        losses = [v for _, v in denoiser.loss_trace]
        self.assertLess(np.mean(losses[-200:]), 0.7 * np.mean(losses[:200]))

    def test_restoration_lift(self):
        """Test that restored held-out pairs beat the rearranged images in PSNR and SSIM."""
        with tempfile.TemporaryDirectory() as workdir:
            run = run_config_from_dict({
                'seed': 0,
                'workdir': workdir,
                'classes': [0, 1],
                'phantom': {'straight_fraction': 1.0},
                'split': {'train_normal': 140, 'imbalance_ratio': 10, 'val_normal': 1, 'val_abnormal': 1,
                          'test_normal': 2, 'test_abnormal': 2},
                'perturb': {'per_class': 4},
                'restore': {'iterations': 5000, 'train_pairs': 200, 'holdout_pairs': 50},
            })
            cmd_phantom_gen(run)
            cmd_perturb(run)
            cmd_restore_train(run)
            summary = cmd_restore_run(run)
        self.assertGreaterEqual(summary['holdout'], 50)
        self.assertGreaterEqual(summary['psnr_restored'], summary['psnr_rearranged'] + 1.0)
        self.assertGreaterEqual(summary['ssim_improved_fraction'], 0.7)


def run_tests():
    """Run all tests."""
    test_suite = unittest.TestSuite()

    test_classes = [
        TestImaging,
        TestPerturb,
        TestDiffusion,
        TestDetector,
        TestPhantom,
        TestMetrics,
        TestDatabase,
        TestConfig,
        TestUtils,
        TestPipeline,
        TestDeskScale,
    ]

    for test_class in test_classes:
        tests = unittest.TestLoader().loadTestsFromTestCase(test_class)
        test_suite.addTests(tests)

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(test_suite)

    return result.wasSuccessful()


if __name__ == '__main__':
    success = run_tests()
    sys.exit(0 if success else 1)
