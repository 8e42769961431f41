import numpy as np
import testtools
import torch
from torch.nn import functional as F

from structmark import augment
from structmark import dataset
from structmark import exceptions
from structmark import images
from structmark import structure
from structmark.tests import base


def mask_tensor(img):
    return torch.from_numpy(
        structure.extract(img).mask.astype(np.float32))[None]


def structure_iou(op, img):
    """IoU between the structure of the moved image and the moved mask,
    over the pixels the moved frame still covers."""
    frame = torch.ones((1,) + img.shape[:2])
    moved, _, (moved_mask, moved_frame) = augment.apply(
        op, img.to_tensor(), masks=[mask_tensor(img), frame])
    recomputed = structure.extract(images.Image.from_tensor(moved)).mask
    # One pixel in from any exposed corner
    inside = -F.max_pool2d(-moved_frame[None], 3, stride=1, padding=1)
    inside = inside[0, 0].numpy() > 0.5
    return structure.iou(recomputed[inside],
                         moved_mask[0].numpy()[inside])


class OperatorTestCase(base.StructmarkTestCase):
    def test_flip_and_quarter_turns_commute_exactly(self):
        img = base.random_image(3, 24)
        for op in (augment.FlipH(), augment.FlipV(), augment.Rotate(90),
                   augment.Rotate(-90)):
            self.assertEqual(1.0, structure_iou(op, img), op)

    def test_general_rotation_keeps_structure(self):
        scenes = dataset.generate_clean_images(12, size=64, seed=21)
        values = [structure_iou(augment.Rotate(angle), img)
                  for img in scenes for angle in (-60.0, -30.0, 15.0, 45.0)]
        self.assertGreaterEqual(float(np.mean(values)), 0.7)

    def test_resize_keeps_structure(self):
        scenes = dataset.generate_clean_images(12, size=64, seed=21)
        values = [structure_iou(augment.Resize(scale=scale), img)
                  for img in scenes for scale in (0.5, 0.75, 1.5, 2.0)]
        self.assertGreaterEqual(float(np.mean(values)), 0.7)

    def test_crop_commutes_away_from_borders(self):
        self.set_flags(SOBEL_THRESHOLD=40.0)
        for img in dataset.generate_clean_images(5, size=64, seed=4):
            op = augment.Crop(40, 7, 13)
            moved, _, (moved_mask,) = augment.apply(
                op, img.to_tensor(), masks=[mask_tensor(img)])
            recomputed = structure.extract(
                images.Image.from_tensor(moved)).mask
            self.assertTrue(np.array_equal(
                recomputed[1:-1, 1:-1],
                moved_mask[0].numpy().astype(np.uint8)[1:-1, 1:-1]))

    def test_masks_stay_binary(self):
        img = base.square_image(64)
        for op in (augment.Rotate(17), augment.Resize(scale=1.3)):
            _, _, (m,) = augment.apply(op, img.to_tensor(),
                                       masks=[mask_tensor(img)])
            self.assertTrue(bool(((m == 0) | (m == 1)).all()))

    def test_output_size(self):
        img = torch.zeros((3, 40, 60))
        for op in (augment.Rotate(90), augment.Crop(32),
                   augment.Resize(scale=0.5), augment.Resize(size=20),
                   augment.Blur(1.0)):
            out = op.image(img)
            self.assertEqual(op.output_size(40, 60), tuple(out.shape[-2:]))

    def test_crop(self):
        img = torch.arange(16.0).view(1, 4, 4)
        out = augment.Crop(2).image(img)
        self.assertTrue(torch.equal(torch.tensor([[[5.0, 6.0], [9.0, 10.0]]]),
                                    out))
        out = augment.Crop(2, 0, 2).image(img)
        self.assertEqual(2.0, float(out[0, 0, 0]))

    def test_crop_too_large(self):
        with testtools.ExpectedException(exceptions.CropTooLarge):
            augment.Crop(5).image(torch.zeros((3, 4, 4)))
        with testtools.ExpectedException(exceptions.CropTooLarge):
            augment.Crop(2, 3, 0).image(torch.zeros((3, 4, 4)))

    def test_bad_parameters(self):
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.Rotate(91)
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.Resize(scale=3.0)
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.Resize(scale=1.0, size=10)
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.Resize()

    def test_crop_range(self):
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.Crop(augment.MAX_CROP + 1)
        for crop_range in ((32, 128), (64, 300), (128, 64)):
            with testtools.ExpectedException(exceptions.AugmentException):
                augment.AugmentPolicy(['crop'], crop_range=crop_range)
        policy = augment.AugmentPolicy(['crop'], crop_range=(64, 256))
        self.assertEqual((64, 256), policy.crop_range)

    def test_photometric_leaves_masks(self):
        img = base.random_image(1, 16)
        mask = mask_tensor(img)
        for op in (augment.Noise(5.0, seed=1), augment.Blur(1.0),
                   augment.Hue(10.0), augment.Saturation(1.2),
                   augment.Contrast(0.8)):
            out, _, (m,) = augment.apply(op, img.to_tensor(), masks=[mask])
            self.assertFalse(op.geometric)
            self.assertTrue(torch.equal(mask, m))
            self.assertTrue(float(out.min()) >= 0.0)
            self.assertTrue(float(out.max()) <= 255.0)

    def test_noise_is_seeded(self):
        x = torch.full((3, 8, 8), 100.0)
        self.assertTrue(torch.equal(augment.Noise(5.0, 3).image(x),
                                    augment.Noise(5.0, 3).image(x)))
        self.assertFalse(torch.equal(augment.Noise(5.0, 3).image(x),
                                     augment.Noise(5.0, 4).image(x)))

    def test_companions_follow(self):
        a = base.random_image(1, 16).to_tensor()
        out, (companion,), _ = augment.apply(augment.FlipH(), a, [a.clone()])
        self.assertTrue(torch.equal(out, companion))

    def test_companion_mismatch(self):
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.apply(augment.FlipH(), torch.zeros((3, 4, 4)),
                          [torch.zeros((3, 5, 5))])

    def test_batched_tensors(self):
        x = torch.rand((2, 3, 16, 16)) * 255.0
        out = augment.Rotate(12).image(x)
        self.assertEqual((2, 3, 16, 16), tuple(out.shape))

    def test_eq_and_json(self):
        self.assertEqual(augment.Rotate(10), augment.Rotate(10))
        self.assertNotEqual(augment.Rotate(10), augment.Rotate(11))
        self.assertEqual(augment.Crop(8, 1, 2),
                         augment.from_json(augment.Crop(8, 1, 2).json_dump()))
        with testtools.ExpectedException(NotImplementedError):
            self.assertEqual(augment.Rotate(10), 42)
        with testtools.ExpectedException(exceptions.UnknownAugmentation):
            augment.from_json({'kind': 'banana'})

    def test_is_identity(self):
        self.assertTrue(augment.is_identity([augment.Identity()]))
        self.assertFalse(augment.is_identity([augment.Identity(),
                                              augment.FlipH()]))


class PolicyTestCase(base.StructmarkTestCase):
    def test_aliases_and_unknown(self):
        policy = augment.AugmentPolicy(['rotation', 'rotate', 'cropping'])
        self.assertEqual(['rotate', 'crop'], policy.kinds)
        self.assertTrue(policy.harmless_only)
        self.assertFalse(augment.AugmentPolicy(['noise']).harmless_only)
        with testtools.ExpectedException(exceptions.UnknownAugmentation):
            augment.AugmentPolicy(['banana'])
        with testtools.ExpectedException(exceptions.AugmentException):
            augment.AugmentPolicy(['flip'], mode='banana')

    def test_empty_policy_is_identity(self):
        self.assertEqual([augment.Identity()],
                         augment.sample_policy(augment.AugmentPolicy(), 0))

    def test_sampling_is_seeded(self):
        policy = augment.harmless_policy(augment.MODE_UPTO)
        self.assertEqual(augment.sample_policy(policy, 7),
                         augment.sample_policy(policy, 7))

    def test_mode_one(self):
        policy = augment.harmless_policy(augment.MODE_ONE)
        rng = np.random.default_rng(0)
        for _ in range(20):
            self.assertEqual(1, len(augment.sample_policy(policy, rng)))

    def test_family_frequencies(self):
        policy = augment.harmless_policy(augment.MODE_ONE)
        rng = np.random.default_rng(5)
        counts = dict((family, 0) for family in augment.QUALITY_HARMLESS)
        draws = 10000
        for _ in range(draws):
            op, = augment.sample_policy(policy, rng)
            counts[augment.FAMILY_ALIASES.get(op.kind(), 'flip')] += 1
        for family, count in counts.items():
            self.assertAlmostEqual(0.25, count / float(draws), delta=0.02,
                                   msg=family)

    def test_mode_upto(self):
        policy = augment.harmless_policy(augment.MODE_UPTO, max_ops=2)
        rng = np.random.default_rng(0)
        lengths = set(len(augment.sample_policy(policy, rng))
                      for _ in range(50))
        self.assertEqual({1, 2}, lengths)

    def test_mode_all(self):
        policy = augment.harmless_policy(augment.MODE_ALL)
        ops = augment.sample_policy(policy, 0)
        kinds = set(augment.FAMILY_ALIASES.get(op.kind(), 'flip')
                    for op in ops)
        self.assertEqual(set(augment.QUALITY_HARMLESS), kinds)

    def test_sampled_ops_apply(self):
        policy = augment.harmless_policy(augment.MODE_ALL)
        rng = np.random.default_rng(3)
        img = dataset.generate_clean_images(1, 128, seed=1)[0].to_tensor()
        for _ in range(5):
            ops = augment.sample_policy(policy, rng, (128, 128))
            out, _, _ = augment.apply_all(ops, img)
            self.assertTrue(min(out.shape[-2:]) >= 32)

    def test_attacker_policy(self):
        policy = augment.attacker_policy()
        ops = augment.sample_policy(policy, 0, (128, 128))
        self.assertEqual(['rotate', 'crop', 'resize'],
                         [op.kind() for op in ops])
        out, _, _ = augment.apply_all(ops, torch.zeros((3, 128, 128)))
        self.assertEqual((64, 64), tuple(out.shape[-2:]))
