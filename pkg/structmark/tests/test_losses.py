import mock
import numpy as np
import testtools
import torch
import torch.nn.functional as F

from structmark import exceptions
from structmark import losses
from structmark import structure
from structmark.tests import base


class WeightsTestCase(base.StructmarkTestCase):
    def test_defaults(self):
        w = losses.TrainWeights()
        self.assertEqual(1.0, w.lam)
        self.assertEqual(0.0, w.lambda2)
        self.assertEqual(0.0002, w.lr_main)

    def test_adversarial_phase(self):
        w = losses.TrainWeights(lambda5=3.0, lambda3=2.0).adversarial_phase()
        self.assertEqual(10.0, w.lam)
        self.assertEqual(0.01, w.lambda2)
        self.assertEqual(3.0, w.lambda5)
        self.assertEqual(2.0, w.lambda3)

    def test_negative_refused(self):
        with testtools.ExpectedException(exceptions.TrainingException):
            losses.TrainWeights(lambda1=-1.0)

    def test_json(self):
        self.assertIn('lambda', losses.TrainWeights().json_dump())


class EmbedLossTestCase(base.StructmarkTestCase):
    def test_mse_only_without_discriminator(self):
        w = losses.TrainWeights()
        cover = torch.zeros((1, 3, 4, 4))
        marked = torch.full((1, 3, 4, 4), 2.0)
        self.assertAlmostEqual(4.0, float(losses.loss_embed(
            cover, marked, None, w)))

    def test_adversarial_term(self):
        w = losses.TrainWeights(lambda2=0.5)
        cover = torch.zeros((1, 3, 4, 4))
        scores = torch.zeros((1, 1, 2, 2))
        # -log(sigmoid(0)) = log 2
        self.assertAlmostEqual(0.5 * np.log(2.0), float(losses.loss_embed(
            cover, cover, scores, w)), places=6)

    def test_generator_term_is_softplus(self):
        s = torch.tensor([[-2.0, 0.5], [3.0, 1.0]])
        self.assertAlmostEqual(float(F.softplus(-s).mean()),
                               float(losses.generator_term(s)), places=6)

    def test_discriminator_loss(self):
        real = torch.full((2, 1, 3, 3), 10.0)
        fake = torch.full((2, 1, 3, 3), -10.0)
        self.assertTrue(float(losses.discriminator_loss(real, fake)) < 1e-3)
        self.assertTrue(float(losses.discriminator_loss(fake, real)) > 5.0)

    def test_shape_mismatch(self):
        with testtools.ExpectedException(exceptions.DimensionMismatch):
            losses.loss_embed(torch.zeros((1, 3, 4, 4)),
                              torch.zeros((1, 3, 5, 5)), None,
                              losses.TrainWeights())


class ExtractLossTestCase(base.StructmarkTestCase):
    def setUp(self):
        super(ExtractLossTestCase, self).setUp()
        self.mask = torch.zeros((1, 1, 2, 2))
        self.mask[0, 0, 0, 0] = 1.0
        self.target = torch.full((1, 3, 2, 2), 255.0)
        self.target[0, :, 0, 0] = 20.0

    def test_perfect_extraction_is_zero(self):
        w = losses.TrainWeights(lambda5=3.0)
        self.assertEqual(0.0, float(losses.loss_extract(
            self.target, self.target, self.mask, True, w)))

    def test_terms_by_hand(self):
        extracted = self.target.clone()
        extracted[0, :, 0, 0] = 30.0
        extracted[0, :, 1, 1] = 245.0
        terms = losses.extract_terms(extracted, self.target, self.mask, True,
                                     losses.TrainWeights())
        # Means over all 12 values of the masked squared errors
        self.assertAlmostEqual(3 * 100.0 / 12, float(terms['foreground']))
        self.assertAlmostEqual(3 * 100.0 / 12, float(terms['background']))

        w = losses.TrainWeights(lambda3=2.0, lambda5=3.0)
        self.assertAlmostEqual(2.0 * (3.0 * 25.0 + 25.0), float(
            losses.loss_extract(extracted, self.target, self.mask, True, w)))

    def test_clean_branch(self):
        w = losses.TrainWeights(lambda4=2.0)
        extracted = torch.full((1, 3, 2, 2), 250.0)
        self.assertAlmostEqual(50.0, float(losses.loss_extract(
            extracted, None, None, False, w)))

    def test_mask_mismatch(self):
        with testtools.ExpectedException(exceptions.MaskMismatch):
            losses.loss_extract(self.target, self.target,
                                torch.zeros((1, 1, 3, 3)), True,
                                losses.TrainWeights())

    def test_total(self):
        w = losses.TrainWeights(lam=10.0)
        total = losses.loss_total(torch.tensor(1.0), torch.tensor(2.0),
                                  torch.tensor(3.0), w)
        self.assertEqual(51.0, float(total))


class Lambda5TestCase(base.StructmarkTestCase):
    def test_balances_area(self):
        a = np.zeros((4, 4))
        a[0, :2] = 1
        b = np.zeros((4, 4))
        b[1, :2] = 1
        masks = [structure.StructureMask(m, structure.SOURCE_SOBEL)
                 for m in (a, b)]
        lambda5 = losses.compute_lambda5(masks)
        self.assertAlmostEqual(28.0 / 4.0, lambda5)
        # The weighted foreground total equals the background total
        self.assertAlmostEqual(lambda5 * 4, 28.0)

    def test_accepts_tensors(self):
        mask = torch.zeros((2, 1, 4, 4))
        mask[:, :, 0, 0] = 1.0
        self.assertAlmostEqual(15.0, losses.compute_lambda5(mask))

    def test_no_foreground(self):
        with testtools.ExpectedException(exceptions.EmptyMaskSet):
            losses.compute_lambda5([np.zeros((4, 4))])
        with testtools.ExpectedException(exceptions.EmptyMaskSet):
            losses.compute_lambda5([])

    @mock.patch('structmark.losses.LOG')
    def test_all_foreground(self, mock_log):
        self.assertEqual(0.0, losses.compute_lambda5([np.ones((4, 4))]))
        mock_log.warning.assert_called()


class SurrogateLossTestCase(base.StructmarkTestCase):
    def test_pixel_terms_on_unit_scale(self):
        out = torch.full((1, 3, 2, 2), 255.0)
        target = torch.zeros((1, 3, 2, 2))
        self.assertAlmostEqual(1.0, float(losses.surrogate_loss(
            out, target, [losses.LOSS_L1])))
        self.assertAlmostEqual(2.0, float(losses.surrogate_loss(
            out, target, [losses.LOSS_L1, losses.LOSS_L2])))

    def test_perceptual_needs_network(self):
        with testtools.ExpectedException(
                exceptions.FeatureNetworkUnavailable):
            losses.surrogate_loss(torch.zeros((1, 3, 2, 2)),
                                  torch.zeros((1, 3, 2, 2)),
                                  [losses.LOSS_PERC])

    def test_perceptual_with_stand_in_features(self):
        features = torch.nn.AvgPool2d(2)
        out = torch.full((1, 3, 2, 2), 4.0)
        target = torch.zeros((1, 3, 2, 2))
        self.assertAlmostEqual(16.0, float(losses.surrogate_loss(
            out, target, [losses.LOSS_PERC], perceptual=features)))

    def test_unknown(self):
        with testtools.ExpectedException(exceptions.AttackException):
            losses.surrogate_loss(torch.zeros(1), torch.zeros(1), ['banana'])


class OracleTestCase(base.StructmarkTestCase):
    def test_constant_offset(self):
        cover = torch.full((1, 3, 4, 4), 100.0)
        self.assertAlmostEqual(100.0, float(losses.loss_embed(
            cover, cover + 10.0, None, losses.TrainWeights())))

    def test_extract_matches_pixel_loop(self):
        rng = np.random.default_rng(3)
        extracted = torch.from_numpy(rng.uniform(0, 255, (1, 3, 4, 4)))
        target = torch.from_numpy(rng.uniform(0, 255, (1, 3, 4, 4)))
        mask = torch.from_numpy(
            (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float64))
        w = losses.TrainWeights(lambda3=1.5, lambda5=2.5)

        fg = bg = 0.0
        for c in range(3):
            for y in range(4):
                for x in range(4):
                    m = float(mask[0, 0, y, x])
                    e = float(extracted[0, c, y, x])
                    fg += m * (e - float(target[0, c, y, x])) ** 2
                    bg += (1.0 - m) * (e - 255.0) ** 2
        oracle = 1.5 * (2.5 * fg / 48.0 + bg / 48.0)
        self.assertAlmostEqual(oracle, float(losses.loss_extract(
            extracted, target, mask, True, w)), delta=1e-6 * oracle)

    def test_lambda5_ratio_examples(self):
        one = np.zeros((100, 100))
        one[:10] = 1
        self.assertAlmostEqual(9.0, losses.compute_lambda5([one]))

        third = np.zeros((15, 15))
        third[:5] = 1
        fifth = np.zeros((15, 15))
        fifth[:3] = 1
        self.assertAlmostEqual(2.75, losses.compute_lambda5([third, fifth]))

    def test_lambda5_balance(self):
        masks = [np.random.default_rng(i).random((16, 16)) < 0.2
                 for i in range(5)]
        lambda5 = losses.compute_lambda5(masks)
        foreground = sum(int(m.sum()) for m in masks)
        background = sum(int((~m).sum()) for m in masks)
        self.assertTrue(0.99 <= lambda5 * foreground / background <= 1.01)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        w = losses.TrainWeights(lambda2=0.01, lambda5=3.0)
        cover = torch.from_numpy(rng.uniform(0, 255, (1, 3, 8, 8)))
        target = torch.from_numpy(rng.uniform(0, 255, (1, 3, 8, 8)))
        mask = torch.from_numpy(
            (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float64))
        scores = torch.from_numpy(rng.normal(size=(1, 1, 2, 2)))

        marked = torch.from_numpy(rng.uniform(0, 255, (1, 3, 8, 8)))
        marked.requires_grad_(True)
        scores.requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(
            lambda m, s: losses.loss_embed(cover, m, s, w), (marked, scores),
            eps=1e-6, atol=1e-5, rtol=1e-3))

        extracted = torch.from_numpy(rng.uniform(0, 255, (1, 3, 8, 8)))
        extracted.requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(
            lambda e: losses.loss_extract(e, target, mask, True, w),
            (extracted,), eps=1e-6, atol=1e-5, rtol=1e-3))
        self.assertTrue(torch.autograd.gradcheck(
            lambda e: losses.loss_extract(e, None, None, False, w),
            (extracted,), eps=1e-6, atol=1e-5, rtol=1e-3))
