import os
import shutil
import tempfile

import numpy as np
import testtools

from structmark import config
from structmark import dataset
from structmark import embedding
from structmark import images
from structmark import networks


# Small enough for the networks to run on CPU in a unit test
TINY_FLAGS = {
    'BASE_WIDTH': 4,
    'UNET_DEPTH': 2,
    'EXNET_BLOCKS': 1,
    'DISCRIMINATOR_LAYERS': 2,
    'BATCH_SIZE': 4,
    'IMAGE_SIZE': 32,
    'MIN_FOREGROUND_PIXELS': 8,
    'UNIFIED_LOGO_SIZE': 16,
}


class StructmarkTestCase(testtools.TestCase):
    def setUp(self):
        super(StructmarkTestCase, self).setUp()
        config.parsed.experiment = {}
        config.parsed.parse()
        self.addCleanup(self._reset_config)

    def _reset_config(self):
        config.parsed.experiment = {}
        config.parsed.parse()

    def set_flags(self, **flags):
        config.parsed.experiment.update(flags)
        config.parsed.parse()

    def tiny(self, **flags):
        self.set_flags(**dict(TINY_FLAGS, **flags))

    def tempdir(self):
        path = tempfile.mkdtemp(prefix='structmark-test-')
        self.addCleanup(shutil.rmtree, path, True)
        return path


def square_image(size=32, inner=None, background=40.0, foreground=200.0):
    """A dark image with one bright square: a mask with a known outline."""
    inner = inner or (size // 4, 3 * size // 4)
    pixels = np.full((size, size, 3), background)
    pixels[inner[0]:inner[1], inner[0]:inner[1]] = foreground
    return images.Image(pixels)


def random_image(seed, size=32):
    rng = np.random.default_rng(seed)
    return images.Image(rng.integers(0, 256, (size, size, 3)).astype(
        np.float64))


def make_workspace(out, modes=('ours',), count=20):
    """A prepared dataset and untrained checkpoints for the given modes."""
    ds = dataset.generate_toy_task(
        dataset.generate_clean_images(count, size=32, seed=9),
        os.path.join(out, 'data'), dataset.DEGRADE_STREAKS, seed=9,
        minimum=count)
    dataset.split(ds, seed=9).save()

    for mode in modes:
        for seed, stage in ((1, embedding.STAGE_CURRICULUM),
                            (5, embedding.STAGE_ADVERSARIAL)):
            nets = {
                'hnet': networks.build(
                    networks.NetworkSpec(networks.HNET), seed),
                'exnet': networks.build(
                    networks.NetworkSpec(networks.EXNET), seed + 1),
            }
            networks.Checkpoint(nets, stage=stage).save(
                embedding.checkpoint_path(out, mode, stage))
    return out
