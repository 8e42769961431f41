# Paired datasets for the protected image-to-image task.
#
# The protected model is played by a restoration task: degraded inputs a
# paired with clean targets b. Datasets live on disk as PNG directories
# described by a JSON manifest carrying the pair paths, split tags and a
# content hash.

import glob
import hashlib
import os

import numpy as np
from skimage import draw
import torch
from torch.utils.data import Dataset

from structmark import config
from structmark import exceptions
from structmark import images
from structmark import logutil
from structmark import structure
from structmark import util


LOG, _ = logutil.setup(__name__)

DEGRADE_NONE = 'none'
DEGRADE_STREAKS = 'synthetic-streaks'
DEGRADE_NOISE = 'additive-structured-noise'
DEGRADATIONS = (DEGRADE_NONE, DEGRADE_STREAKS, DEGRADE_NOISE)

SPLIT_WATERMARK_TRAIN = 'watermark-train'
SPLIT_ADVERSARIAL = 'adversarial-stage'
SPLIT_TEST = 'test'
SPLIT_SURROGATE = 'surrogate-train'
SPLITS = (SPLIT_WATERMARK_TRAIN, SPLIT_ADVERSARIAL, SPLIT_TEST,
          SPLIT_SURROGATE)

MANIFEST_VERSION = 1

# Streaks per image at density 1.0, and their brightness boost
STREAKS_PER_UNIT = 40
STREAK_BOOST = 60.0
# Amplitude of the structured noise at density 1.0
NOISE_AMPLITUDE = 12.0


#
# Clean image generation
#
def _clean_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    start = rng.uniform(30, 220, 3)
    end = rng.uniform(30, 220, 3)
    angle = rng.uniform(0, np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    pixels = start + (end - start) * t[..., None]

    for _ in range(int(rng.integers(3, 8))):
        color = rng.uniform(0, 235, 3)
        shape = rng.integers(0, 3)
        if shape == 0:
            r0, c0 = rng.integers(0, size - 8, 2)
            h, w = rng.integers(8, size // 2, 2)
            rr, cc = draw.rectangle((r0, c0), extent=(h, w),
                                    shape=(size, size))
        elif shape == 1:
            r, c = rng.integers(8, size - 8, 2)
            a, b = rng.integers(4, size // 4, 2)
            rr, cc = draw.ellipse(r, c, a, b, shape=(size, size),
                                  rotation=rng.uniform(0, np.pi))
        else:
            vertices = rng.integers(0, size, (int(rng.integers(3, 6)), 2))
            rr, cc = draw.polygon(vertices[:, 0], vertices[:, 1],
                                  shape=(size, size))
        pixels[rr, cc] = color

    # Mild texture so flat regions are not perfectly flat
    pixels += rng.normal(0.0, 2.0, pixels.shape)
    return images.Image(np.clip(np.rint(pixels), 0, 235))


def generate_clean_images(count, size=None, seed=0):
    """Procedural scenes of gradients and solid shapes."""
    size = size or config.parsed.get('IMAGE_SIZE')
    rng = np.random.default_rng(seed)
    return [_clean_image(rng, size) for _ in range(count)]


def load_clean_directory(path):
    paths = sorted(glob.glob(os.path.join(path, '*.png')))
    return [images.load_image(p) for p in paths]


#
# Degradations
#
def _streaks(img, rng, density):
    size = min(img.height, img.width)
    pixels = img.pixels.copy()
    slant = rng.uniform(-0.3, 0.3)
    for _ in range(int(round(STREAKS_PER_UNIT * density))):
        r0 = int(rng.integers(0, img.height))
        c0 = int(rng.integers(0, img.width))
        length = int(rng.integers(size // 16 + 2, size // 6 + 3))
        r1 = min(img.height - 1, r0 + length)
        c1 = int(np.clip(c0 + slant * length, 0, img.width - 1))
        rr, cc = draw.line(r0, c0, r1, c1)
        pixels[rr, cc] = np.minimum(pixels[rr, cc] + STREAK_BOOST,
                                    images.BLANK)
    return images.Image(pixels)


def _structured_noise(img, rng, density):
    yy, xx = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    pattern = np.zeros((img.height, img.width))
    for _ in range(3):
        fy, fx = rng.uniform(0.05, 0.4, 2)
        phase = rng.uniform(0, 2 * np.pi)
        pattern += np.sin(fy * yy + fx * xx + phase)
    pattern /= 3.0
    delta = NOISE_AMPLITUDE * density * pattern[..., None]
    return images.Image(np.clip(img.pixels + delta, 0.0, images.BLANK))


def degrade(img, degradation, rng, density=1.0):
    if degradation == DEGRADE_NONE:
        return images.Image(img.pixels.copy())
    if degradation == DEGRADE_STREAKS:
        return _streaks(img, rng, density)
    if degradation == DEGRADE_NOISE:
        return _structured_noise(img, rng, density)
    raise exceptions.DatasetException('unknown degradation %s' % degradation)


#
# Datasets
#
class PairedDataset(object):
    def __init__(self, root, pairs, splits=None, degradation=None,
                 seed=None, content_hash=None):
        self.root = root
        self.pairs = pairs
        self.splits = splits or {}
        self.degradation = degradation
        self.seed = seed
        self.content_hash = content_hash or self.compute_hash()

    def __len__(self):
        return len(self.pairs)

    def unique_label(self):
        return ('dataset', self.root)

    def _path(self, relative):
        return os.path.join(self.root, relative)

    def compute_hash(self):
        digest = hashlib.sha256()
        for pair in self.pairs:
            for key in ('input', 'target'):
                with open(self._path(pair[key]), 'rb') as f:
                    digest.update(f.read())
        return digest.hexdigest()

    def split_pairs(self, name):
        if name not in self.splits:
            raise exceptions.EmptySplit('dataset has no split %s' % name)
        by_id = {p['id']: p for p in self.pairs}
        return [by_id[i] for i in self.splits[name]]

    def load_split(self, name):
        """[(input Image, target Image)] for one split."""
        return [(images.load_image(self._path(p['input'])),
                 images.load_image(self._path(p['target'])))
                for p in self.split_pairs(name)]

    def split(self, ratios, seed):
        return split(self, ratios, seed)

    def json_dump(self):
        return {
            'version': MANIFEST_VERSION,
            'degradation': self.degradation,
            'seed': self.seed,
            'content_hash': self.content_hash,
            'pairs': self.pairs,
            'splits': self.splits,
        }

    def save(self, path=None):
        path = path or manifest_path(self.root)
        util.write_json(path, self.json_dump())
        return path

    @staticmethod
    def load(path):
        if os.path.isdir(path):
            path = manifest_path(path)
        if not os.path.exists(path):
            raise exceptions.MissingArtifact(
                'dataset manifest %s does not exist, run prepare-data' % path)
        try:
            data = util.read_json(path)
            ds = PairedDataset(os.path.dirname(os.path.abspath(path)),
                               data['pairs'], data.get('splits'),
                               data.get('degradation'), data.get('seed'),
                               data['content_hash'])
        except (ValueError, KeyError, TypeError) as e:
            raise exceptions.BadManifest('bad manifest %s: %s' % (path, e))

        for pair in ds.pairs:
            for key in ('input', 'target'):
                if not os.path.exists(ds._path(pair[key])):
                    raise exceptions.BadManifest(
                        'manifest %s names missing file %s'
                        % (path, pair[key]))
        return ds


def manifest_path(root):
    return os.path.join(root, 'manifest.json')


def generate_toy_task(clean, root, degradation=None, seed=0, density=None,
                      minimum=None):
    """Write degraded / clean pairs under root and return the dataset."""
    degradation = degradation or config.parsed.get('DEGRADATION')
    density = (config.parsed.get('DEGRADATION_DENSITY')
               if density is None else density)
    minimum = (config.parsed.get('MIN_DATASET_IMAGES')
               if minimum is None else minimum)
    if degradation not in DEGRADATIONS:
        raise exceptions.DatasetException(
            'unknown degradation %s' % degradation)
    if len(clean) < minimum:
        raise exceptions.TooFewImages(
            '%d clean images given, at least %d needed'
            % (len(clean), minimum))

    rng = np.random.default_rng(seed)
    pairs = []
    with util.RecordedOperation('generate toy task', degradation):
        for i, target in enumerate(clean):
            pair_id = '%05d' % i
            pair = {'id': pair_id,
                    'input': os.path.join('inputs', pair_id + '.png'),
                    'target': os.path.join('targets', pair_id + '.png')}
            images.save_image(degrade(target, degradation, rng, density),
                              os.path.join(root, pair['input']))
            images.save_image(target, os.path.join(root, pair['target']))
            pairs.append(pair)

    ds = PairedDataset(root, pairs, degradation=degradation, seed=seed)
    LOG.withObj(ds).withField('hash', ds.content_hash).info(
        'Generated %d pairs' % len(pairs))
    return ds


def split_sizes(count, ratios):
    if len(ratios) != len(SPLITS):
        raise exceptions.DatasetException(
            'expected %d split ratios, got %d' % (len(SPLITS), len(ratios)))
    if any(r < 0 for r in ratios) or sum(ratios) > 1.0 + 1e-9:
        raise exceptions.DatasetException(
            'split ratios must be non-negative and sum to at most 1')
    sizes = [int(np.floor(r * count + 1e-9)) for r in ratios]
    for name, size in zip(SPLITS, sizes):
        if size == 0:
            raise exceptions.EmptySplit(
                'split %s is empty with %d pairs' % (name, count))
    return sizes


def split(ds, ratios=None, seed=0):
    """Disjoint, seeded splits in the order of SPLITS."""
    ratios = ratios or config.parsed.get('SPLIT_RATIOS')
    sizes = split_sizes(len(ds), ratios)

    order = np.random.default_rng(seed).permutation(len(ds))
    ids = [ds.pairs[i]['id'] for i in order]
    splits = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        splits[name] = sorted(ids[start:start + size])
        start += size

    return PairedDataset(ds.root, ds.pairs, splits, ds.degradation, seed,
                         ds.content_hash)


#
# Torch views
#
def stack(imgs):
    return torch.stack([img.to_tensor() for img in imgs])


def stack_masks(masks):
    return torch.stack([torch.from_numpy(m.mask.astype(np.float32))[None]
                        for m in masks])


class StructureDataset(Dataset):
    """Targets with their structure masks: the covers HNet learns to mark."""

    def __init__(self, targets, source=None):
        self.targets = targets
        self.masks = [structure.extract(t, source) for t in targets]

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, index):
        mask = torch.from_numpy(self.masks[index].mask.astype(np.float32))
        return self.targets[index].to_tensor(), mask[None]
