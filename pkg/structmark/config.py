# Copyright 2021 The structmark authors

import copy
import json
import os

import click

from structmark import exceptions


# NOTE(structmark): the type of each default matters, as we use it to decide
# how to parse override values from environment variables and experiment
# files. Options are strings (the default), integers, floats, booleans and
# lists / dicts (given as JSON). Integers and floats differ in that a float
# has values after a decimal point.

CONFIG_DEFAULTS = {
    # Codec options
    # -------------
    #  - color_step: the quantisation step t of the color grid
    #  - watermark_bits: the owner's bit sequence embedded at deployment,
    #    as a hex (0x...) or binary string
    'COLOR_STEP': 20,
    'WATERMARK_BITS': '0x2a5',

    # Structure options
    #  - structure_source: sobel, canny or semantic-file
    #  - sobel_threshold: a gradient magnitude, or 0.0 for a per-image
    #    automatic (Otsu) threshold
    #  - canny_low / canny_high: hysteresis thresholds on gradient magnitude
    #  - min_foreground_ratio / max_foreground_ratio: masks outside this
    #    range are logged as unusable for watermarking
    'STRUCTURE_SOURCE': 'sobel',
    'SOBEL_THRESHOLD': 0.0,
    'CANNY_LOW': 20.0,
    'CANNY_HIGH': 50.0,
    'MIN_FOREGROUND_RATIO': 0.0,
    'MAX_FOREGROUND_RATIO': 0.9,

    # Unified baseline watermark: a logo drawn at a fixed position
    'UNIFIED_LOGO_SIZE': 32,
    'UNIFIED_LOGO_OFFSET': [8, 8],

    # Augmentation options (training-side augmentation layer)
    #  - rotate_range: degrees, symmetric
    #  - crop_range: crop sizes in pixels
    #  - resize_range: scale factors
    #  - noise_sigma, blur_sigma_range, hue_max_degrees, saturation_range,
    #    contrast_range: quality-harmful magnitudes
    'ROTATE_RANGE': 90.0,
    'CROP_RANGE': [64, 128],
    'RESIZE_RANGE': [0.5, 2.0],
    'NOISE_SIGMA': 5.0,
    'BLUR_SIGMA_RANGE': [0.5, 1.5],
    'HUE_MAX_DEGREES': 10.0,
    'SATURATION_RANGE': [0.8, 1.2],
    'CONTRAST_RANGE': [0.8, 1.2],
    'MAX_COMPOSED_OPS': 2,

    # Network options
    #  - base_width: channel width of the first layer of every network
    #  - unet_depth: number of down / up levels of the UNets
    #  - exnet_blocks: residual blocks in EXNet
    #  - perceptual_network: torchvision classifier used for L_perc
    'BASE_WIDTH': 32,
    'UNET_DEPTH': 4,
    'EXNET_BLOCKS': 4,
    'DISCRIMINATOR_LAYERS': 3,
    'PERCEPTUAL_NETWORK': 'vgg16',

    # Training weights, before the adversarial-loss phase
    'LAMBDA': 1.0,
    'LAMBDA1': 1.0,
    'LAMBDA2': 0.0,
    'LAMBDA3': 1.0,
    'LAMBDA4': 1.0,
    'LR_MAIN': 0.0002,
    # ...and once the adversarial loss is enrolled
    'LAMBDA_ADV_PHASE': 10.0,
    'LAMBDA2_ADV_PHASE': 0.01,
    'LR_EXNET_FINETUNE': 0.00002,
    'BATCH_SIZE': 8,

    # Curriculum options
    #  - curriculum: augmentation operators enrolled one at a time
    #  - stage_gate_sr: validation success rate needed to leave a stage
    #  - stage_max_epochs: budget per stage before aborting
    #  - validation_fraction: part of watermark-train held out for gates
    'CURRICULUM': ['flip', 'rotate', 'crop', 'resize'],
    'STAGE_GATE_SR': 0.9,
    'STAGE_MAX_EPOCHS': 40,
    'ADV_LOSS_EPOCHS': 5,
    'VALIDATION_FRACTION': 0.1,

    # Adversarial training stage
    #  - mimic_arch / mimic_epochs: the surrogate used to mimic an attacker
    #  - mimic_psnr_floor: below this the stage is logged as vacuous
    #  - exnet_finetune_epochs: EXNet epochs on mimic outputs
    'MIMIC_ARCH': 'unet-sm',
    'MIMIC_EPOCHS': 20,
    'MIMIC_USE_AUGMENTATION': True,
    'MIMIC_PSNR_FLOOR': 20.0,
    'EXNET_FINETUNE_EPOCHS': 10,

    # Attack simulation
    #  - attack_rotate_range / attack_crop_size / attack_resize_to: the
    #    attacker's augmentation, scaled from 256 px to the default image size
    #  - surrogate_epochs: epoch budget of every surrogate
    #  - finetune_attack_epochs: clean fine-tuning epochs
    'ATTACK_ROTATE_RANGE': 30.0,
    'ATTACK_CROP_SIZE': 96,
    'ATTACK_RESIZE_TO': 64,
    'SURROGATE_EPOCHS': 30,
    'SURROGATE_LR': 0.0002,
    'FINETUNE_ATTACK_EPOCHS': 10,

    # Forensics
    #  - error_threshold: TH, absolute color error for a success
    #  - min_foreground_pixels: smaller guidance masks are insufficient
    #  - nc_threshold: baseline NC value needed for a success
    'ERROR_THRESHOLD': 10.0,
    'MIN_FOREGROUND_PIXELS': 200,
    'NC_THRESHOLD': 0.95,

    # Dataset options
    'IMAGE_SIZE': 128,
    'MIN_TRAIN_IMAGE_SIZE': 64,
    'DATASET_SIZE': 300,
    'MIN_DATASET_IMAGES': 200,
    'DEGRADATION': 'synthetic-streaks',
    'DEGRADATION_DENSITY': 1.0,
    'SPLIT_RATIOS': [0.4, 0.4, 0.1, 0.1],

    # Metrics
    'PSNR_CAP': 99.0,

    # Run options
    'SEED': 42,
    'OUTPUT_PATH': 'runs',
    'DEVICE': '',
    'DATALOADER_WORKERS': 0,

    # LOGGING
    # -------
    'LOGLEVEL_CLI': 'info',
    'LOGLEVEL_TRAINING': 'info',
    'LOGLEVEL_ATTACK': 'info',
    # Add method name and module line number to log messages
    'LOG_METHOD_TRACE': 0,
}


def _coerce(flag, value):
    # We use the type of the default value to determine what type we should
    # force the value provided by the user into. bool is a subclass of int,
    # so it has to be checked first.
    default = CONFIG_DEFAULTS[flag]
    if isinstance(default, bool):
        if isinstance(value, str):
            try:
                return click.BOOL.convert(value, None, None)
            except click.BadParameter:
                raise exceptions.FlagException(
                    'Flag %s must be a boolean, got %r' % (flag, value))
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (list, dict)):
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, type(default)):
            raise exceptions.FlagException(
                'Flag %s must be a %s' % (flag, type(default).__name__))
        return value
    if default is None or isinstance(default, str):
        return value if value is None else str(value)
    raise exceptions.FlagException('Flag %s has unknown type.' % flag)


class Config(object):
    def __init__(self):
        self.config = None
        self.experiment_path = None
        self.experiment = {}

    def parse(self):
        self.config = copy.deepcopy(CONFIG_DEFAULTS)

        for flag, value in self.experiment.items():
            self.config[flag] = _coerce(flag, value)

        for var in os.environ:
            if var.startswith('STRUCTMARK_'):
                flag = var.replace('STRUCTMARK_', '')
                if flag not in CONFIG_DEFAULTS:
                    raise exceptions.FlagException(
                        'Unknown flag %s in environment' % flag)
                self.config[flag] = _coerce(flag, os.environ[var])

    def load(self, path):
        """Overlay an experiment file (JSON) on top of the defaults."""
        try:
            with open(path) as f:
                experiment = json.loads(f.read())
        except (OSError, ValueError) as e:
            raise exceptions.FlagException(
                'Cannot read experiment config %s: %s' % (path, e))

        if not isinstance(experiment, dict):
            raise exceptions.FlagException(
                'Experiment config %s is not a mapping' % path)

        normalized = {}
        for key, value in experiment.items():
            flag = key.upper()
            if flag not in CONFIG_DEFAULTS:
                raise exceptions.FlagException(
                    'Unknown flag %s in %s' % (key, path))
            normalized[flag] = value

        self.experiment_path = path
        self.experiment = normalized
        self.parse()

    def set(self, var, value):
        if not self.config:
            self.parse()
        if var not in CONFIG_DEFAULTS:
            raise exceptions.FlagException('Unknown flag %s' % var)
        self.config[var] = _coerce(var, value)

    def get(self, var):
        if not self.config:
            self.parse()
        return self.config.get(var)

    def dump(self):
        if not self.config:
            self.parse()
        return copy.deepcopy(self.config)


parsed = Config()
