class FlagException(Exception):
    pass


class MissingArtifact(Exception):
    pass


# Images
class ImageException(Exception):
    pass


class InvalidImage(ImageException):
    pass


class LossyFormat(ImageException):
    pass


class DimensionMismatch(ImageException):
    pass


# Codec
class CodecException(Exception):
    pass


class DegenerateCodebook(CodecException):
    pass


class CapacityExceeded(CodecException):
    pass


class InvalidBitString(CodecException):
    pass


# Structure
class StructureException(Exception):
    pass


class InvalidThresholds(StructureException):
    pass


class MaskMismatch(StructureException):
    pass


class NonBinaryMask(StructureException):
    pass


# Synthesis
class SynthesisException(Exception):
    pass


class BlankCodeword(SynthesisException):
    pass


class LogoOverflow(SynthesisException):
    pass


# Augmentation
class AugmentException(Exception):
    pass


class UnknownAugmentation(AugmentException):
    pass


class CropTooLarge(AugmentException):
    pass


# Networks
class NetworkException(Exception):
    pass


class InvalidChannels(NetworkException):
    pass


class CheckpointException(NetworkException):
    pass


class FeatureNetworkUnavailable(NetworkException):
    pass


# Training
class TrainingException(Exception):
    pass


class EmptyMaskSet(TrainingException):
    pass


class StageGateFailure(TrainingException):
    pass


# Attack simulation
class AttackException(Exception):
    pass


class DegenerateDataset(AttackException):
    pass


class MissingCheckpoint(AttackException):
    pass


# Datasets
class DatasetException(Exception):
    pass


class TooFewImages(DatasetException):
    pass


class EmptySplit(DatasetException):
    pass


class BadManifest(DatasetException):
    pass


# Everything the command line turns into a nonzero exit
STRUCTMARK_EXCEPTIONS = (
    FlagException, MissingArtifact, ImageException, CodecException,
    StructureException, SynthesisException, AugmentException,
    NetworkException, TrainingException, AttackException, DatasetException)
