"""Exception types shared across the package.

Every error that maps to CLI exit code 2 (bad input data) derives from
DataError; numeric aborts (exit code 3) derive from NumericFailure.
"""


class XCryoError(Exception):
    pass


class DataError(XCryoError):
    pass


# MRC I/O
class TruncatedFile(DataError):
    pass


class UnsupportedMode(DataError):
    pass


class BadMagic(DataError):
    pass


class BadMachineStamp(DataError):
    pass


class ValueOutOfRange(DataError):
    pass


class IoFailure(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


# Montage assembly
class TooManyTiles(DataError):
    pass


class DuplicatePosition(DataError):
    pass


class MixedTileSizes(DataError):
    pass


class MissingTileFile(DataError):
    pass


# Extraction
class DegenerateMontage(DataError):
    pass


class TemplateTooLarge(DataError):
    pass


class ConstantTemplate(DataError):
    pass


# Label files
class MalformedRow(DataError):
    pass


class ScoreOutOfRange(DataError):
    pass


# Tensor core and model
class ShapeMismatch(XCryoError):
    pass


class OddChannelCount(XCryoError):
    pass


# Training
class EmptyBatch(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class NumericFailure(XCryoError):
    pass


# Synthetic generator
class InvalidParams(DataError):
    pass
