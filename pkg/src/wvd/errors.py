"""Exception hierarchy. The CLI maps any WVDError to exit code 2."""


class WVDError(Exception):
    pass


# geometry
class DegenerateCloud(WVDError):
    pass


class BehindCamera(WVDError):
    pass


class NonPositiveDepth(WVDError):
    pass


# scene synthesis
class EmptyScene(WVDError):
    pass


# post optimization
class InsufficientCorrespondences(WVDError):
    pass


class DegenerateConfiguration(WVDError):
    pass


class NoValidPixels(WVDError):
    pass


class EmptyMask(WVDError):
    pass


# diffusion
class ShapeMismatch(WVDError):
    pass


class EmptyBatch(WVDError):
    pass


class ConditionWithoutObservation(WVDError):
    pass


# file formats
class FormatError(WVDError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class ConfigError(WVDError):
    pass
