"""Exception hierarchy shared by every ecglab module."""


class EcgLabError(Exception):
    """Base class; the CLI reports any subclass as ``error: <Name>: <msg>``."""


# ingest
class MissingColumn(EcgLabError):
    pass


class MalformedRow(EcgLabError):
    def __init__(self, message, rejects=()):
        super().__init__(message)
        self.rejects = list(rejects)


class DuplicateRecordId(EcgLabError):
    pass


class UnitConflict(EcgLabError):
    pass


# cohort
class NoReferenceBounds(EcgLabError):
    pass


# split
class TooFewSubjects(EcgLabError):
    pass


class UnknownSubject(EcgLabError):
    pass


# gbdt
class NoValidSplit(EcgLabError):
    pass


class DegenerateLabels(EcgLabError):
    pass


class FeatureCountMismatch(EcgLabError):
    pass


class SchemaVersionMismatch(EcgLabError):
    pass


class CorruptModel(EcgLabError):
    pass


# explain
class EmptyBackground(EcgLabError):
    pass


class InsufficientData(EcgLabError):
    pass


# evaluation
class SingleClass(EcgLabError):
    pass


class ResampleExhaustion(EcgLabError):
    pass


class EmptyInput(EcgLabError):
    pass


class TargetLargerThanSource(EcgLabError):
    pass


class EmptyTargetGroup(EcgLabError):
    pass


# synth / cli
class InvalidConfig(EcgLabError):
    pass


class ConfigInvalid(EcgLabError):
    pass


class StageInputMissing(EcgLabError):
    pass
