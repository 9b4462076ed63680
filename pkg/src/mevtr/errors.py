"""Exception hierarchy shared by all mevtr modules."""


class MevtrError(Exception):
    """Base class for all errors raised by this package."""


class InvariantError(MevtrError):
    """A value violates a structural invariant or precondition."""


class EmbeddingFormatError(MevtrError):
    """An embedding file does not conform to the binary format.

    Messages include the byte offset of the offending region.
    """


class ManifestError(MevtrError):
    """A corpus manifest is malformed or internally inconsistent.

    Messages include the 1-based line number of the offending record
    where one exists.
    """


class TrainingDiverged(MevtrError):
    """Training hit a non-finite loss; message carries epoch/batch indices."""
