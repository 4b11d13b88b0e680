"""Exception hierarchy.

Every error carries a short ``category`` (the class name) so the command line
can print one machine-parseable line per failure.
"""


class DALError(Exception):
    @property
    def category(self) -> str:
        return type(self).__name__


class ZeroVector(DALError, ValueError):
    pass


class DimensionMismatch(DALError, ValueError):
    pass


class EmptyAnchorSet(DALError, ValueError):
    pass


class EmptyTracklet(DALError, ValueError):
    pass


class NonFiniteGradient(DALError, FloatingPointError):
    pass


# file formats
class BadMagic(DALError, ValueError):
    pass


class VersionMismatch(DALError, ValueError):
    pass


class RowCountMismatch(DALError, ValueError):
    pass


class NonFiniteFeature(DALError, ValueError):
    pass


class DanglingManifestRow(DALError, ValueError):
    pass


class TruncatedFile(DALError, ValueError):
    pass


class BadManifest(DALError, ValueError):
    pass


# datasets and evaluation
class EmptyDataset(DALError, ValueError):
    pass


class SingleCamera(DALError, ValueError):
    pass


class QueryWithoutGalleryMatch(DALError, ValueError):
    pass


class NoMergedAnchors(DALError, ValueError):
    pass


class MissingLabels(DALError, ValueError):
    pass


class ConfigError(DALError, ValueError):
    pass
