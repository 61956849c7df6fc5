"""
Errors - Exception hierarchy shared by every plmmkit module
The CLI maps these onto process exit codes (data error 2, capacity error 3)
"""


class PlmmError(Exception):
    """Base class for data errors raised by plmmkit"""


class MatrixStoreError(PlmmError):
    """Problem creating, opening or accessing a file-backed matrix"""


class CorruptMatrixError(MatrixStoreError):
    """Backing file and sidecar disagree"""


class ReadOnlyMatrixError(MatrixStoreError):
    """Write attempted through a read-only handle"""


class IngestError(PlmmError):
    """Malformed PLINK or delimited input"""


class DesignError(PlmmError):
    """Outcome/covariate alignment or standardization failure"""


class DecompositionError(PlmmError):
    """Relatedness matrix or eigendecomposition failure"""


class FitError(PlmmError):
    """Invalid path options or fitting failure"""


class InferenceError(PlmmError):
    """Cross-validation, prediction or summary failure"""


class CapacityError(PlmmError):
    """Estimated memory use exceeds the configured budget"""
