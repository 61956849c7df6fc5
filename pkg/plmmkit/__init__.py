"""
plmmkit - Penalized linear mixed models on file-backed data
Matrix store, PLINK ingest, design, decomposition, penalized path and inference
"""

from .config import PathOptions, RunConfig, load_config
from .decomposition import Decomposition, load_decomposition, save_decomposition
from .design_builder import Design, create_design, load_design
from .errors import (
    CapacityError,
    DecompositionError,
    DesignError,
    FitError,
    IngestError,
    InferenceError,
    MatrixStoreError,
    PlmmError,
)
from .inference import CVResult, cv_plmm, predict_blup, predict_linear, summarize
from .matrix_store import ElementKind, FileMatrix, create_matrix, import_array, open_matrix
from .penalized_path import FitPath, load_fit, plmm, save_fit
from .plink_ingest import process_delimited, process_plink

__version__ = "0.1.0"
