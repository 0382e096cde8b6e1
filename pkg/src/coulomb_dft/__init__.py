"""Sorted Coulomb matrix signals, their Fourier spectra, and Gaussian kernel
ridge regression of molecular atomization energies."""

__version__ = "0.1.0"

from .ingest import (
    Dataset,
    Molecule,
    ParseError,
    convert_energy,
    parse_csv,
    parse_xyz,
    write_csv,
)
from .descriptor import (
    CoulombMatrix,
    DegenerateGeometryError,
    FeatureMatrix,
    coulomb_matrix,
    featurize,
    flatten_lower,
    sort_coulomb,
)
from .spectral import (
    Spectrogram,
    dft,
    direct_dft,
    idft,
    magnitude,
    spectrogram,
    transform_features,
)
from .krr import (
    KernelConfig,
    KrrModel,
    SingularSystemError,
    fit,
    kernel_matrix,
    load_model,
    predict,
    save_model,
)
from .experiment import (
    ExperimentConfig,
    EvalReport,
    GridSearchResult,
    Metrics,
    SplitPlan,
    grid_search,
    mae,
    make_split,
    pearson,
    rmse,
    run_experiment,
)
