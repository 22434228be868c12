"""masakit: cross-layer attention weight sharing via matrix atom dictionaries.

Library layout:

* linalg      pinned SVD / Cholesky / triangular-solve kernels
* masa        dictionaries, coefficients, reconstruction, ratio arithmetic
* autodiff    tape-based reverse mode over numpy arrays
* model       toy byte-level transformer with dense or shared attention
* train       deterministic AdamW loop and gradient verification
* compress    training-free grouped basis extraction plus whitened
              residual refinement with balanced rank trading
* checkpoint  bit-exact binary serialization
* report      CSV reports with matplotlib figures beside them
* cli         the masakit command
"""

from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .compress import (
    GroupSpec,
    LayerPmfSequence,
    RankAllocation,
    ResidualEntry,
    ResidualFactorization,
    WhiteningContext,
    autocorrelation,
    balanced_rank_allocation,
    compress_model,
    group_blocks,
    kl_divergence,
    layer_pmfs,
    materialize_compressed,
    matrix_pca,
    pca_reconstruction_error,
    refine_residual,
    residual_budget,
    residual_correction,
)
from .errors import NumericalError, ValidationError
from .linalg import (
    CholeskyFactor,
    SvdResult,
    cholesky,
    solve_lower_triangular,
    svd,
    truncated_approx,
)
from .masa import (
    AtomDictionary,
    BlockEmbeddingTable,
    CoefficientMatrix,
    CoefficientMlp,
    ProjectionKind,
    SharedProjection,
    SharedProjectionSet,
    SharingMode,
    atom_cosine_similarity,
    attention_module_cr,
    bake_coefficients,
    coeff_from_mlp,
    projection_compression_ratio,
    reconstruct_weight,
    stack_vectorized,
    unstack_vectorized,
)
from .model import (
    ModelParams,
    ToyConfig,
    attention_forward,
    bake_params,
    forward_loss,
    init_params,
    perplexity,
)
from .train import OptimizerSettings, gradient_check, train

__version__ = "0.1.0"
