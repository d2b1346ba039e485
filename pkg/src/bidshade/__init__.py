"""Bid shading engine for open (non-censored) first-price ad auctions.

Predicts the optimal shading ratio per ad opportunity with factorization
machine or linear regressors trained under an asymmetric surplus loss,
benchmarks them against a segmented non-linear production-style shader
via offline auction replay, and serves predictions within a strict
latency budget.
"""

from .baseline import (
    SegmentedShader,
    SegmentKey,
    SegmentParams,
    SegmentStore,
    fit_segment_store,
    nonlinear_shade,
    update_segment,
)
from .encoding import EncoderConfig, SparseFeatureVector, encode, encode_dataset
from .modelfile import LoadedModel, ModelFileError, TrainMeta, load_model, save_model
from .models import (
    AsymLossConfig,
    FmModel,
    LinearModel,
    TrainConfig,
    TrainingDiverged,
    asym_loss,
    asym_loss_grad,
    example_alpha,
    fm_predict,
    linear_predict,
    shade,
    train,
)
from .records import (
    AuctionRecord,
    GoalType,
    InvalidRecordError,
    LogIngestError,
    OptimalRatio,
    parse_log,
    read_log,
    target_ratio,
    won_records,
    write_log,
)
from .replay import (
    EvaluationError,
    IdentityShader,
    OracleShader,
    ReplayReport,
    gamma_sweep,
    regression_metrics,
    run_replay,
    spend_winrate_cpm,
    surplus,
    win_indicator,
)
from .server import ShadingEngine, ShadingService, start_server
from .synthetic import (
    SyntheticLandscapeSpec,
    generate_synthetic,
    interaction_benchmark_spec,
    load_spec,
    save_spec,
)

__version__ = "0.1.0"
