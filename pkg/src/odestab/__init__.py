"""odestab: a desk-scale laboratory for ODE-discretization networks.

Implements deep classifiers as discretizations of ODE flows, certifies the
exp(K * span) perturbation bound on paired clean/perturbed trajectories, and
measures the robustness gap between fixed-step residual architectures and
adaptive-solver classifiers under white-box and black-box attacks.
"""

from .errors import (
    BudgetError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    OdestabError,
    StateError,
    StiffnessError,
)
from .netcore import (
    CallableField,
    DenseLayer,
    GradientTape,
    LipschitzEstimate,
    Tensor,
    VectorField,
    backward,
    forward,
    lipschitz_upper_bound,
    make_dense,
    make_mlp_field,
    operator_norm,
    relu_contractivity_check,
    tensor,
)
from .solvers import (
    DOPRI5,
    EULER,
    HEUN,
    RK4,
    RKF45,
    ButcherTableau,
    SolverConfig,
    Trajectory,
    backward_euler_linear,
    fractal_expand,
    integrate,
    integrate_adaptive,
    integrate_fixed,
    integrate_on_grid,
    poly_inception_apply,
    revnet_couple,
    revnet_invert,
    rk_step,
)
from .models import (
    BlockSpec,
    Classifier,
    amplification,
    build_classifier,
    classifier_forward,
    load_checkpoint,
    predict,
    predict_batch,
    save_checkpoint,
)
from .training import (
    AdamConfig,
    AdamState,
    Dataset,
    EpochStats,
    SGDConfig,
    TrainConfig,
    adam_step,
    accuracy,
    cross_entropy,
    history_to_csv,
    load_idx,
    make_two_moons,
    make_xor_blobs,
    train,
)
from .attacks import (
    AttackReport,
    BoundaryConfig,
    Di2FgsmConfig,
    FgsmConfig,
    PgdConfig,
    attack_dataset,
    boundary_attack,
    di2_fgsm,
    fgsm,
    pgd,
    transfer_attack,
)
from .stabilitylab import (
    BoundCertificate,
    GapTable,
    SweepResult,
    certify_bound,
    relu_bound_survey,
    robustness_gap,
    solver_stage_lipschitz,
    step_size_sweep,
)

__version__ = "0.1.0"
