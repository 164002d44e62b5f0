"""Risk-preference elicitation from binary lottery choices.

Compensating premia under CARA/CRRA utility, orderedness diagnostics for
lottery pairs, six stochastic choice models with trembles, and maximum
likelihood estimation with block-bootstrap standard errors.
"""

from .exceptions import (
    AmbiguityError,
    ConvergenceError,
    DatasetError,
    OrientationError,
    SupportError,
)
from .lotteries import (
    Lottery,
    UtilityFamily,
    ce_grid,
    certainty_equivalent,
    expected_utility,
    outcome_span,
    utility,
)
from .premium import (
    DEFAULT_GRID,
    GridSpec,
    PremiumCurve,
    build_premium_curve,
    cached_premium_curve,
    compensating_premium,
    interpolate_premium,
    premium_limits,
    write_curve_csv,
)
from .ordering import (
    OrderVerdict,
    ce_difference_grid,
    classify_pair,
    indifference_threshold,
    is_nonmonotone,
    mps_local_diagnostic,
)
from .models import (
    ChoiceModelSpec,
    Menu,
    ModelKind,
    ModelParams,
    choice_prob_menu,
    choice_prob_pair,
    format_model_spec,
    parse_model_spec,
    value_index,
)
from .data import (
    Battery,
    BatteryPair,
    ChoiceDataset,
    QuestionSet,
    Response,
    SubjectChoices,
    andersen_battery,
    load_choices,
    save_choices,
    simulate_dataset,
    write_battery_csv,
)
from .estimation import (
    BootstrapResult,
    EstimationSpec,
    FitResult,
    HomoskedasticParams,
    OptimizerSettings,
    Scheme,
    SubjectFit,
    block_bootstrap,
    count_local_maxima,
    fit,
    log_likelihood,
    postprocess_consistent,
    profile_loglik,
    transform_params,
    untransform_params,
    write_fit_csv,
    write_pooled_summary_csv,
)

__version__ = "0.1.0"
