"""Super-resolved multi-BS localisation without LoS/NLoS identification.

A transmitting mobile is located from multi-base-station OFDM measurements
by de-mixing the received matrices into rank-1 atoms parameterised by
continuous (mobile, scatter) location pairs, under a TV + group-TV sparsity
objective solved with an alternating-descent conditional-gradient loop.
"""

from .errors import (
    ConfigError,
    DegenerateGeometry,
    EmptyCandidate,
    EmptyScenario,
    InvalidCondition,
    SchemaError,
    SuperlocError,
)
from .geometry import Location, PathGeometry, Rect, canonicalise_virtual_scatter, doa, toa_los, toa_nlos
from .harness import (
    Condition,
    MonteCarloResult,
    Path,
    Scenario,
    SweepPoint,
    TrialResult,
    associate_scatters,
    canonicalise_scenario,
    extract_ms,
    generate_scenario,
    rmse,
    run_monte_carlo,
    truth_scatters,
)
from .signal_model import MeasurementSet, SystemConfig, add_awgn, atom, delay_vector, steering, synthesize
from .solver import (
    AdcgResult,
    AtomParams,
    CandidateSolution,
    SolverConfig,
    adcg_solve,
    analytic_param_gradient,
    local_improve,
    loss,
    prune,
    residual_gradients,
    select_next_source,
    solve_weights,
)

__version__ = "0.1.0"
