"""Nonlinear system identification on multi-operating-point periodic data."""

from .blocknl import (PolyNl, SigmoidNet, WienerModel, WienerSchetzenModel, build_obf,
                      fit_wiener, fit_wiener_schetzen)
from .exceptions import (BudgetExceeded, DivergenceError, RankDeficientError, SpecError,
                         UnstableModelError)
from .freqid import (Frf, LinearSs, RationalTf, estimate_bla, estimate_frf_lpm,
                     fit_parametric_tf, realize_state_space)
from .harness import (ErrorReport, ExperimentConfig, count_parameters, load_model,
                      relative_error, run_experiment)
from .nlss import NnNlssModel, PnlssModel, fit_nnlss, fit_pnlss, simulate_nlss
from .optim import LmOptions, levenberg_marquardt
from .plant import MinimalModelParams, simulate_plant
from .signals import (Dataset, MultisineSpec, PulseTrainSpec, SampledRecord,
                      design_multisine, design_pulse_multisine)

__version__ = "0.1.0"
