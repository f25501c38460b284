"""Targeted adversarial attacks on causal skeleton-interaction regressors."""

__version__ = "0.1.0"

from .attack import AttackConfig, AttackResult, run_attack  # noqa: F401
from .data import (InteractionRecord, SkeletonSequence, make_pairs,  # noqa: F401
                   parse_sbu_file, split_by_sets, synth_generate)
from .evaluation import (Objective, blackbox_transfer, resolve_kappa,  # noqa: F401
                         whitebox_sweep)
from .models import (GruRegressor, TcnRegressor, TrainConfig, create_model,  # noqa: F401
                     load_model, save_model, train)
