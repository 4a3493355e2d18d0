"""Continuous-time dynamic graph representation learning.

Gated short-term memory updates, a chunked identity-attention encoder
for long-term memory, and re-occurrence-aware neighbor attention, on a
self-contained float64 autodiff engine.
"""

__version__ = "0.1.0"

from .autograd import Tensor, grad_check, no_grad
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    OrderingError,
    ParseError,
    TgmemError,
    UndefinedMetricError,
)
from .events import (
    Event,
    EventStream,
    NeighborStore,
    Splits,
    frequency_subgraph,
    parse_events,
    split_temporal,
)
from .metrics import average_precision, chi_square_pvalue, roc_auc
from .model import Model, TrainConfig, bce_loss, link_probability
from .params import Adam, ParameterStore, load_checkpoint, save_checkpoint
from .training import (
    classify_nodes,
    longterm_experiment,
    negative_sample,
    run_ablations,
    train,
    write_metrics_csv,
)
