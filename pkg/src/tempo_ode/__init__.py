"""Continuous-time neural networks with synchronization-driven temporal weights."""

from .tensor import Parameter, Tape, Tensor, backward, elementwise, matmul, reduce
from .temporal import (
    CouplingParams,
    StaticLayer,
    TemporalWeightLayer,
    scale,
    scale_complexity_probe,
    static_forward,
)
from .solver import OdeProblem, SolverConfig, dopri5_solve, odesolve_at, rk4_step
from .models import (
    GruCell,
    LatentOdeModel,
    OdeFuncNet,
    OdeRnnEncoder,
    classify,
    decode,
    encode,
    gru_update,
    ode_func_forward,
    param_count,
    sample_z0,
)
from .data import (
    DatasetSplit,
    IrregularSeries,
    SyntheticSpec,
    batch,
    generate_synthetic,
    load_csv,
    normalize,
    write_csv,
)
from .training import (
    AdamaxState,
    LossSpec,
    MetricsRecord,
    Trainer,
    adamax_step,
    auc,
    elbo,
    evaluate,
    masked_mse,
    train_epoch,
)

__version__ = "0.1.0"
