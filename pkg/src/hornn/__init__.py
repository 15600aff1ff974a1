"""Higher order recurrent neural network language models in numpy."""

from hornn.corpus import BatchStream, Vocab, build_vocab, make_stream, read_tokens
from hornn.model import (
    HornnConfig,
    Parameters,
    StateBuffer,
    StepTrace,
    feedback,
    forward_window,
    init_params,
    step,
)
from hornn.training import (
    Checkpoint,
    OptState,
    TrainSettings,
    backward_window,
    clip_gradients,
    end_of_epoch_schedule,
    sgd_update,
    train,
)
from hornn.checkpoint import load_checkpoint, save_checkpoint
from hornn.evaluation import (
    EvalReport,
    SweepResult,
    alpha_sweep,
    gradient_check,
    long_dependency_probe,
    order_sweep,
    perplexity,
)

__all__ = [
    "BatchStream",
    "Vocab",
    "build_vocab",
    "make_stream",
    "read_tokens",
    "HornnConfig",
    "Parameters",
    "StateBuffer",
    "StepTrace",
    "feedback",
    "forward_window",
    "init_params",
    "step",
    "Checkpoint",
    "OptState",
    "TrainSettings",
    "backward_window",
    "clip_gradients",
    "end_of_epoch_schedule",
    "sgd_update",
    "train",
    "load_checkpoint",
    "save_checkpoint",
    "EvalReport",
    "SweepResult",
    "alpha_sweep",
    "gradient_check",
    "long_dependency_probe",
    "order_sweep",
    "perplexity",
]

__version__ = "0.1.0"
