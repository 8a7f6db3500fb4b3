"""Compositional meta-learning with modular recurrent networks inferred by particle filtering."""

__version__ = "0.1.0"

from .model import CompositionalModel, ModelConfig, load_model, save_model  # noqa: E402
from .smc import run_filter, training_loss  # noqa: E402
from .tasks import Episode, gen_episode, make_split  # noqa: E402
from .train import TrainConfig, train_primary  # noqa: E402

__all__ = ["CompositionalModel", "ModelConfig", "load_model", "save_model", "run_filter", "training_loss",
           "Episode", "gen_episode", "make_split", "TrainConfig", "train_primary"]
