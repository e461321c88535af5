"""Adversarial-variational filtering for prognostics.

A sequential latent-variable model for condition-monitoring data: a
recurrent recognition network filters sensor trajectories into latent
state beliefs, a generative network scores them, and a latent-space
discriminator regularizes the recognition distribution toward the
model's own prior dynamics.  Remaining useful life is read out either
from a supervised regression head or from an unsupervised health index
built in latent space.
"""

__version__ = "0.1.0"

from . import data, diffcore, evalcli, model, objectives, rng, training

__all__ = [
    "data",
    "diffcore",
    "evalcli",
    "model",
    "objectives",
    "rng",
    "training",
    "__version__",
]
