"""Knowledge-distillation toolkit with a Gompertz-curve distillation-weight schedule.

The training objective combines four terms: hard-label cross-entropy,
a Wasserstein-1 distance between teacher and student activation
distributions, a gradient-matching penalty on the pre-classifier
gradients, and a temperature-softened KL distillation term. The weight
multiplying the distillation bundle follows a Gompertz growth curve
over epochs (slow start, rapid mid-training rise, saturation).
"""

from gompertz_kd.schedule import ConstantSchedule, GompertzSchedule
from gompertz_kd.losses import (
    ChannelAdapter,
    LossBreakdown,
    classification_loss,
    cosine_gradient_similarity,
    distillation_loss,
    euclidean_gradient_distance,
    gradient_matching_loss,
    ot_lp_oracle,
    total_loss,
    wasserstein_feature_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelAdapter",
    "ConstantSchedule",
    "GompertzSchedule",
    "LossBreakdown",
    "classification_loss",
    "cosine_gradient_similarity",
    "distillation_loss",
    "euclidean_gradient_distance",
    "gradient_matching_loss",
    "ot_lp_oracle",
    "total_loss",
    "wasserstein_feature_loss",
    "__version__",
]
