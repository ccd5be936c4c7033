"""Gray-box adversarial attacks on image-to-text models through the image encoder."""

from .attack import adam_step, clamp_domain, project_linf, run_attack, scheduler_step
from .objectives import (
    ObjectiveSpec,
    cosine_similarity,
    sim_loss,
    targeted_cs_loss,
    total_loss,
    untargeted_cs_loss,
)
from .types import (
    AttackConfig,
    AttackResult,
    Embedding,
    ImageTensor,
    RunManifest,
    to_byte_domain,
    to_unit_domain,
    validate_config,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Embedding",
    "ImageTensor",
    "ObjectiveSpec",
    "RunManifest",
    "adam_step",
    "clamp_domain",
    "cosine_similarity",
    "project_linf",
    "run_attack",
    "scheduler_step",
    "sim_loss",
    "targeted_cs_loss",
    "to_byte_domain",
    "to_unit_domain",
    "total_loss",
    "untargeted_cs_loss",
    "validate_config",
]
