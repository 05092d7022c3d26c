"""Transfer-based adversarial attack toolkit with scoring and annotation tooling.

Subpackages cover the full desk-scale pipeline: dataset I/O, a small trained
model zoo, attack primitives and drivers (spatial and frequency domain),
machine scoring, human-annotation aggregation, and an HTTP annotation service.
"""

from advkit.data import ImageBatch, Perturbation, AttackConfig, load_dataset, save_images

__all__ = [
    "ImageBatch",
    "Perturbation",
    "AttackConfig",
    "load_dataset",
    "save_images",
]
