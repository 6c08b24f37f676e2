"""Architecture-agnostic federated MRI reconstruction with a site-prompted
multi-scale autoregressive prior (numpy reference implementation)."""

__version__ = "0.1.0"

from .codec import CodecConfig, MultiScaleVQCodec, TokenPyramid
from .exceptions import ConfigError, ContractError, FedPriorError, FormatError, ShapeError, TrainingError
from .recon import ArchSpec, ReconstructionModel, ReconSet
from .transformer import PriorConfig, PriorModel, SitePromptedPrior

__all__ = [
    "__version__",
    "ArchSpec",
    "CodecConfig",
    "ConfigError",
    "ContractError",
    "FedPriorError",
    "FormatError",
    "MultiScaleVQCodec",
    "PriorConfig",
    "PriorModel",
    "ReconSet",
    "ReconstructionModel",
    "ShapeError",
    "SitePromptedPrior",
    "TokenPyramid",
    "TrainingError",
]
