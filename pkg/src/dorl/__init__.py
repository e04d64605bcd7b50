"""Domain-invariant representations for cross-domain blood cell classification.

Subpackages and modules:

* ``dorl.core``        autograd tensors, AdamW, seeded streams, checkpoints
* ``dorl.vit``         patch-token ViT backbone and model profiles
* ``dorl.lora_seg``    frozen backbone + LoRA adapters + mask decoder
* ``dorl.cae``         cross-domain masked autoencoder and its three losses
* ``dorl.classifiers`` RF, boosting, SVMs, logistic regression, MLP
* ``dorl.synthcells``  synthetic multi-domain benchmark and dataset format
* ``dorl.harness``     config, splits, cached pipeline, ablation, sweep
"""
from .errors import (ConfigError, ContractError, DataError, DorlError, ModelStateError,
                     NumericError, ParseError, ShapeError, StageError, StratificationError,
                     UnsupportedOpError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DataError", "DorlError", "ModelStateError",
           "NumericError", "ParseError", "ShapeError", "StageError", "StratificationError",
           "UnsupportedOpError", "__version__"]
