"""Multi-domain image classification with depthwise-separable convolutions.

Pointwise (1x1) filters are shared across domains while each domain keeps its
own depthwise filters, batch norm and classifier; a softmax gate can mix the
depthwise filters of all domains.
"""
from .errors import (ConfigError, DataError, DWShareError, FormatError, InvalidArgumentError,
                     NotApplicableError, NumericalError, RegistryError, ShapeError, StateError)
from .evalscore import (ParamReport, ScoreSpec, count_params, decathlon_score, emax_from_baseline,
                        forward_macs, test_error)
from .gating import Gate, GatedModel, RegionPlacement, attach_gates, gate_forward, train_gates
from .model import (DomainSpec, ModelConfig, SepResNet, add_domain, build_base, forward_domain, load, save,
                    with_sharing_mode)
from .optim import MomentumState, OptimConfig, lr_at, sgd_step
from .training import finetune_domain, pretrain_base

__version__ = "0.1.0"
