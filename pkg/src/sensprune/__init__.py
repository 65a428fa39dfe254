"""Sensitivity-based pruning of feed-forward networks with relative error certificates."""

from .allocate import AllocationPlan, group_error, magnitude_masks, opt_alloc, sipp_simple
from .bounds import (PruneCertificate, layer_certificate, layer_condition, network_certificate,
                     propagation_bound, sign_complexity)
from .net import (ForwardTrace, LayerSpec, Network, extract_patches, forward, frobenius_norm,
                  predict, quadrant_split)
from .sensitivity import (RegularityConstants, SensitivityTable, empirical_sensitivity,
                          layer_sensitivities, relative_importance, sample_set_size)
from .sparsify import (PrunedGroup, eps_rand, expected_draws, sipp_det, sipp_hybrid,
                       sipp_rand)

__version__ = "0.1.0"
