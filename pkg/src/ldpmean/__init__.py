"""Communication-efficient locally differentially private mean estimation.

Clients project unit vectors to a random low-dimensional subspace, privatize
there with the PrivUnitG randomizer, and send the result plus a seed-encoded
transform; servers reconstruct with adjoint transforms. Includes correlated
transforms for fast aggregation, unbiased variants, a Gaussian-mechanism
baseline, a benchmark CLI (``bench``), and a DP-SGD demo (``dpsgd``).
"""

from .baselines import GaussianMechanismConfig, gaussian_randomize
from .privunitg import (ErrorConstantEstimate, PrivUnitGParams, compute_m,
                        estimate_error_constant, optimize_params, privacy_audit,
                        randomize, sample_trunc_gauss)
from .protocol import (ClientMessage, CorrelatedConfig, MessageVariant,
                       ServerEstimate, bit_cost, correlated_client,
                       correlated_server, deserialize, direct_privunitg_client,
                       nearly_unbiased_client, nearly_unbiased_server,
                       projunit_client, projunit_server, serialize,
                       unbiased_rotation_client)
from .transforms import (EncodingMode, EnsembleDiagnostics, LinearTransform,
                         TransformKind, TransformSpec, decode_transform,
                         encode_transform, fwht, measure_diagnostics,
                         sample_gaussian, sample_rotation, sample_srht,
                         sample_without_replacement)

__version__ = "0.1.0"

__all__ = [
    "ClientMessage", "CorrelatedConfig", "EncodingMode", "EnsembleDiagnostics",
    "ErrorConstantEstimate", "GaussianMechanismConfig", "LinearTransform",
    "MessageVariant", "PrivUnitGParams", "ServerEstimate", "TransformKind",
    "TransformSpec", "bit_cost", "compute_m", "correlated_client",
    "correlated_server", "decode_transform", "deserialize",
    "direct_privunitg_client", "encode_transform", "estimate_error_constant",
    "fwht", "gaussian_randomize", "measure_diagnostics",
    "nearly_unbiased_client", "nearly_unbiased_server", "optimize_params",
    "privacy_audit", "projunit_client", "projunit_server", "randomize",
    "sample_gaussian", "sample_rotation", "sample_srht",
    "sample_trunc_gauss", "sample_without_replacement", "serialize",
    "unbiased_rotation_client",
]
