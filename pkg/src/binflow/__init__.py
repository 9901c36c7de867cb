"""Large-displacement optical flow with binary descriptors.

Local matching through min-projected cost volumes (linear memory in the
search range), a decomposed-dual CRF solver with distance-transform
messages, and a small trainable descriptor extractor.
"""

from .costvol import (
    CostProjectionPair,
    SearchWindow,
    local_cost,
    min_project,
    projected_bytes,
    wta,
)
from .crf import (
    BoundTrace,
    CrfParams,
    DualState,
    EdgeWeights,
    RobustPenalty,
    chain_dt_message,
    contrast_weights,
    decode_primal,
    dmm_inplane,
    lower_bound,
    optimize,
    pass_u_to_v,
    pass_v_to_u,
    primal_energy,
    rho,
)
from .descriptors import (
    ThetaParams,
    census_transform,
    dot_cost,
    hamming_cost,
    load_descriptor_field,
    load_theta,
    quantize,
    tiny_extractor_forward,
    write_descriptor_field,
    write_theta,
)
from .io import (
    EpeStats,
    FormatError,
    endpoint_error,
    flow_to_color,
    load_image,
    read_flo,
    read_mask,
    write_flo,
    write_image,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
