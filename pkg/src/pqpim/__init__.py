"""Product-quantized KV-cache compression and an HBM-PIM performance model.

The quantization stack (importance-weighted product quantization with
channel pre-sorting and page-aware windowed codebooks, plus attention
that runs directly on the compressed representation) lives alongside a
command-level simulator of the bank/buffer-die PIM architecture that the
compressed layout was shaped for.
"""

from .arch import (
    AddressMap,
    Energies,
    GpuModel,
    MemoryLayout,
    ModelDims,
    PimConfig,
    Placement,
    Timings,
    allocate,
    plan_placement,
)
from .attention import AttentionOutput, attention_fidelity, exact_attention, pq_attention
from .channelsort import ChannelPermutation, absorb_permutation, sort_channels
from .engine import SimReport, dump_trace, simulate, validate_trace
from .errors import (
    CapacityError,
    ConfigError,
    DimensionError,
    FormatError,
    PqPimError,
    ProtocolError,
    TruncatedFileError,
)
from .kmeans import reference_kmeans, weighted_kmeans, weighted_kmeans_warm
from .kvstore import (
    KvDump,
    SyntheticSpec,
    generate_synthetic_kv,
    load_kv_dump,
    write_kv_dump,
)
from .quantizer import (
    Codebook,
    CompressedKv,
    PqConfig,
    PqIndices,
    append_decode_token,
    build_compressed_kv,
    compression_factor,
    compute_importance_weights,
    load_compressed,
    quantization_error,
    reconstruct,
    save_compressed,
)
from .scenarios import Scenario, Workload, reports_to_csv, run_scenario, sweep
from .trace import (
    CommandTrace,
    PimCommand,
    trace_attacc_attention,
    trace_codebook_generation,
    trace_decode_attention,
)

__version__ = "0.1.0"
