from .chain import (
    DEFAULT_DIFFICULTY,
    WEARABLE_ZONES,
    ZERO_HASH,
    Block,
    BlockHeader,
    BreakReason,
    BrokenAt,
    Origin,
    Transaction,
    TxKind,
    block_from_json,
    block_to_json,
    build_block,
    dump_chain,
    format_timestamp,
    load_chain,
    reseal,
    tamper_transaction,
    transaction_problem,
    verify_chain,
)
from .channel import (
    Channel,
    TraceHit,
    by_patient,
    channel_leaks,
    decode_payload,
    replicate_to_channel,
    telemetry_deviation,
    trace,
)
from .merkle import (
    MerkleTree,
    RollupLevel,
    RollupSignature,
    double_sha256,
    merkle_levels,
    merkle_root,
    patient_signature,
    rollup,
    sha256,
    sha256_hex,
)
