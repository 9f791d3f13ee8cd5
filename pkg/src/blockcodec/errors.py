"""Exception types shared across the codec."""


class BlockCodecError(Exception):
    """Base class for all errors raised by this package."""


class NonFiniteError(BlockCodecError):
    """A numeric operation produced NaN or Inf."""


class BitstreamError(BlockCodecError):
    """Malformed, truncated, or otherwise undecodable bitstream."""


class ChecksumMismatch(BitstreamError):
    """Bitstream was produced with a different model than the one loaded."""


class TrainingDiverged(BlockCodecError):
    """Training loss became non-finite; last good state was checkpointed."""
