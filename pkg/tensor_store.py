"""
Sparse COO tensor storage: loading, splitting, mode indices and batch sampling.

Indices are 1-based on disk and 0-based in memory. Three sampling regimes are
provided: a global permutation of all nonzeros, per-mode buckets keyed by the
fixed index i_n, and per-mode buckets keyed by the complement tuple of all other
indices.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

FIXED_MODE = "fixed-n"
FIXED_COMPLEMENT = "fixed-complement"
KEYINGS = (FIXED_MODE, FIXED_COMPLEMENT)

DIMS_HEADER = "# dims:"

# Data lines handed to numpy per parse call
CHUNK_LINES = 1 << 20


class TensorFormatError(ValueError):
    """Raised when a COO file or entry list is malformed."""


@dataclass
class SparseTensor:
    """
    Order-N sparse tensor in coordinate format.

    Attributes:
        indices: (nnz, N) int64 array of 0-based indices
        values: (nnz,) float64 array
        dims: per-mode dimensions I_1..I_N
    """

    indices: np.ndarray
    values: np.ndarray
    dims: Tuple[int, ...]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.indices.ndim != 2:
            self.indices = self.indices.reshape(-1, len(self.dims))

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def validate(self):
        """Check shape, bounds, finiteness and tuple distinctness."""
        if self.indices.shape != (self.nnz, self.order):
            raise TensorFormatError(
                f"indices have shape {self.indices.shape}, expected ({self.nnz}, {self.order})"
            )
        if self.nnz and (self.indices.min() < 0 or np.any(self.indices >= np.array(self.dims))):
            raise TensorFormatError("index outside the declared dims")
        if not np.all(np.isfinite(self.values)):
            raise TensorFormatError("values must be finite")
        if self.nnz != np.unique(self.indices, axis=0).shape[0]:
            raise TensorFormatError("duplicate index tuple")

    def subset(self, positions: np.ndarray) -> "SparseTensor":
        """Entries at the given positions, keeping the parent dims."""
        positions = np.asarray(positions, dtype=np.int64)
        return SparseTensor(self.indices[positions], self.values[positions], self.dims)


# ============================================================================
# TEXT FORMAT
# ============================================================================


def _parse_dims_header(line: str, lineno: int) -> Tuple[int, ...]:
    try:
        dims = tuple(int(tok) for tok in line[len(DIMS_HEADER):].split())
    except ValueError:
        raise TensorFormatError(f"line {lineno}: malformed dims header")
    if not dims or min(dims) < 1:
        raise TensorFormatError(f"line {lineno}: dims must be positive")
    return dims


def _locate_bad_line(block: List[str], linenos: np.ndarray, order: int) -> TensorFormatError:
    for line, lineno in zip(block, linenos):
        tokens = line.split()
        if len(tokens) != order + 1:
            return TensorFormatError(
                f"line {lineno}: expected {order} indices and a value, got {len(tokens)} tokens"
            )
        if not all(_is_int(t) for t in tokens[:order]):
            return TensorFormatError(f"line {lineno}: indices must be integers")
        if not _is_float(tokens[order]):
            return TensorFormatError(f"line {lineno}: value is not a real number")
    return TensorFormatError(f"lines {linenos[0]}-{linenos[-1]}: unparseable block")


def _parse_block(block: List[str], linenos: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    try:
        table = np.loadtxt(block, dtype=np.float64, comments=None, ndmin=2)
    except ValueError:
        raise _locate_bad_line(block, linenos, order) from None
    if table.shape[1] != order + 1:
        raise _locate_bad_line(block, linenos, order)
    raw = table[:, :order]
    integral = raw == np.floor(raw)
    if not np.all(integral):
        bad = int(np.flatnonzero(~integral.all(axis=1))[0])
        raise TensorFormatError(f"line {linenos[bad]}: indices must be integers")
    return raw.astype(np.int64), table[:, order]


def load_coo(path: Union[str, Path], order: int, chunk_lines: int = CHUNK_LINES) -> SparseTensor:
    """
    Load a whitespace-separated COO text file.

    Each data line holds `order` 1-based integer indices followed by one real value.
    Lines starting with '#' are comments; a first comment of the form
    `# dims: I_1 ... I_N` declares the dims instead of inferring per-mode maxima.
    Data lines are parsed by numpy in blocks of `chunk_lines`.

    Args:
        path: Path to the .tns file
        order: Expected tensor order N
        chunk_lines: Data lines per parsed block

    Returns:
        SparseTensor with 0-based indices
    """
    if order < 1:
        raise ValueError("order must be positive")
    if chunk_lines < 1:
        raise ValueError("chunk_lines must be positive")

    declared: Optional[Tuple[int, ...]] = None
    index_blocks: List[np.ndarray] = []
    value_blocks: List[np.ndarray] = []
    lineno_blocks: List[np.ndarray] = []
    block: List[str] = []
    block_linenos: List[int] = []

    def flush():
        linenos = np.array(block_linenos, dtype=np.int64)
        indices, values = _parse_block(block, linenos, order)
        index_blocks.append(indices)
        value_blocks.append(values)
        lineno_blocks.append(linenos)
        block.clear()
        block_linenos.clear()

    seen_data = False
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if not seen_data and declared is None and line.startswith(DIMS_HEADER):
                    declared = _parse_dims_header(line, lineno)
                continue
            seen_data = True
            block.append(line)
            block_linenos.append(lineno)
            if len(block) == chunk_lines:
                flush()
    if block:
        flush()

    if not index_blocks:
        raise TensorFormatError("empty tensor")
    if declared is not None and len(declared) != order:
        raise TensorFormatError(
            f"dims header declares order {len(declared)} but order {order} was requested"
        )

    indices = np.concatenate(index_blocks)
    values = np.concatenate(value_blocks)
    linenos = np.concatenate(lineno_blocks)
    del index_blocks, value_blocks, lineno_blocks

    nonpositive = np.flatnonzero(np.any(indices < 1, axis=1))
    if nonpositive.size:
        raise TensorFormatError(f"line {linenos[nonpositive[0]]}: index must be >= 1")
    finite = np.isfinite(values)
    if not np.all(finite):
        raise TensorFormatError(f"line {linenos[int(np.argmin(finite))]}: value is not finite")

    indices -= 1
    if declared is not None:
        over = np.flatnonzero(np.any(indices >= np.array(declared), axis=1))
        if over.size:
            raise TensorFormatError(f"line {linenos[over[0]]}: index exceeds declared dims")
        dims = declared
    else:
        dims = tuple(int(d) + 1 for d in indices.max(axis=0))

    _, first, inverse = np.unique(indices, axis=0, return_index=True, return_inverse=True)
    repeated = np.flatnonzero(first[inverse.reshape(-1)] != np.arange(indices.shape[0]))
    if repeated.size:
        raise TensorFormatError(f"line {linenos[repeated[0]]}: duplicate index tuple")

    tensor = SparseTensor(indices, values, dims)
    logger.info("Loaded %s: order %d, dims %s, nnz %d", path, order, dims, tensor.nnz)
    return tensor


def infer_order(path: Union[str, Path]) -> int:
    """Order declared by the dims header, else the token count of the first data line minus one."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(DIMS_HEADER):
                return len(_parse_dims_header(line, lineno))
            if line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 2:
                raise TensorFormatError(f"line {lineno}: expected indices and a value")
            return len(tokens) - 1
    raise TensorFormatError("empty tensor")


def _is_int(token: str) -> bool:
    try:
        int(token)
        return True
    except ValueError:
        return False


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def save_coo(tensor: SparseTensor, path: Union[str, Path], header: bool = True):
    """
    Write a tensor in the COO text format (1-based indices).

    Args:
        tensor: Tensor to write
        path: Destination path
        header: Write the `# dims:` header line
    """
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"{DIMS_HEADER} {' '.join(str(d) for d in tensor.dims)}\n")
        columns = [tensor.indices[:, n] + 1 for n in range(tensor.order)]
        fmt = " ".join(["%d"] * tensor.order) + " %.17g"
        np.savetxt(f, np.column_stack(columns + [tensor.values]), fmt=fmt)
    logger.info("Wrote %d entries to %s", tensor.nnz, path)


def split_train_test(
    tensor: SparseTensor, test_fraction: float, seed: int
) -> Tuple[SparseTensor, SparseTensor]:
    """
    Randomly partition the nonzeros into a train set and a test set.

    Args:
        tensor: Source tensor, at least two entries
        test_fraction: Share of entries in the test set, in (0, 1)
        seed: Random seed

    Returns:
        (train, test) tensors sharing the parent dims
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    if tensor.nnz < 2:
        raise ValueError("need at least two entries to split")

    n_test = round(test_fraction * tensor.nnz)
    perm = np.random.default_rng(seed).permutation(tensor.nnz)
    test_pos = np.sort(perm[:n_test])
    train_pos = np.sort(perm[n_test:])
    return tensor.subset(train_pos), tensor.subset(test_pos)


# ============================================================================
# BATCHES
# ============================================================================


@dataclass
class Batch:
    """A set Ψ of sampled nonzeros, given by their positions in the source tensor."""

    positions: np.ndarray
    indices: np.ndarray  # (m, N), 0-based
    values: np.ndarray  # (m,)

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class BatchWave:
    """
    Consecutive batches padded to M rows and stacked for joint evaluation.

    Padding rows reference index 0 of every mode, carry value 0 and are masked out.

    Attributes:
        indices: (W, M, N) int64
        values: (W, M, 1) float64
        mask: (W, M, 1) bool
        sizes: (W,) valid rows per batch
    """

    indices: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    sizes: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.indices.shape[1])

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])

    @property
    def rows(self) -> int:
        return int(self.sizes.sum())

    @classmethod
    def from_batches(cls, batches: Sequence[Batch], batch_size: int) -> "BatchWave":
        """Stack individual batches (each at most batch_size rows)."""
        order = batches[0].indices.shape[1]
        w = len(batches)
        indices = np.zeros((w, batch_size, order), dtype=np.int64)
        values = np.zeros((w, batch_size, 1), dtype=np.float64)
        mask = np.zeros((w, batch_size, 1), dtype=bool)
        sizes = np.zeros(w, dtype=np.int64)
        for b, batch in enumerate(batches):
            m = batch.size
            if m > batch_size:
                raise ValueError(f"batch of {m} rows exceeds batch size {batch_size}")
            indices[b, :m] = batch.indices
            values[b, :m, 0] = batch.values
            mask[b, :m, 0] = True
            sizes[b] = m
        return cls(indices, values, mask, sizes)


class BatchPlan(Sequence):
    """
    One epoch of batches over a tensor.

    Batches are stored as contiguous slices of a position array. `rounds` gives each
    batch's ordinal within its bucket (all zero for the global sampler) and `keys`
    the bucket id per batch (None for the global sampler).
    """

    def __init__(
        self,
        tensor: SparseTensor,
        positions: np.ndarray,
        offsets: np.ndarray,
        batch_size: int,
        rounds: Optional[np.ndarray] = None,
        buckets: Optional[np.ndarray] = None,
    ):
        self.tensor = tensor
        self.positions = positions
        self.offsets = offsets
        self.batch_size = batch_size
        n = len(offsets) - 1
        self.rounds = rounds if rounds is not None else np.zeros(n, dtype=np.int64)
        self.buckets = buckets

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, b: int) -> Batch:
        if b < 0:
            b += len(self)
        if not 0 <= b < len(self):
            raise IndexError(b)
        pos = self.positions[self.offsets[b]:self.offsets[b + 1]]
        return Batch(pos, self.tensor.indices[pos], self.tensor.values[pos])

    def wave(self, batch_ids: np.ndarray) -> BatchWave:
        """Gather the given batches into a padded wave."""
        batch_ids = np.asarray(batch_ids, dtype=np.int64)
        starts = self.offsets[batch_ids]
        sizes = self.offsets[batch_ids + 1] - starts
        slot = np.arange(self.batch_size)
        valid = slot[None, :] < sizes[:, None]
        gather = np.where(valid, starts[:, None] + slot[None, :], 0)
        pos = np.where(valid, self.positions[gather], 0)

        indices = self.tensor.indices[pos]
        indices[~valid] = 0
        values = np.where(valid, self.tensor.values[pos], 0.0)
        return BatchWave(indices, values[..., None], valid[..., None], sizes)


class KeyedBatchPlan(BatchPlan):
    """A per-bucket plan; items are (bucket key, Batch) pairs."""

    def __init__(self, index: "ModeIndex", *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.index = index

    def __getitem__(self, b: int) -> Tuple[Any, Batch]:
        batch = super().__getitem__(b)
        if b < 0:
            b += len(self)
        return self.index.key(int(self.buckets[b])), batch

    def __iter__(self) -> Iterator[Tuple[Any, Batch]]:
        for b in range(len(self)):
            yield self[b]


def sample_batches_global(tensor: SparseTensor, batch_size: int, seed: int) -> BatchPlan:
    """
    One epoch over the whole tensor: a random permutation cut into batches.

    Args:
        tensor: Source tensor
        batch_size: M
        seed: Random seed

    Returns:
        BatchPlan of ceil(nnz / M) batches; only the last may be short
    """
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    perm = np.random.default_rng(seed).permutation(tensor.nnz)
    offsets = np.append(np.arange(0, tensor.nnz, batch_size), tensor.nnz)
    return BatchPlan(tensor, perm, offsets, batch_size)


# ============================================================================
# MODE INDEX
# ============================================================================


@dataclass
class ModeIndex:
    """
    Buckets of entry positions for one mode.

    With fixed-n keying a bucket holds the entries sharing i_n; with fixed-complement
    keying it holds the entries sharing every index except i_n.

    Attributes:
        mode: 0-based mode n
        keying: FIXED_MODE or FIXED_COMPLEMENT
        key_values: (buckets,) or (buckets, N-1) array of bucket keys
        bucket_of_entry: (nnz,) bucket id per entry
        positions: entry positions grouped by bucket
        offsets: bucket boundaries into positions
    """

    mode: int
    keying: str
    key_values: np.ndarray
    bucket_of_entry: np.ndarray
    positions: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.offsets) - 1

    @property
    def bucket_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def key(self, bucket: int):
        value = self.key_values[bucket]
        if self.keying == FIXED_MODE:
            return int(value)
        return tuple(int(v) for v in value)

    def bucket(self, bucket: int) -> np.ndarray:
        return self.positions[self.offsets[bucket]:self.offsets[bucket + 1]]

    @property
    def buckets(self) -> dict:
        """Map from bucket key to entry positions."""
        return {self.key(b): self.bucket(b) for b in range(len(self))}


def _check_mode(tensor: SparseTensor, mode: int):
    if not 0 <= mode < tensor.order:
        raise ValueError(f"mode {mode} out of range for order {tensor.order}")


def build_mode_index(tensor: SparseTensor, mode: int, keying: str = FIXED_MODE) -> ModeIndex:
    """
    Group a tensor's entries into buckets for one mode.

    Args:
        tensor: Source tensor
        mode: 0-based mode
        keying: FIXED_MODE or FIXED_COMPLEMENT

    Returns:
        ModeIndex
    """
    _check_mode(tensor, mode)
    if keying == FIXED_MODE:
        key_values, inverse = np.unique(tensor.indices[:, mode], return_inverse=True)
    elif keying == FIXED_COMPLEMENT:
        rest = np.delete(tensor.indices, mode, axis=1)
        key_values, inverse = np.unique(rest, axis=0, return_inverse=True)
    else:
        raise ValueError(f"unknown keying '{keying}'")
    inverse = inverse.reshape(-1)

    positions = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(key_values))
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return ModeIndex(mode, keying, key_values, inverse, positions, offsets)


def sample_batches_mode(
    tensor: SparseTensor,
    index: ModeIndex,
    mode: int,
    batch_size: int,
    seed: int,
    keying: str = FIXED_MODE,
) -> KeyedBatchPlan:
    """
    One epoch of per-bucket batches for a mode.

    Bucket keys are visited in shuffled order; each bucket's entries are shuffled and
    cut into batches of at most M, so buckets smaller than M yield short batches.

    Args:
        tensor: Source tensor
        index: ModeIndex built for this mode and keying
        mode: 0-based mode
        batch_size: M
        seed: Random seed
        keying: FIXED_MODE or FIXED_COMPLEMENT

    Returns:
        KeyedBatchPlan whose items are (bucket key, Batch)
    """
    _check_mode(tensor, mode)
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    if index.mode != mode or index.keying != keying:
        raise ValueError(
            f"index built for mode {index.mode} ({index.keying}), "
            f"requested mode {mode} ({keying})"
        )

    rng = np.random.default_rng(seed)
    n_buckets = len(index)
    bucket_order = rng.permutation(n_buckets)
    rank_of_bucket = np.empty(n_buckets, dtype=np.int64)
    rank_of_bucket[bucket_order] = np.arange(n_buckets)

    positions = np.lexsort((rng.random(tensor.nnz), rank_of_bucket[index.bucket_of_entry]))

    sizes = index.bucket_sizes[bucket_order]
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    per_bucket = -(-sizes // batch_size)
    owner = np.repeat(np.arange(n_buckets), per_bucket)
    first_batch = np.cumsum(per_bucket) - per_bucket
    rounds = np.arange(owner.shape[0]) - first_batch[owner]
    offsets = np.append(starts[owner] + rounds * batch_size, tensor.nnz)

    return KeyedBatchPlan(
        index,
        tensor,
        positions,
        offsets,
        batch_size,
        rounds=rounds,
        buckets=bucket_order[owner],
    )
