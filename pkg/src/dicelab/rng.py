"""Counter-based uniform generator shared by the numba and numpy sampling paths.

Algorithm (fixed, so datasets are reproducible across platforms and backends):

* ``mix64`` is the SplitMix64 output function (Steele, Lea & Flood 2014).
* A stream key for ``(seed, stream)`` is
  ``mix64(mix64(seed + GOLDEN) ^ (stream * STREAM_MULT))``.
* Draw number ``c`` of a stream is ``mix64(key + (c + 1) * GOLDEN) >> 11``
  scaled by ``2**-53``, i.e. a double in ``[0, 1)``.

Every draw is a pure function of ``(seed, stream, counter)``, so any trajectory
can be regenerated independently of the others. The scalar functions are
jitted for use inside kernels; the ``*_array`` variants are their vectorised
numpy twins and produce bitwise-identical values.
"""
import numpy as np

from dicelab._accel import jit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
STREAM_MULT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0

MASK64 = (1 << 64) - 1


@jit
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@jit
def stream_key(seed, stream):
    seed = np.uint64(seed)
    stream = np.uint64(stream)
    return mix64(mix64(seed + GOLDEN) ^ (stream * STREAM_MULT))


@jit
def uniform(key, counter):
    key = np.uint64(key)
    counter = np.uint64(counter)
    z = mix64(key + (counter + _ONE) * GOLDEN)
    return float(z >> _S11) * _INV53


def as_seed(seed):
    """Validate a user seed and return it as ``np.uint64``."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ValueError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.uint64(seed)


def mix64_array(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def stream_key_array(seed, streams):
    streams = np.asarray(streams, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = mix64_array(np.full(streams.shape, as_seed(seed)) + GOLDEN)
        return mix64_array(base ^ (streams * STREAM_MULT))


def uniform_array(keys, counters):
    """Draws ``counters`` of streams ``keys`` (broadcast against each other)."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = mix64_array(keys + (counters + _ONE) * GOLDEN)
    return (z >> _S11).astype(np.float64) * _INV53
