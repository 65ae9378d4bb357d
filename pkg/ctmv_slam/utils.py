import json
import logging
import math
import time
import warnings

import numpy as np

logger = logging.getLogger(__name__)


def warn(message, warning=RuntimeWarning, when="always"):
    def warning_on_one_line(
        message, category, filename, lineno, file=None, line=None
    ):  # pylint: disable=unused-argument
        return "%s: %s" % (category.__name__, message)

    warn_format = warnings.formatwarning
    warnings.formatwarning = warning_on_one_line
    warnings.simplefilter(when, warning)
    warnings.warn(message + "\n", warning)
    warnings.formatwarning = warn_format
    warnings.simplefilter("ignore", warning)


#
# Timer class
#


class Timer:
    def __init__(self, timeit, name, activity, level=0):
        if isinstance(timeit, bool):
            self.timeit = 99 if timeit else -1
        else:
            self.timeit = timeit
        self.activity = activity
        self.name = name
        self.level = level
        self.info = ""
        self.start = time.perf_counter()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        if self.level <= self.timeit:
            prefix = ""
            if self.level > 0:
                prefix += "| " * self.level

            name = f'"{self.name}"' if self.name != "" else ""

            logger.info(
                "%8.3f sec: %s%s %s %s",
                time.perf_counter() - self.start,
                prefix,
                self.activity,
                name,
                self.info,
            )

    @property
    def elapsed(self):
        return time.perf_counter() - self.start


#
# Binary descriptors
#

POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

DESCRIPTOR_BYTES = 32


def hamming(a, b):
    """Hamming distance of two 32 byte descriptors"""
    return int(POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(descs_a, descs_b):
    """All pairwise Hamming distances, shape (len(descs_a), len(descs_b))"""
    a = np.asarray(descs_a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    b = np.asarray(descs_b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int32)

    result = np.empty((len(a), len(b)), dtype=np.int32)
    # chunked to keep the (n, m, 32) xor buffer small
    step = max(1, 65536 // max(1, len(b)))
    for start in range(0, len(a), step):
        x = np.bitwise_xor(a[start : start + step, None, :], b[None, :, :])
        result[start : start + step] = POPCOUNT[x].sum(axis=2, dtype=np.int32)
    return result


def descriptor_to_hex(desc):
    return bytes(np.asarray(desc, dtype=np.uint8)).hex()


def hex_to_descriptor(text):
    raw = bytes.fromhex(text)
    if len(raw) != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor has {len(raw)} bytes, expected {DESCRIPTOR_BYTES}")
    return np.frombuffer(raw, dtype=np.uint8).copy()


#
# Helpers
#


def median_time(times):
    """Median of capture times, mean of the two middle values for even counts"""
    return float(np.median(np.asarray(times, dtype=float)))


def rad(deg):
    return deg * math.pi / 180.0


#
# Serialisation
#


def numpy_to_json(obj, indent=None):
    class NumpyArrayEncoder(json.JSONEncoder):
        def default(self, o):
            if isinstance(o, np.integer):
                return int(o)
            if isinstance(o, np.floating):
                return float(o)
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (set, frozenset)):
                return sorted(o)

            return super(NumpyArrayEncoder, self).default(o)

    return json.dumps(obj, cls=NumpyArrayEncoder, indent=indent)
