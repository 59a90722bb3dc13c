import hashlib
import random
import re

import numpy as np
import torch

from sgseg.__about__ import __name__ as prog_name, __version__ as version
from sgseg.exceptions import SGSegFormatException

_re_bits = re.compile(r"^\s*(?P<bits>[01]{6})\s*$")


def bits2str(bits):
    return "".join(str(int(b)) for b in bits)


def str2bits(str_bits):
    res = _re_bits.match(str_bits)
    if not res:
        raise SGSegFormatException(
            "Location label must be six binary digits: {!r}".format(str_bits)
        )

    return tuple(int(c) for c in res["bits"])


def seconds2strtime(seconds):
    seconds = int(seconds)
    return "{:02d}:{:02d}:{:02d}".format(
        seconds // 3600,  # hours
        (seconds % 3600) // 60,  # minutes
        seconds % 60,  # seconds
    )


def derive_seed(*parts):
    """Stable 32-bit seed derived from a sequence of integer parts."""
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def config_hash(mapping):
    lines = "\n".join(
        "{} = {}".format(key, mapping[key]) for key in sorted(mapping)
    )
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()[:12]


def provenance_line(mapping, seed):
    return "{} {} config={} seed={}".format(
        prog_name, version, config_hash(mapping), seed
    )


def seed_everything(seed, deterministic=False):
    random.seed(seed)
    np.random.seed(derive_seed(seed) % (2 ** 32))
    torch.manual_seed(seed)

    if deterministic:
        # single-threaded numeric mode
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
