import json
import math
import hashlib
from fractions import Fraction


### Exceptions
class APIUsageError(RuntimeError):
    """Exception raised when the API is used incorrectly."""

    def __init__(self, message="API usage error."):
        self.message = message
        super().__init__(self.message)

class ConfigError(APIUsageError):
    '''Malformed configuration or unusable output target at the CLI surface'''

class NonInvertibleError(ArithmeticError):
    def __init__(self, value, modulus):
        self.value = value
        self.modulus = modulus
        super().__init__(f'non-invertible element: {value} mod {modulus}')

class DecodingError(ValueError):
    """Exception raised when a set of task results cannot be decoded."""

class MissingMiniJobError(KeyError):
    """Exception raised when a resolution is assembled without all its mini-jobs."""

    def __init__(self, layer, i, j):
        self.layer = layer
        self.i = i
        self.j = j
        self.message = f'Missing mini-job result (layer={layer}, i={i}, j={j})'
        super().__init__(self.message)

    def __str__(self):
        return self.message

class UnstableQueueError(ValueError):
    def __init__(self, rho):
        self.rho = rho
        super().__init__(f'unstable queue: rho={rho:.6f} >= 1')


### Misc
def unroll_nested_dict(d):
    if not isinstance(d, dict):
        return d

    for k, v in d.items():
        if isinstance(v, dict):
            for k2, v2 in unroll_nested_dict(v):
                yield f"{k}/{k2}", v2
        else:
            yield k, v

def round_half_up(value):
    '''Rounds a decimal knob like 1000*1.06 exactly. Floats go through their
    shortest repr so 1.06 is treated as 106/100, not its binary expansion'''
    if not isinstance(value, Fraction):
        value = Fraction(str(value))
    return math.floor(value + Fraction(1, 2))

def config_hash(config, exclude=('output',)):
    '''Stable SHA-256 over the resolved nested config'''
    filtered = {k: v for k, v in config.items() if k not in exclude}
    blob = json.dumps(filtered, sort_keys=True, default=str, separators=(',', ':'))
    return hashlib.sha256(blob.encode()).hexdigest()
