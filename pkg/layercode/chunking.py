'''Digit-chunk layering of integer operands.

Each entry of A and B is written in base q**d with m digits. The product
A^T B then splits into m*m mini-jobs A_i^T B_j weighted by q**((i+j)d),
grouped into L = 2m - 1 resolution layers by i + j, most significant first.'''

import math
from collections import namedtuple

import numpy as np

from layercode import APIUsageError, MissingMiniJobError
from layercode.field import is_prime

INT64_BITS = 62


MiniJob = namedtuple('MiniJob', ['layer', 'i', 'j', 'weight_exponent'])


class ChunkParams:
    def __init__(self, q=2, d=8, m=2):
        if not is_prime(q):
            raise APIUsageError(f'Alphabet base q={q} must be prime')
        if d < 1:
            raise APIUsageError(f'Chunk width d={d} must be positive')
        if m < 1:
            raise APIUsageError(f'Chunk count m={m} must be positive')

        self.q = q
        self.d = d
        self.m = m

    @property
    def base(self):
        return self.q ** self.d

    @property
    def num_layers(self):
        return 2*self.m - 1

    @property
    def element_bound(self):
        return self.q ** (self.m * self.d)

    def accumulator_dtype(self, inner_dim):
        '''Width needed by an exact resolution: 2md bits plus log2(n) guard bits'''
        bits = 2 * self.m * self.d * math.log2(self.q) + math.ceil(math.log2(max(inner_dim, 2)))
        return np.int64 if bits <= INT64_BITS else object

    def __repr__(self):
        return f'ChunkParams(q={self.q}, d={self.d}, m={self.m})'


class ChunkedOperand:
    def __init__(self, chunks, shape):
        self.chunks = chunks
        self.shape = shape

    @property
    def m(self):
        return len(self.chunks)

    def __getitem__(self, i):
        return self.chunks[i]


def _integer_array(matrix, bound):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise APIUsageError(f'Operand must be 2-D, got shape {matrix.shape}')
    if bound > 2**62 or matrix.dtype == object:
        return matrix.astype(object)
    return matrix.astype(np.int64)

def decompose(matrix, params):
    matrix = _integer_array(matrix, params.element_bound)
    if matrix.size and (matrix.min() < 0 or matrix.max() >= params.element_bound):
        raise APIUsageError(
            f'Entries must lie in [0, {params.q}**{params.m * params.d}) to split into {params.m} chunks')

    base = params.base
    chunks = []
    rest = matrix.copy()
    for _ in range(params.m):
        chunks.append(np.mod(rest, base))
        rest = rest // base

    return ChunkedOperand(chunks, matrix.shape)

def recompose(chunked, params):
    dtype = chunked.chunks[0].dtype
    out = np.zeros(chunked.shape, dtype=dtype)
    for i in reversed(range(chunked.m)):
        out = out * params.base + chunked.chunks[i]
    return out


### Layers
def layer_size(l, m):
    return min(l + 1, 2*m - 1 - l)

def layer_sizes(m):
    return [layer_size(l, m) for l in range(2*m - 1)]

def cumulative_fraction(l, m):
    '''Share of the full job's mini-jobs needed for resolution l'''
    return sum(layer_sizes(m)[:l + 1]) / m**2

def mini_jobs_of_layer(l, m, d=1):
    if not 0 <= l <= 2*m - 2:
        raise APIUsageError(f'Layer {l} out of range [0, {2*m - 2}] for m={m}')

    total = (2*m - 2) - l
    hi = min(m - 1, total)
    lo = max(0, total - (m - 1))
    return [MiniJob(l, i, total - i, total * d) for i in range(hi, lo - 1, -1)]

def all_mini_jobs(m, d=1):
    return [job for l in range(2*m - 1) for job in mini_jobs_of_layer(l, m, d)]

def mini_job_operands(a_chunks, b_chunks, job):
    return a_chunks[job.i], b_chunks[job.j]


class LayeredAccumulator:
    '''Running sum of weighted mini-job products, one layer at a time'''
    def __init__(self, params, shape, inner_dim=1, dtype=None):
        self.params = params
        dtype = params.accumulator_dtype(inner_dim) if dtype is None else dtype
        self.partial = np.zeros(shape, dtype=dtype)
        self.completed_layers = 0

    def absorb(self, layer, results):
        if layer != self.completed_layers:
            raise APIUsageError(
                f'Layers are absorbed in order: expected {self.completed_layers}, got {layer}')

        results = _by_index(results)
        params = self.params
        dtype = self.partial.dtype
        for job in mini_jobs_of_layer(layer, params.m, params.d):
            key = (job.i, job.j)
            if key not in results:
                raise MissingMiniJobError(layer, job.i, job.j)

            product = np.asarray(results[key]).astype(dtype)
            self.partial = self.partial + product * params.q**job.weight_exponent

        self.completed_layers += 1
        return self.partial

    def resolution(self):
        return self.partial.copy()


def _by_index(results):
    '''Accepts results keyed by MiniJob or by (i, j)'''
    return {(k.i, k.j) if isinstance(k, MiniJob) else tuple(k): v for k, v in results.items()}

def _assembly_dtype(results, params):
    values = [np.asarray(v) for v in results.values()]
    if any(v.dtype == object for v in values):
        return object

    largest = max(int(v.max(initial=0)) for v in values)
    bits = (largest + 1).bit_length() + (2*params.m - 2)*params.d*math.log2(params.q) + 2*math.log2(params.m) + 1
    return np.int64 if bits <= INT64_BITS else object

def resolution_assemble(results, l, params):
    if not 0 <= l <= params.num_layers - 1:
        raise APIUsageError(f'Layer {l} out of range for {params}')

    results = _by_index(results)
    if not results:
        first = mini_jobs_of_layer(0, params.m)[0]
        raise MissingMiniJobError(first.layer, first.i, first.j)

    shape = np.shape(next(iter(results.values())))
    accumulator = LayeredAccumulator(params, shape, dtype=_assembly_dtype(results, params))
    for layer in range(l + 1):
        accumulator.absorb(layer, results)

    return accumulator.resolution()

def integer_product(a, b):
    '''Exact A^T B over the integers'''
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != object and b.dtype != object:
        bits = (int(np.abs(a).max(initial=0)).bit_length() + int(np.abs(b).max(initial=0)).bit_length()
            + max(a.shape[0], 1).bit_length())
        if bits <= INT64_BITS:
            return a.T.astype(np.int64) @ b.astype(np.int64)

    return np.dot(a.T.astype(object), b.astype(object))
