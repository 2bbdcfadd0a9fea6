'''Prime-field arithmetic and dense matrices over Z_p.

Residues are int64 numpy arrays while products fit in a machine word and
Python-int object arrays past that. Every public function here is pure.'''

import numpy as np

from layercode import APIUsageError, NonInvertibleError

# Deterministic for every n < 3.3e24, which covers all 64-bit inputs
MILLER_RABIN_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
INT64_MAX = 2**63 - 1

# Below this a product of two residues fits in int64
WORD_PRIME_LIMIT = 2**31


def is_prime(n):
    if n < 2:
        return False

    for w in MILLER_RABIN_WITNESSES:
        if n % w == 0:
            return n == w

    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1

    for a in MILLER_RABIN_WITNESSES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False

    return True


class FieldPrime:
    __slots__ = ('p',)

    def __init__(self, p):
        p = int(p)
        if not is_prime(p):
            raise APIUsageError(f'Field modulus {p} is not prime')
        object.__setattr__(self, 'p', p)

    def __setattr__(self, name, value):
        raise AttributeError('FieldPrime is immutable')

    def __eq__(self, other):
        return isinstance(other, FieldPrime) and other.p == self.p

    def __hash__(self):
        return hash(self.p)

    def __repr__(self):
        return f'FieldPrime({self.p})'

    @property
    def dtype(self):
        return np.int64 if self.p < WORD_PRIME_LIMIT else object

    def check_points(self, num_points):
        if self.p <= num_points:
            raise APIUsageError(
                f'Field Z_{self.p} has too few nonzero elements for {num_points} distinct evaluation points')


def find_prime_above(bound):
    if bound < 2:
        raise APIUsageError(f'bound must be >= 2, got {bound}')

    candidate = int(bound) + 1
    if candidate > 2 and candidate % 2 == 0:
        candidate += 1
    while not is_prime(candidate):
        candidate += 1 if candidate == 2 else 2

    return FieldPrime(candidate)


def coding_prime(inner_dim, chunk_base, num_points):
    '''Smallest prime that keeps every mini-job product exact and leaves room
    for num_points distinct nonzero evaluation points'''
    bound = max(inner_dim * (chunk_base - 1)**2, num_points, 2)
    return find_prime_above(bound)


### Scalar arithmetic
def _check(a, modulus, *rest):
    p = modulus.p
    for v in (a, *rest):
        if not 0 <= v < p:
            raise APIUsageError(f'{v} is not a residue of Z_{p}')

def ff_add(a, b, modulus):
    _check(a, modulus, b)
    return (a + b) % modulus.p

def ff_sub(a, b, modulus):
    _check(a, modulus, b)
    return (a - b) % modulus.p

def ff_mul(a, b, modulus):
    _check(a, modulus, b)
    return (a * b) % modulus.p

def ff_inv(a, modulus):
    _check(a, modulus)
    if a == 0:
        raise NonInvertibleError(a, modulus.p)

    return pow(int(a), -1, modulus.p)


### Matrix arithmetic
def _as_residues(array, modulus):
    array = np.asarray(array)
    if modulus.dtype is object or array.dtype == object:
        return np.mod(array.astype(object), modulus.p).astype(modulus.dtype)

    return np.mod(array.astype(np.int64), modulus.p)

def matmul_mod(x, y, p):
    '''(x @ y) mod p without int64 overflow. x, y hold residues in [0, p)'''
    inner = x.shape[1]
    if x.dtype == object or y.dtype == object or p >= WORD_PRIME_LIMIT:
        return np.mod(np.dot(x.astype(object), y.astype(object)), p)

    worst = (p - 1)**2
    if worst == 0 or inner * worst <= INT64_MAX:
        return np.mod(x @ y, p)

    # Block the inner dimension so each partial sum fits before reduction
    step = max(1, INT64_MAX // worst - 1)
    out = np.zeros((x.shape[0], y.shape[1]), dtype=np.int64)
    for start in range(0, inner, step):
        end = min(inner, start + step)
        out = np.mod(out + np.mod(x[:, start:end] @ y[start:end], p), p)

    return out


class FieldMatrix:
    '''Dense immutable matrix over Z_p'''
    __slots__ = ('values', 'modulus')

    def __init__(self, values, modulus):
        values = np.asarray(values)
        if values.ndim != 2:
            raise APIUsageError(f'FieldMatrix needs a 2-D array, got shape {values.shape}')
        if values.size and (values.min() < 0 or values.max() >= modulus.p):
            raise APIUsageError(f'Entries must be residues in [0, {modulus.p})')

        values = values.astype(modulus.dtype, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'modulus', modulus)

    def __setattr__(self, name, value):
        raise AttributeError('FieldMatrix is immutable')

    @classmethod
    def from_array(cls, array, modulus):
        '''Reduces arbitrary integers mod p'''
        return cls(_as_residues(array, modulus), modulus)

    @classmethod
    def zeros(cls, rows, cols, modulus):
        return cls(np.zeros((rows, cols), dtype=modulus.dtype), modulus)

    @classmethod
    def identity(cls, n, modulus):
        return cls(np.eye(n, dtype=np.int64).astype(modulus.dtype), modulus)

    @classmethod
    def random(cls, rows, cols, modulus, rng, high=None):
        high = modulus.p if high is None else min(high, modulus.p)
        if high <= 2**62:
            return cls(rng.integers(0, high, size=(rows, cols)), modulus)

        values = np.empty((rows, cols), dtype=object)
        for idx in np.ndindex(rows, cols):
            values[idx] = int.from_bytes(rng.bytes(16), 'little') % high
        return cls(values, modulus)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def entries(self):
        '''Row-major residues'''
        return [int(v) for v in self.values.ravel()]

    def to_numpy(self):
        return np.array(self.values)

    def _same_field(self, other):
        if self.modulus != other.modulus:
            raise APIUsageError(f'Modulus mismatch: {self.modulus} vs {other.modulus}')

    def __add__(self, other):
        self._same_field(other)
        if self.shape != other.shape:
            raise APIUsageError(f'Shape mismatch: {self.shape} vs {other.shape}')
        return FieldMatrix(np.mod(self.values + other.values, self.modulus.p), self.modulus)

    def scale(self, c):
        c = int(c) % self.modulus.p
        return FieldMatrix(np.mod(self.values * c, self.modulus.p), self.modulus)

    def hsplit(self, n):
        if self.cols % n != 0:
            raise APIUsageError(f'{self.cols} columns do not split into {n} equal blocks')
        return [FieldMatrix(block, self.modulus) for block in np.hsplit(self.values, n)]

    def pad_cols(self, multiple):
        extra = (-self.cols) % multiple
        if extra == 0:
            return self
        pad = np.zeros((self.rows, extra), dtype=self.values.dtype)
        return FieldMatrix(np.hstack([self.values, pad]), self.modulus)

    def __eq__(self, other):
        if not isinstance(other, FieldMatrix):
            return NotImplemented
        return (self.modulus == other.modulus and self.shape == other.shape
            and bool(np.all(self.values == other.values)))

    __hash__ = None

    def __repr__(self):
        return f'FieldMatrix({self.rows}x{self.cols} over Z_{self.modulus.p})'


def hstack(blocks):
    modulus = blocks[0].modulus
    for b in blocks:
        if b.modulus != modulus:
            raise APIUsageError('Modulus mismatch in hstack')
    return FieldMatrix(np.hstack([b.values for b in blocks]), modulus)

def mat_mul_transpose(a, b):
    '''Returns A^T B mod p'''
    a._same_field(b)
    if a.rows != b.rows:
        raise APIUsageError(
            f'A^T B needs equal row counts: A is {a.rows}x{a.cols}, B is {b.rows}x{b.cols}')

    return FieldMatrix(matmul_mod(a.values.T, b.values, a.modulus.p), a.modulus)
