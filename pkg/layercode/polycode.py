'''Polynomial codes for one mini-job A^T B.

A is cut into n1 column blocks and B into n2. Task t evaluates
X(x) = sum_j A^j x^j and Y(x) = sum_j B^j x^(j*n1) at x_t, so that
X(x)^T Y(x) has coefficient (A^j1)^T B^j2 at x^(j1 + j2*n1). Any k = n1*n2
task results pin down that degree k-1 polynomial.'''

from fractions import Fraction

import numpy as np

from layercode import APIUsageError, DecodingError, round_half_up
from layercode.field import FieldMatrix, mat_mul_transpose, matmul_mod, hstack


class CodeParams:
    def __init__(self, n1, n2, omega, modulus, task_complexity=1.0):
        if n1 < 1 or n2 < 1:
            raise APIUsageError(f'Block counts must be positive, got n1={n1}, n2={n2}')
        if omega < 1:
            raise APIUsageError(f'Redundancy ratio omega={omega} must be >= 1')

        self.n1 = n1
        self.n2 = n2
        self.omega = omega
        self.modulus = modulus
        self.task_complexity = task_complexity
        self.k = n1 * n2
        self.num_tasks = num_tasks(self.k, omega)
        modulus.check_points(self.num_tasks)
        self.eval_points = list(range(1, self.num_tasks + 1))

    def __repr__(self):
        return (f'CodeParams(n1={self.n1}, n2={self.n2}, omega={self.omega}, '
            f'k={self.k}, num_tasks={self.num_tasks}, p={self.modulus.p})')


def num_tasks(k, omega):
    '''round(k*omega) with ties up'''
    return round_half_up(Fraction(str(omega)) * k)

def task_complexity(c_unlayered, m):
    '''A layered mini-job carries 1/m**2 of the job, so each of its tasks does too'''
    return c_unlayered / m**2


class CodedTask:
    __slots__ = ('task_id', 'eval_point', 'x_block', 'y_block', 'complexity')

    def __init__(self, task_id, eval_point, x_block, y_block, complexity):
        self.task_id = task_id
        self.eval_point = eval_point
        self.x_block = x_block
        self.y_block = y_block
        self.complexity = complexity

    def __repr__(self):
        return f'CodedTask(id={self.task_id}, x={self.eval_point}, blocks={self.x_block.shape}/{self.y_block.shape})'


class TaskResult:
    __slots__ = ('task_id', 'eval_point', 'product')

    def __init__(self, task_id, eval_point, product):
        self.task_id = task_id
        self.eval_point = eval_point
        self.product = product


def _evaluate(blocks, x, stride, modulus):
    '''sum_j blocks[j] * x^(j*stride) by Horner in x^stride'''
    step = pow(x, stride, modulus.p)
    acc = blocks[-1]
    for block in reversed(blocks[:-1]):
        acc = acc.scale(step) + block
    return acc

def encode(a, b, params, pad=False):
    if a.modulus != params.modulus or b.modulus != params.modulus:
        raise APIUsageError('Operands must live in the code modulus')
    if a.rows != b.rows:
        raise APIUsageError(f'A^T B needs equal row counts: {a.shape} vs {b.shape}')

    if pad:
        a = a.pad_cols(params.n1)
        b = b.pad_cols(params.n2)
    elif a.cols % params.n1 or b.cols % params.n2:
        raise APIUsageError(
            f'Columns {a.cols}, {b.cols} not divisible by n1={params.n1}, n2={params.n2}; pass pad=True')

    a_blocks = a.hsplit(params.n1)
    b_blocks = b.hsplit(params.n2)
    tasks = []
    for task_id, x in enumerate(params.eval_points):
        tasks.append(CodedTask(
            task_id=task_id,
            eval_point=x,
            x_block=_evaluate(a_blocks, x, 1, params.modulus),
            y_block=_evaluate(b_blocks, x, params.n1, params.modulus),
            complexity=params.task_complexity,
        ))

    return tasks

def compute_task(task):
    '''What a worker does with its assignment'''
    return TaskResult(task.task_id, task.eval_point, mat_mul_transpose(task.x_block, task.y_block))


### Decoding
def _poly_mul_linear(poly, root, p):
    '''poly * (x - root), coefficients lowest degree first'''
    out = [0] * (len(poly) + 1)
    for i, c in enumerate(poly):
        out[i + 1] = (out[i + 1] + c) % p
        out[i] = (out[i] - c * root) % p
    return out

def _poly_div_linear(poly, root, p):
    '''poly / (x - root) by synthetic division; the remainder is dropped'''
    n = len(poly) - 1
    out = [0] * n
    carry = 0
    for i in range(n, 0, -1):
        carry = (poly[i] + carry * root) % p
        out[i - 1] = carry
    return out

def lagrange_basis(xs, modulus):
    '''k x k matrix M with coefficients = M @ values for points at xs.
    Row d holds the x^d coefficient of every Lagrange basis polynomial'''
    p = modulus.p
    xs = [int(x) % p for x in xs]
    if not xs:
        raise DecodingError('Need at least one evaluation point')
    if len(set(xs)) != len(xs):
        raise DecodingError(f'Evaluation points must be distinct, got {xs}')

    master = [1]
    for x in xs:
        master = _poly_mul_linear(master, x, p)

    k = len(xs)
    basis = np.zeros((k, k), dtype=object)
    for col, x in enumerate(xs):
        numerator = _poly_div_linear(master, x, p)
        denominator = 1
        for other in xs:
            if other != x:
                denominator = denominator * (x - other) % p
        scale = pow(denominator, -1, p)
        for row in range(k):
            basis[row, col] = numerator[row] * scale % p

    return basis.astype(modulus.dtype)

def interpolate_coefficients(points, modulus):
    points = list(points)
    if not points:
        raise DecodingError('Need at least one point to interpolate')
    xs = [x for x, _ in points]
    values = np.array([[int(v) % modulus.p] for _, v in points], dtype=object).astype(modulus.dtype)
    coeffs = matmul_mod(lagrange_basis(xs, modulus), values, modulus.p)
    return [int(c) for c in coeffs[:, 0]]

def decode(results, params, shape=None):
    '''A^T B mod p from any k task results; the first k are used'''
    results = list(results)
    k = params.k
    if len(results) < k:
        raise DecodingError(f'Need {k} task results to decode, got {len(results)}')

    results = results[:k]
    xs = [r.eval_point for r in results]
    if len(set(xs)) != k:
        raise DecodingError(f'Duplicate evaluation points among {xs}')

    modulus = params.modulus
    block_shape = results[0].product.shape
    stacked = np.stack([r.product.values.reshape(-1) for r in results])
    coeffs = matmul_mod(lagrange_basis(xs, modulus), stacked, modulus.p)

    # Coefficient j1 + j2*n1 is block (j1, j2) of the output grid
    rows = []
    for j1 in range(params.n1):
        row = [FieldMatrix(coeffs[j1 + j2*params.n1].reshape(block_shape), modulus)
            for j2 in range(params.n2)]
        rows.append(hstack(row))

    full = np.vstack([r.values for r in rows])
    if shape is not None:
        full = full[:shape[0], :shape[1]]

    return FieldMatrix(full, modulus)
