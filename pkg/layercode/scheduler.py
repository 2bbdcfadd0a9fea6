'''Nonuniform load split across heterogeneous workers.

Worker p gets kappa_p tasks, where kappa_p grows with a normalizing theta
and shrinks with the worker's mean and variance of one-job time. Theta is
set so the allocation sums to the task total, then rounded to integers.'''

import math

from layercode import APIUsageError

THETA_LO = 1e-12
MAX_ITERATIONS = 200
TOLERANCE = 1e-6


class WorkerProfile:
    def __init__(self, worker_id, mean_job_time, second_moment):
        if mean_job_time <= 0:
            raise APIUsageError(f'Worker {worker_id}: mean job time must be positive, got {mean_job_time}')

        sigma2 = second_moment - mean_job_time**2
        # Erlang moments can land a hair below m^2 in floating point
        if sigma2 < 0 and sigma2 > -1e-9 * mean_job_time**2:
            sigma2 = 0.0
        if sigma2 < 0:
            raise APIUsageError(
                f'Worker {worker_id}: second moment {second_moment} below mean^2 {mean_job_time**2}')

        self.worker_id = worker_id
        self.mean_job_time = mean_job_time
        self.second_moment = second_moment
        self.sigma2 = sigma2

    def b(self, gamma):
        return self.mean_job_time + gamma*self.sigma2

    def __repr__(self):
        return f'WorkerProfile(id={self.worker_id}, mean={self.mean_job_time:.6g}, sigma2={self.sigma2:.6g})'


def erlang_profile(worker_id, rate, num_tasks, task_complexity):
    '''Moments of a sum of num_tasks exponentials with mean c/rate each'''
    if rate <= 0:
        raise APIUsageError(f'Worker {worker_id}: rate must be positive, got {rate}')

    task_mean = task_complexity / rate
    mean = num_tasks * task_mean
    return WorkerProfile(worker_id, mean, num_tasks*task_mean**2 + mean**2)


class SchedulerConfig:
    def __init__(self, total_tasks, gamma=1.0):
        if gamma <= 0:
            raise APIUsageError(f'gamma must be positive, got {gamma}')
        if total_tasks < 1:
            raise APIUsageError(f'total_tasks must be >= 1, got {total_tasks}')

        self.gamma = gamma
        self.total_tasks = int(total_tasks)


class LoadSplit:
    def __init__(self, real_kappa, int_kappa, theta, worker_ids):
        self.real_kappa = real_kappa
        self.int_kappa = int_kappa
        self.theta = theta
        self.worker_ids = worker_ids

    def ranges(self):
        '''Consecutive task-id ranges per worker in worker order'''
        start = 0
        out = []
        for count in self.int_kappa:
            out.append((start, start + count))
            start += count
        return out

    def __repr__(self):
        return f'LoadSplit(int_kappa={self.int_kappa}, theta={self.theta:.6g})'


def kappa_of_theta(profile, theta, gamma):
    if theta <= 0:
        raise APIUsageError(f'theta must be positive, got {theta}')

    b = profile.b(gamma)
    m = profile.mean_job_time
    # Same value as (b/2gm^2)(-1 + sqrt(1 + 4gm^2 theta/b^2)) without the cancellation
    return 2*theta / (b * (1 + math.sqrt(1 + 4*gamma*m*m*theta / (b*b))))

def total_kappa(profiles, theta, gamma):
    return sum(kappa_of_theta(p, theta, gamma) for p in profiles)

def _solve_theta(profiles, total, gamma):
    hi = 1.0
    while total_kappa(profiles, hi, gamma) < total:
        hi *= 2

    lo = THETA_LO
    theta = hi
    for _ in range(MAX_ITERATIONS):
        theta = 0.5 * (lo + hi)
        residual = total_kappa(profiles, theta, gamma) - total
        if abs(residual) < TOLERANCE * 1e-3:
            break
        if residual < 0:
            lo = theta
        else:
            hi = theta

    return theta

def hamilton_round(real_kappa, total, worker_ids):
    '''Floor everything, then hand out the remainder by largest fractional part.
    Ties go to the lower worker_id'''
    floors = [int(math.floor(k)) for k in real_kappa]
    remainder = total - sum(floors)
    if remainder < 0:
        raise APIUsageError(f'Real allocation {sum(real_kappa)} overshoots total {total}')

    order = sorted(range(len(real_kappa)), key=lambda i: (-(real_kappa[i] - floors[i]), worker_ids[i]))
    for i in order[:remainder]:
        floors[i] += 1

    return floors

def solve_split(profiles, config):
    if not profiles:
        raise APIUsageError('solve_split needs at least one worker profile')

    gamma = config.gamma
    total = config.total_tasks
    theta = _solve_theta(profiles, total, gamma)
    real = [kappa_of_theta(p, theta, gamma) for p in profiles]
    worker_ids = [p.worker_id for p in profiles]
    return LoadSplit(real, hamilton_round(real, total, worker_ids), theta, worker_ids)

def split_for_rates(rates, k, total_tasks, task_complexity, gamma=1.0):
    '''Load split under the exponential-per-task service law; one job is k tasks'''
    profiles = [erlang_profile(p, rate, k, task_complexity) for p, rate in enumerate(rates)]
    return solve_split(profiles, SchedulerConfig(total_tasks, gamma))
