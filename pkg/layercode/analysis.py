'''Closed-form delay analysis for the master queue.

The master is treated as a G/G/1 queue whose service time is the time to
resolve a full job. Kingman's two-moment formula gives the mean delay, and
the harmonic aggregate of the worker job times lower-bounds the service.'''

import numpy as np

from layercode import APIUsageError, UnstableQueueError
from layercode.chunking import cumulative_fraction, layer_sizes


class ArrivalProcess:
    def __init__(self, mean_interarrival, second_moment):
        if mean_interarrival <= 0:
            raise APIUsageError(f'Mean interarrival time must be positive, got {mean_interarrival}')

        self.mean_interarrival = mean_interarrival
        self.second_moment = second_moment
        self.ca2 = max(0.0, (second_moment - mean_interarrival**2) / mean_interarrival**2)

    @classmethod
    def poisson(cls, rate):
        if rate <= 0:
            raise APIUsageError(f'Arrival rate must be positive, got {rate}')
        mean = 1.0 / rate
        return cls(mean, 2*mean**2)

    @property
    def rate(self):
        return 1.0 / self.mean_interarrival


class ServiceStats:
    def __init__(self, mean_service, second_moment):
        if mean_service <= 0:
            raise APIUsageError(f'Mean service time must be positive, got {mean_service}')

        self.mean_service = mean_service
        self.second_moment = second_moment
        self.cs2 = max(0.0, (second_moment - mean_service**2) / mean_service**2)

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise APIUsageError('Cannot estimate service stats from zero samples')
        return cls(float(samples.mean()), float(np.mean(samples**2)))

    @classmethod
    def with_cs2(cls, mean, cs2):
        if cs2 < 0:
            raise APIUsageError(f'cs2 must be nonnegative, got {cs2}')
        return cls(mean, mean**2 * (1 + cs2))

    def rho(self, arrivals):
        return self.mean_service / arrivals.mean_interarrival

    def __repr__(self):
        return f'ServiceStats(mean={self.mean_service:.6g}, cs2={self.cs2:.6g})'


def service_lower_bound(profiles):
    if not profiles:
        raise APIUsageError('service_lower_bound needs at least one worker profile')
    return 1.0 / sum(1.0 / p.mean_job_time for p in profiles)

def queueing_delay(service, arrivals):
    rho = service.rho(arrivals)
    if rho >= 1:
        raise UnstableQueueError(rho)
    return service.mean_service * (rho / (1 - rho)) * (arrivals.ca2 + service.cs2) / 2

def kingman_delay(service, arrivals):
    return service.mean_service + queueing_delay(service, arrivals)


class LayerBounds:
    def __init__(self, ts_bounds, delay_bounds, queueing):
        self.ts_bounds = ts_bounds
        self.delay_bounds = delay_bounds
        self.queueing = queueing

    @property
    def num_layers(self):
        return len(self.ts_bounds)


def layer_bounds(profiles, m, arrivals, service):
    '''Per-layer service bounds and delay approximations. The queueing term
    comes from the full-job service stats and is shared by every layer'''
    if m < 1:
        raise APIUsageError(f'Chunk count m={m} must be positive')

    full = service_lower_bound(profiles)
    queueing = queueing_delay(service, arrivals)
    ts = [cumulative_fraction(l, m) * full for l in range(2*m - 1)]
    return LayerBounds(ts, [t + queueing for t in ts], queueing)

def bounds_table(bounds, m):
    sizes = layer_sizes(m)
    return [dict(
        layer=l,
        mini_jobs=sizes[l],
        cumulative_fraction=cumulative_fraction(l, m),
        ts_bound=bounds.ts_bounds[l],
        delay_bound=bounds.delay_bounds[l],
    ) for l in range(bounds.num_layers)]


### Empirical statistics over simulator records
def service_times(records):
    '''Full-job service times of completed jobs'''
    return np.array([r.departure_time - r.service_start for r in records if r.completed])

def computation_times(records, layer):
    '''D(l) net of the wait in the master queue, for jobs that reached layer'''
    return np.array([r.delays[layer] - (r.service_start - r.arrival_time)
        for r in records if r.delays[layer] is not None])

def mean_in_system(records):
    '''Time-average number of jobs present between the first arrival and the last departure'''
    if not records:
        return 0.0

    times = np.concatenate([[r.arrival_time for r in records], [r.departure_time for r in records]])
    steps = np.concatenate([np.ones(len(records)), -np.ones(len(records))])
    # Departures before arrivals at equal times
    order = np.lexsort((steps, times))
    times = times[order]
    counts = np.cumsum(steps[order])
    horizon = times[-1] - times[0]
    if horizon <= 0:
        return 0.0
    return float(np.sum(counts[:-1] * np.diff(times)) / horizon)
