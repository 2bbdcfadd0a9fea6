'''Discrete-event simulation of the master/worker/fusion pipeline.

Jobs arrive as a Poisson stream and wait in a FIFO master queue. The job in
service is resolved layer by layer: every mini-job of the current layer is
encoded into round(k*omega) tasks, split across the worker queues by the
load split, and resolved by the fusion node once k of its tasks return.
Leftover tasks of a resolved mini-job are purged. Only task counts and
complexities move through the event loop unless payload mode is on, in
which case real operands are encoded, computed, decoded and checked.'''

import heapq
import itertools
import math
from collections import deque
from copy import deepcopy

import numpy as np

from layercode import APIUsageError
from layercode import polycode
from layercode.analysis import computation_times, service_lower_bound
from layercode.chunking import (ChunkParams, LayeredAccumulator, decompose,
    integer_product, mini_job_operands, mini_jobs_of_layer, resolution_assemble)
from layercode.field import FieldMatrix, coding_prime
from layercode.polycode import CodeParams, compute_task, decode, encode
from layercode.scheduler import erlang_profile, split_for_rates

# Ties at one timestamp resolve completions first, then arrivals, then deadline checks
COMPLETION = 0
ARRIVAL = 1
DEADLINE = 2

INTRA_LAYER = ('concurrent', 'serial')
PURGE = ('preemptive', 'run-to-completion')
SERVICE = ('exponential', 'deterministic')

STREAM_BLOCK = 1024


class SimConfig:
    def __init__(self, rates, arrival_rate, k, omega, m=1, c=50.0, deadline=None,
            num_jobs=1000, seed=0, gamma=1.0, intra_layer='concurrent', purge='preemptive',
            service='exponential', with_payload=False, payload_dim=4, payload_n1=2,
            payload_n2=2, payload_d=4):
        self.rates = [float(r) for r in rates]
        self.arrival_rate = float(arrival_rate)
        self.k = int(k)
        self.omega = omega
        self.m = int(m)
        self.c = float(c)
        self.deadline = None if deadline is None or math.isinf(deadline) else float(deadline)
        self.num_jobs = int(num_jobs)
        self.seed = int(seed)
        self.gamma = float(gamma)
        self.intra_layer = intra_layer
        self.purge = purge
        self.service = service
        self.with_payload = bool(with_payload)
        self.payload_dim = int(payload_dim)
        self.payload_n1 = int(payload_n1)
        self.payload_n2 = int(payload_n2)
        self.payload_d = int(payload_d)

    @property
    def num_workers(self):
        return len(self.rates)

    @property
    def num_layers(self):
        return 2*self.m - 1

    @property
    def task_complexity(self):
        return polycode.task_complexity(self.c, self.m)

    @property
    def num_tasks(self):
        return polycode.num_tasks(self.k, self.omega)

    def validate(self):
        if not self.rates:
            raise APIUsageError('At least one worker rate is required')
        if any(r <= 0 for r in self.rates):
            raise APIUsageError(f'Worker rates must be positive, got {self.rates}')
        if self.arrival_rate <= 0:
            raise APIUsageError(f'Arrival rate must be positive, got {self.arrival_rate}')
        if self.k < 1:
            raise APIUsageError(f'k must be >= 1, got {self.k}')
        if self.omega < 1:
            raise APIUsageError(f'omega must be >= 1, got {self.omega}')
        if self.m < 1:
            raise APIUsageError(f'm must be >= 1, got {self.m}')
        if self.c <= 0:
            raise APIUsageError(f'Task complexity c must be positive, got {self.c}')
        if self.deadline is not None and self.deadline <= 0:
            raise APIUsageError(f'Deadline must be positive, got {self.deadline}')
        if self.num_jobs < 0:
            raise APIUsageError(f'num_jobs must be >= 0, got {self.num_jobs}')
        if self.seed < 0 or self.seed >= 2**64:
            raise APIUsageError(f'seed must be an unsigned 64-bit integer, got {self.seed}')
        if self.intra_layer not in INTRA_LAYER:
            raise APIUsageError(f'intra_layer must be one of {INTRA_LAYER}, got {self.intra_layer}')
        if self.purge not in PURGE:
            raise APIUsageError(f'purge must be one of {PURGE}, got {self.purge}')
        if self.service not in SERVICE:
            raise APIUsageError(f'service must be one of {SERVICE}, got {self.service}')
        if self.with_payload and self.k != self.payload_n1 * self.payload_n2:
            raise APIUsageError(
                f'Payload mode decodes with k = payload_n1*payload_n2 = {self.payload_n1*self.payload_n2}, got k={self.k}')

        return self

    def __repr__(self):
        return (f'SimConfig(P={self.num_workers}, lambda={self.arrival_rate}, k={self.k}, '
            f'omega={self.omega}, m={self.m}, c={self.c}, deadline={self.deadline}, jobs={self.num_jobs})')


def paired(config, **overrides):
    '''Copy of config with overrides. Keeping the seed keeps the arrival stream'''
    out = deepcopy(config)
    for key, value in overrides.items():
        if not hasattr(out, key):
            raise APIUsageError(f'SimConfig has no field {key}')
        setattr(out, key, value)
    if 'deadline' in overrides:
        out.deadline = None if out.deadline is None or math.isinf(out.deadline) else float(out.deadline)
    return out


class ExponentialStream:
    '''Unit-mean exponentials drawn from a generator in fixed-size blocks'''
    def __init__(self, generator, block=STREAM_BLOCK):
        self.generator = generator
        self.block = block
        self.buffer = generator.standard_exponential(block)
        self.idx = 0

    def next(self):
        if self.idx == self.block:
            self.buffer = self.generator.standard_exponential(self.block)
            self.idx = 0
        value = self.buffer[self.idx]
        self.idx += 1
        return float(value)


class JobRecord:
    __slots__ = ('job_id', 'arrival_time', 'service_start', 'delays', 'status',
        'last_layer', 'departure_time', 'payload_ok')

    def __init__(self, job_id, arrival_time, num_layers):
        self.job_id = job_id
        self.arrival_time = arrival_time
        self.service_start = None
        self.delays = [None] * num_layers
        self.status = None
        self.last_layer = -1
        self.departure_time = None
        self.payload_ok = None

    @property
    def completed(self):
        return self.status == 'completed'

    @property
    def terminated(self):
        return self.status == 'terminated'

    def __eq__(self, other):
        return isinstance(other, JobRecord) and all(
            getattr(self, k) == getattr(other, k) for k in self.__slots__)

    def __repr__(self):
        return f'JobRecord(id={self.job_id}, status={self.status}, last_layer={self.last_layer}, delays={self.delays})'


class _MiniJobState:
    __slots__ = ('job_id', 'job', 'live', 'results', 'started', 'tasks', 'payload')

    def __init__(self, job_id, job):
        self.job_id = job_id
        self.job = job
        self.live = True
        self.results = 0
        self.started = 0
        self.tasks = None
        self.payload = []


class _WorkerState:
    __slots__ = ('worker_id', 'rate', 'stream', 'queue', 'in_service', 'token')

    def __init__(self, worker_id, rate, stream):
        self.worker_id = worker_id
        self.rate = rate
        self.stream = stream
        # Blocks of [mini-job state, next task id, end task id]
        self.queue = deque()
        self.in_service = None
        self.token = 0


class _ActiveJob:
    __slots__ = ('record', 'layer', 'pending', 'waiting', 'minijobs', 'deadline_at', 'payload')

    def __init__(self, record):
        self.record = record
        self.layer = 0
        self.pending = 0
        self.waiting = deque()
        self.minijobs = []
        self.deadline_at = math.inf
        self.payload = None


class _JobPayload:
    '''Real operands of one job and the fusion node's running resolution'''
    def __init__(self, config, rng, num_tasks):
        self.params = ChunkParams(q=2, d=config.payload_d, m=config.m)
        dim = config.payload_dim
        high = self.params.element_bound
        self.a = rng.integers(0, high, size=(dim, dim), dtype=np.int64)
        self.b = rng.integers(0, high, size=(dim, dim), dtype=np.int64)
        self.a_chunks = decompose(self.a, self.params)
        self.b_chunks = decompose(self.b, self.params)
        self.modulus = coding_prime(dim, self.params.base, num_tasks)
        self.code = CodeParams(config.payload_n1, config.payload_n2, config.omega,
            self.modulus, config.task_complexity)
        self.accumulator = LayeredAccumulator(self.params, (dim, dim), inner_dim=dim)
        self.direct = {}
        self.decoded = {}
        self.ok = True

    def encode(self, job):
        a, b = mini_job_operands(self.a_chunks, self.b_chunks, job)
        self.direct[(job.i, job.j)] = integer_product(a, b)
        a = FieldMatrix.from_array(a, self.modulus)
        b = FieldMatrix.from_array(b, self.modulus)
        return encode(a, b, self.code, pad=True)

    def fuse(self, job, results):
        shape = self.direct[(job.i, job.j)].shape
        product = decode(results, self.code, shape=shape).to_numpy()
        self.decoded[(job.i, job.j)] = product.astype(self.accumulator.partial.dtype)

    def absorb(self, layer):
        partial = self.accumulator.absorb(layer, self.decoded)
        expected = resolution_assemble(self.direct, layer, self.params)
        self.ok = self.ok and bool(np.array_equal(partial, expected))
        if layer == self.params.num_layers - 1:
            self.ok = self.ok and bool(np.array_equal(partial, integer_product(self.a, self.b)))


class Simulation:
    def __init__(self, config):
        self.config = config.validate()
        k = config.k
        self.num_tasks = config.num_tasks
        self.split = split_for_rates(config.rates, k, self.num_tasks, config.task_complexity, config.gamma)

        children = np.random.SeedSequence(config.seed).spawn(2 + config.num_workers)
        self.arrivals = ExponentialStream(np.random.default_rng(children[0]))
        self.workers = [_WorkerState(p, rate, ExponentialStream(np.random.default_rng(children[1 + p])))
            for p, rate in enumerate(config.rates)]
        self.payload_rng = np.random.default_rng(children[-1])

        self.events = []
        self.counter = itertools.count()
        self.now = 0.0
        self.master = deque()
        self.active = None
        self.records = []
        self.next_arrival = 0.0
        self.diagnostics = dict(
            events=0,
            dispatched_tasks=0,
            completed_tasks=0,
            purged_queued=0,
            abandoned=0,
            late_results=0,
            stale_events=0,
            terminations=0,
            unstable=self._unstable(),
        )

    def _unstable(self):
        config = self.config
        profiles = [erlang_profile(p, rate, config.k, config.c) for p, rate in enumerate(config.rates)]
        return config.arrival_rate * service_lower_bound(profiles) >= 1

    def _push(self, time, kind, *payload):
        heapq.heappush(self.events, (time, kind, next(self.counter), payload))

    def run(self):
        config = self.config
        if config.num_jobs > 0:
            self.next_arrival = self.arrivals.next() / config.arrival_rate
            self._push(self.next_arrival, ARRIVAL, 0)

        while self.events:
            time, kind, _, payload = heapq.heappop(self.events)
            self.now = time
            self.diagnostics['events'] += 1
            if kind == COMPLETION:
                self.on_task_completion(*payload)
            elif kind == ARRIVAL:
                self.on_arrival(*payload)
            else:
                self.on_deadline(*payload)

            if self.active is not None:
                self.apply_deadline(self.active, self.now)

        return self.records

    ### Master
    def on_arrival(self, job_id):
        config = self.config
        record = JobRecord(job_id, self.now, config.num_layers)
        self.records.append(record)
        self.master.append(record)

        if job_id + 1 < config.num_jobs:
            self.next_arrival = self.now + self.arrivals.next() / config.arrival_rate
            self._push(self.next_arrival, ARRIVAL, job_id + 1)

        if self.active is None:
            self._start_next_job()

    def _start_next_job(self):
        if not self.master:
            self.active = None
            return

        record = self.master.popleft()
        record.service_start = self.now
        job = _ActiveJob(record)
        self.active = job
        if self.config.with_payload:
            job.payload = _JobPayload(self.config, self.payload_rng, self.num_tasks)
        if self.config.deadline is not None:
            job.deadline_at = self.now + self.config.deadline
            self._push(job.deadline_at, DEADLINE, record.job_id)

        self.dispatch_layer(job, 0, self.split)

    def dispatch_layer(self, job, layer, split):
        config = self.config
        minijobs = mini_jobs_of_layer(layer, config.m, 1)
        job.layer = layer
        job.pending = len(minijobs)
        job.minijobs = []
        job.waiting = deque(minijobs)

        if config.intra_layer == 'serial':
            self._dispatch_mini_job(job, job.waiting.popleft(), split)
        else:
            while job.waiting:
                self._dispatch_mini_job(job, job.waiting.popleft(), split)

        return [(state.job, list(split.int_kappa)) for state in job.minijobs]

    def _dispatch_mini_job(self, job, minijob, split):
        state = _MiniJobState(job.record.job_id, minijob)
        if job.payload is not None:
            state.tasks = job.payload.encode(minijob)
        job.minijobs.append(state)

        for worker, (lo, hi) in zip(self.workers, split.ranges()):
            if hi > lo:
                worker.queue.append([state, lo, hi])
        self.diagnostics['dispatched_tasks'] += self.num_tasks

        for worker in self.workers:
            if worker.in_service is None:
                self._start_next_task(worker)

    ### Workers
    def _start_next_task(self, worker):
        queue = worker.queue
        while queue and (not queue[0][0].live or queue[0][1] >= queue[0][2]):
            queue.popleft()
        if not queue:
            worker.in_service = None
            return

        block = queue[0]
        state, task_id = block[0], block[1]
        block[1] += 1
        state.started += 1

        mean = self.config.task_complexity / worker.rate
        if self.config.service == 'exponential':
            duration = mean * worker.stream.next()
        else:
            duration = mean

        worker.token += 1
        worker.in_service = (state, task_id)
        self._push(self.now + duration, COMPLETION, worker.worker_id, worker.token)

    def on_task_completion(self, worker_id, token):
        worker = self.workers[worker_id]
        if token != worker.token or worker.in_service is None:
            self.diagnostics['stale_events'] += 1
            return

        state, task_id = worker.in_service
        worker.in_service = None
        self.diagnostics['completed_tasks'] += 1

        if not state.live:
            self.diagnostics['late_results'] += 1
        else:
            state.results += 1
            if state.tasks is not None:
                state.payload.append(compute_task(state.tasks[task_id]))
            if state.results == self.config.k:
                self._resolve(state)

        if worker.in_service is None:
            self._start_next_task(worker)

    ### Fusion
    def _purge(self, state):
        state.live = False
        self.diagnostics['purged_queued'] += self.num_tasks - state.started
        if self.config.purge != 'preemptive':
            return

        for worker in self.workers:
            if worker.in_service is not None and worker.in_service[0] is state:
                worker.in_service = None
                # Bumping the token orphans the scheduled completion
                worker.token += 1
                self.diagnostics['abandoned'] += 1
                self._start_next_task(worker)

    def _resolve(self, state):
        job = self.active
        self._purge(state)
        if job.payload is not None:
            job.payload.fuse(state.job, state.payload)

        job.pending -= 1
        if job.waiting:
            self._dispatch_mini_job(job, job.waiting.popleft(), self.split)
            return
        if job.pending > 0:
            return

        record = job.record
        layer = job.layer
        record.delays[layer] = self.now - record.arrival_time
        record.last_layer = layer
        if job.payload is not None:
            job.payload.absorb(layer)
            record.payload_ok = job.payload.ok

        if layer == self.config.num_layers - 1:
            record.status = 'completed'
            record.departure_time = self.now
            self._start_next_job()
        else:
            self.dispatch_layer(job, layer + 1, self.split)

    ### Deadlines
    def on_deadline(self, job_id):
        job = self.active
        if job is None or job.record.job_id != job_id:
            return
        if self.master:
            self._terminate(job)

    def apply_deadline(self, job, now):
        '''Terminates the job in service once its budget is spent and someone is waiting'''
        if now >= job.deadline_at and self.master:
            self._terminate(job)
            return 'terminate'
        return 'continue'

    def _terminate(self, job):
        for state in job.minijobs:
            if state.live:
                self._purge(state)

        record = job.record
        record.status = 'terminated'
        record.departure_time = self.now
        self.diagnostics['terminations'] += 1
        self._start_next_job()


def run(config):
    return Simulation(config).run()

def replicate(config):
    '''One independent replication; module-level so process backends can pickle it'''
    sim = Simulation(config)
    records = sim.run()
    return records, sim.diagnostics


### Statistics
def success_rate(records, layer):
    if not records:
        raise APIUsageError('success_rate needs at least one job record')
    return sum(1 for r in records if r.last_layer >= layer) / len(records)

def layer_delays(records, layer):
    return np.array([r.delays[layer] for r in records if r.delays[layer] is not None])

def summarize(records, num_layers):
    layers = []
    for l in range(num_layers):
        delays = layer_delays(records, l)
        computation = computation_times(records, l) if len(delays) else np.array([])
        layers.append(dict(
            mean_delay=float(delays.mean()) if len(delays) else math.nan,
            var_delay=float(delays.var()) if len(delays) else math.nan,
            mean_computation=float(computation.mean()) if len(computation) else math.nan,
            success_rate=success_rate(records, l) if records else math.nan,
            jobs=len(delays),
        ))

    return dict(
        layer=layers,
        jobs=len(records),
        terminated=sum(1 for r in records if r.terminated),
    )

def histogram(records, num_layers, bins=50):
    '''Per-layer counts over bin edges shared by every layer'''
    everything = np.concatenate([layer_delays(records, l) for l in range(num_layers)] + [np.array([])])
    if everything.size == 0:
        return []

    edges = np.histogram_bin_edges(everything, bins=bins)
    rows = []
    for l in range(num_layers):
        counts, _ = np.histogram(layer_delays(records, l), bins=edges)
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            rows.append(dict(layer=l, bin_lo=float(lo), bin_hi=float(hi), count=int(count)))

    return rows
