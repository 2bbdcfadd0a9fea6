'''Backends for running independent replications.

Each replication carries its own seeded config, so results do not depend
on which backend ran them or in what order workers finished.'''

from multiprocessing import Pipe, Process

import psutil

import layercode
from layercode import APIUsageError

RUN = 0
CLOSE = 1


class Serial:
    '''Runs replications in-process, in order'''
    def __init__(self, num_workers=1, **kwargs):
        self.num_workers = 1
        self.closed = False

    def map(self, fn, items):
        if self.closed:
            raise APIUsageError('Backend is closed')
        return [fn(item) for item in items]

    def close(self):
        self.closed = True


def _worker_process(worker_idx, send_pipe, recv_pipe):
    while True:
        cmd, payload = recv_pipe.recv()
        if cmd == CLOSE:
            send_pipe.send(None)
            break

        fn, idx, item = payload
        try:
            send_pipe.send((idx, True, fn(item)))
        except Exception as e:
            send_pipe.send((idx, False, f'{type(e).__name__}: {e}'))


class Multiprocessing:
    '''Runs replications across worker processes, one per hardware core by default'''
    def __init__(self, num_workers=None, overwork=False, **kwargs):
        cpu_cores = psutil.cpu_count(logical=False) or 1
        if num_workers is None:
            num_workers = cpu_cores

        if num_workers > cpu_cores and not overwork:
            raise APIUsageError(' '.join([
                f'num_workers ({num_workers}) > hardware cores ({cpu_cores}) is disallowed by default.',
                'Replications are CPU bound, so extra processes only contend for cores.',
                'If you really want to do this, set overwork=True (--vec.overwork True).',
            ]))

        self.num_workers = num_workers
        self.send_pipes, w_recv_pipes = zip(*[Pipe() for _ in range(num_workers)])
        w_send_pipes, self.recv_pipes = zip(*[Pipe() for _ in range(num_workers)])

        self.processes = []
        for i in range(num_workers):
            p = Process(target=_worker_process, args=(i, w_send_pipes[i], w_recv_pipes[i]), daemon=True)
            p.start()
            self.processes.append(p)

        self.busy = {}
        self.closed = False

    def map(self, fn, items):
        if self.closed:
            raise APIUsageError('Backend is closed')

        self._drain()
        items = list(items)
        results = [None] * len(items)
        # At most one outstanding item per worker keeps the pipes from filling up
        pending = list(enumerate(items))[::-1]
        busy = self.busy
        for w in self._alive():
            if not pending:
                break
            idx, item = pending.pop()
            self.send_pipes[w].send((RUN, (fn, idx, item)))
            busy[w] = idx

        if pending and not busy:
            raise RuntimeError('No live worker processes')

        while busy:
            for w in list(busy):
                if not self.recv_pipes[w].poll(0.01):
                    if not self.processes[w].is_alive() and not self.recv_pipes[w].poll(0):
                        idx = busy.pop(w)
                        raise RuntimeError(
                            f'Worker {w} exited with code {self.processes[w].exitcode} during replication {idx}')
                    continue

                idx, ok, value = self.recv_pipes[w].recv()
                del busy[w]
                if not ok:
                    raise RuntimeError(f'Replication {idx} failed in worker {w}: {value}')

                results[idx] = value
                if pending:
                    idx, item = pending.pop()
                    self.send_pipes[w].send((RUN, (fn, idx, item)))
                    busy[w] = idx

        return results

    def _alive(self):
        return [w for w, p in enumerate(self.processes) if p.is_alive()]

    def _drain(self):
        '''Discards results still in flight from a map that raised'''
        for w in list(self.busy):
            while self.processes[w].is_alive() and not self.recv_pipes[w].poll(0.01):
                pass
            if self.recv_pipes[w].poll(0):
                self.recv_pipes[w].recv()
            del self.busy[w]

    def close(self):
        if self.closed:
            return

        self._drain()
        alive = self._alive()
        for w in alive:
            self.send_pipes[w].send((CLOSE, None))
        for w in alive:
            if self.recv_pipes[w].poll(1):
                self.recv_pipes[w].recv()
        for p in self.processes:
            p.join(timeout=1)
            if p.is_alive():
                p.terminate()

        self.closed = True


def make(backend='Serial', num_workers='auto', **kwargs):
    if isinstance(backend, str):
        try:
            backend = getattr(layercode.vector, backend)
        except AttributeError:
            raise APIUsageError(f'Invalid backend: {backend}')

    if backend not in (Serial, Multiprocessing):
        raise APIUsageError(f'Invalid backend: {backend}')

    if num_workers == 'auto':
        num_workers = None if backend is Multiprocessing else 1
    elif num_workers != int(num_workers) or num_workers < 1:
        raise APIUsageError(f'num_workers must be a positive integer or "auto", got {num_workers}')
    else:
        num_workers = int(num_workers)

    for k in kwargs:
        if k not in ['overwork']:
            raise APIUsageError(f'Invalid argument: {k}')

    return backend(num_workers=num_workers, **kwargs)
