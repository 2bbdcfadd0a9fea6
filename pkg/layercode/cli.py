## layercode [simulate | sweep-omega | sweep-deadline | bounds | verify-codec] [optional args]
# This is the same as python -m layercode.cli [mode] [optional args]. --help lists every config key as a flag

import io
import os
import sys
import ast
import csv
import glob
import json
import math
import time
import argparse
import itertools
import subprocess
import configparser
from collections import defaultdict

import numpy as np

import layercode
import layercode.sweep
import layercode.vector
from layercode import APIUsageError, ConfigError, UnstableQueueError, config_hash, unroll_nested_dict
from layercode.analysis import (ArrivalProcess, ServiceStats, bounds_table, layer_bounds,
    service_lower_bound, service_times)
from layercode.chunking import cumulative_fraction
from layercode.field import FieldMatrix, find_prime_above, mat_mul_transpose
from layercode.polycode import CodeParams, compute_task, decode, encode, num_tasks as code_num_tasks
from layercode.scheduler import erlang_profile
from layercode.simulator import SimConfig, Simulation, histogram, paired, replicate, summarize

import rich
import rich.traceback
from rich.table import Table
from rich.console import Console
from rich_argparse import RichHelpFormatter
rich.traceback.install(show_locals=False)

MODES = ('simulate', 'sweep-omega', 'sweep-deadline', 'bounds', 'verify-codec')
SEED_ENV = 'LAYERCODE_SEED'
PRECISION = 6

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# Sections that do not change any number in the output
UNHASHED = ('output', 'vec', '_pinned')

# Short flags and the config key each one overrides
ALIASES = {
    'jobs': ('sim', 'num_jobs'),
    'omega': ('sim', 'omega'),
    'm': ('sim', 'm'),
    'deadline': ('sim', 'deadline'),
    'intra_layer': ('sim', 'intra_layer'),
    'with_payload': ('sim', 'with_payload'),
    'out': ('output', 'out'),
    'format': ('output', 'format'),
}

console = Console(stderr=True)


class ArgumentParser(argparse.ArgumentParser):
    '''Bad flags are config errors, not argparse's own exit code'''
    def error(self, message):
        raise ConfigError(message)


### Loggers
class NoLogger:
    def __init__(self, args):
        self.run_id = str(int(100*time.time()))

    def log(self, logs, step):
        pass

    def close(self):
        pass

class ConsoleLogger:
    '''One line per finished replication on stderr'''
    def __init__(self, args, c1='[cyan]', b2='[bright_white]'):
        self.run_id = str(int(100*time.time()))
        self.c1 = c1
        self.b2 = b2
        self.start = time.time()

    def log(self, logs, step):
        flat = dict(unroll_nested_dict(logs))
        parts = [f'{self.c1}{k} {self.b2}{_fmt_metric(v)}' for k, v in flat.items()]
        console.print(f'{self.c1}[{step}] ' + '  '.join(parts), highlight=False)

    def close(self):
        console.print(f'{self.c1}Finished in {self.b2}{time.time() - self.start:.2f}[/]s', highlight=False)

def _fmt_metric(value):
    if isinstance(value, float):
        return 'nan' if math.isnan(value) else f'{value:.3f}'
    return str(value)


### Dashboard
def print_dashboard(title, summary, layer_rows, diagnostics=None,
        c1='[cyan]', c2='[white]', b1='[bright_cyan]', b2='[bright_white]'):
    dashboard = Table(box=rich.box.ROUNDED, expand=True,
        show_header=False, border_style='bright_cyan')
    header = Table(box=None, expand=True, show_header=False)
    header.add_row(f'{b1}layercode {b2}{layercode.__version__}', f'{c1}{title}')
    dashboard.add_row(header)

    s = Table(box=None, expand=True)
    s.add_column(f'{c1}Summary', justify='left', vertical='top')
    s.add_column(f'{c1}Value', justify='right', vertical='top')
    for name, value in summary.items():
        s.add_row(f'{c2}{name}', f'{b2}{_fmt_metric(value)}')

    monitor = Table(box=None, expand=True, pad_edge=False)
    if diagnostics:
        d = Table(box=None, expand=True)
        d.add_column(f'{c1}Diagnostics', justify='left', vertical='top')
        d.add_column(f'{c1}Value', justify='right', vertical='top')
        for name, value in diagnostics.items():
            d.add_row(f'{c2}{name}', f'{b2}{_fmt_metric(value)}')
        monitor.add_row(s, d)
    else:
        monitor.add_row(s)
    dashboard.add_row(monitor)

    if layer_rows:
        columns = list(layer_rows[0].keys())
        l = Table(box=None, expand=True)
        for col in columns:
            l.add_column(f'{c1}{col}', justify='right')
        for row in layer_rows:
            l.add_row(*[f'{b2}{_fmt_metric(row[col])}' for col in columns])
        dashboard.add_row(l)

    console.print(dashboard)


### Output
def version():
    '''git describe when running from a checkout, the package version otherwise'''
    root = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))
    if os.path.isdir(os.path.join(root, '.git')):
        try:
            out = subprocess.run(['git', 'describe', '--always', '--dirty'], cwd=root,
                capture_output=True, text=True, timeout=5)
            if out.returncode == 0 and out.stdout.strip():
                return out.stdout.strip()
        except (OSError, subprocess.SubprocessError):
            pass

    return layercode.__version__

def provenance(args):
    return dict(tool='layercode', version=version(),
        config=config_hash(args, exclude=UNHASHED)[:16], seed=args['seed'])

def _cell(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return '' if math.isnan(value) else f'{value:.{PRECISION}f}'
    return str(value)

def _json_value(value):
    if isinstance(value, float):
        return None if math.isnan(value) else round(value, PRECISION)
    return value

def check_writable(path):
    if path in (None, '-'):
        return
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
        raise ConfigError(f'Output path {path} is not writable')
    if os.path.isdir(path):
        raise ConfigError(f'Output path {path} is a directory')

def write_table(path, fmt, columns, rows, prov):
    if fmt == 'json':
        text = json.dumps(dict(
            provenance=prov,
            columns=columns,
            rows=[{c: _json_value(row[c]) for c in columns} for row in rows],
        ), indent=1) + '\n'
        _emit(path, text)
        return

    stream = io.StringIO()
    stream.write(f'# {prov["tool"]} {prov["version"]} config={prov["config"]} seed={prov["seed"]}\n')
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    _emit(path, stream.getvalue())

def _emit(path, text):
    if path in (None, '-'):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, 'w', newline='') as f:
        f.write(text)


### Experiments
class ExperimentSpec:
    def __init__(self, mode, args):
        if mode not in MODES:
            raise ConfigError(f'Unknown mode {mode}. Expected one of {", ".join(MODES)}')

        self.mode = mode
        self.args = args
        self.sim = sim_config(args)
        self.out = args['output']['out']
        self.format = args['output']['format']
        if self.format not in ('csv', 'json'):
            raise ConfigError(f'Output format must be csv or json, got {self.format}')
        check_writable(self.out)

        self.grid = None
        if mode == 'sweep-omega':
            self.grid = _grid(args, 'omega')
        elif mode == 'sweep-deadline':
            self.grid = _grid(args, 'deadline')

def _grid(args, name):
    # A short flag pins the sweep to that single point
    if name in args.get('_pinned', ()):
        return [args['sim'][name]]
    try:
        return layercode.sweep.grid_from_config(args['sweep'][name])
    except KeyError as e:
        raise ConfigError(f'Missing sweep section [sweep.{name}] key {e}')

def sim_config(args):
    sim = args['sim']
    try:
        k = sim['k']
        if sim['with_payload']:
            k = sim['payload_n1'] * sim['payload_n2']
        config = SimConfig(
            rates=sim['rates'],
            arrival_rate=sim['arrival_rate'],
            k=k,
            omega=sim['omega'],
            m=sim['m'],
            c=sim['c'],
            deadline=sim['deadline'],
            num_jobs=sim['num_jobs'],
            seed=args['seed'],
            gamma=args['scheduler']['gamma'],
            intra_layer=sim['intra_layer'],
            purge=sim['purge'],
            service=sim['service'],
            with_payload=sim['with_payload'],
            payload_dim=sim['payload_dim'],
            payload_n1=sim['payload_n1'],
            payload_n2=sim['payload_n2'],
            payload_d=sim['payload_d'],
        )
        return config.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f'Invalid [sim] configuration: {type(e).__name__}: {e}')

def make_logger(args):
    if args['output']['quiet']:
        return NoLogger(args)
    return ConsoleLogger(args)

def make_backend(args):
    vec = args['vec']
    return layercode.vector.make(vec['backend'], num_workers=vec['num_workers'], overwork=vec['overwork'])

def full_job_profiles(config):
    '''One full job is k tasks of the unlayered complexity on each worker'''
    return [erlang_profile(p, rate, config.k, config.c) for p, rate in enumerate(config.rates)]

def _cs2(args, records):
    cs2 = args['analysis']['cs2']
    if cs2 != 'empirical':
        return float(cs2)
    samples = service_times(records)
    if len(samples) == 0:
        return math.nan
    return ServiceStats.from_samples(samples).cs2

def _bounds(config, cs2):
    '''Per-layer lower bounds; delay bounds are None when the queue is unstable'''
    profiles = full_job_profiles(config)
    full = service_lower_bound(profiles)
    arrivals = ArrivalProcess.poisson(config.arrival_rate)
    if math.isnan(cs2):
        cs2 = 0.0
    try:
        bounds = layer_bounds(profiles, config.m, arrivals, ServiceStats.with_cs2(full, cs2))
        return bounds.ts_bounds, bounds.delay_bounds
    except UnstableQueueError:
        ts = [cumulative_fraction(l, config.m) * full for l in range(config.num_layers)]
        return ts, [math.nan] * len(ts)


def simulate(spec, logger):
    config = spec.sim
    sim = Simulation(config)
    records = sim.run()
    L = config.num_layers

    columns = ['job_id', 'arrival_time', 'service_start', 'status', 'last_layer'] + [f'D{l}' for l in range(L)]
    rows = []
    for r in records:
        row = dict(job_id=r.job_id, arrival_time=r.arrival_time, service_start=r.service_start,
            status=r.status, last_layer=r.last_layer)
        for l in range(L):
            row[f'D{l}'] = r.delays[l]
        rows.append(row)

    prov = provenance(spec.args)
    write_table(spec.out, spec.format, columns, rows, prov)
    if spec.out not in (None, '-'):
        hist = histogram(records, L, bins=spec.args['output']['hist_bins'])
        write_table(spec.out + '.hist.csv', 'csv', ['layer', 'bin_lo', 'bin_hi', 'count'], hist, prov)

    stats = summarize(records, L)
    if config.with_payload:
        checked = [r.payload_ok for r in records if r.payload_ok is not None]
        stats['payload_ok'] = all(checked)
    logger.log(dict(layer={l: s['mean_delay'] for l, s in enumerate(stats['layer'])}), 0)
    return stats, sim.diagnostics

def sweep_omega(spec, logger, backend):
    base = spec.sim
    configs = []
    for omega in spec.grid:
        configs.append(('layered', paired(base, omega=omega)))
        configs.append(('unlayered', paired(base, omega=omega, m=1)))

    results = backend.map(replicate, [c for _, c in configs])
    rows = []
    for step, ((series, config), (records, diagnostics)) in enumerate(zip(configs, results)):
        if series == 'layered':
            # The unlayered run at the same omega calibrates cs2 for both series
            cs2 = _cs2(spec.args, results[step + 1][0])
        ts, delay = _bounds(config, cs2)
        stats = summarize(records, config.num_layers)
        for l, s in enumerate(stats['layer']):
            rows.append(dict(omega=config.omega, series=series, layer=l, mean_delay=s['mean_delay'],
                mean_computation=s['mean_computation'], ts_bound=ts[l], delay_bound=delay[l], jobs=s['jobs']))
        logger.log(dict(omega=config.omega, series=series,
            layer={l: s['mean_delay'] for l, s in enumerate(stats['layer'])}), step)

    rows.sort(key=lambda r: (r['omega'], r['series'], r['layer']))
    columns = ['omega', 'series', 'layer', 'mean_delay', 'mean_computation', 'ts_bound', 'delay_bound', 'jobs']
    write_table(spec.out, spec.format, columns, rows, provenance(spec.args))
    return rows

def sweep_deadline(spec, logger, backend):
    base = spec.sim
    configs = []
    for deadline in spec.grid:
        configs.append(('layered', paired(base, deadline=deadline)))
        configs.append(('unlayered', paired(base, deadline=deadline, m=1)))

    results = backend.map(replicate, [c for _, c in configs])
    rows = []
    for step, ((series, config), (records, diagnostics)) in enumerate(zip(configs, results)):
        stats = summarize(records, config.num_layers)
        for l, s in enumerate(stats['layer']):
            rows.append(dict(deadline=config.deadline, series=series, layer=l,
                success_rate=s['success_rate'], terminated=stats['terminated'], jobs=stats['jobs']))
        logger.log(dict(deadline=config.deadline, series=series,
            success={l: s['success_rate'] for l, s in enumerate(stats['layer'])}), step)

    rows.sort(key=lambda r: (r['deadline'], r['series'], r['layer']))
    columns = ['deadline', 'series', 'layer', 'success_rate', 'terminated', 'jobs']
    write_table(spec.out, spec.format, columns, rows, provenance(spec.args))
    return rows

def bounds(spec, logger):
    config = spec.sim
    cs2 = spec.args['analysis']['cs2']
    if cs2 == 'empirical':
        calibration = paired(config, m=1, deadline=None, with_payload=False,
            num_jobs=spec.args['analysis']['calibration_jobs'])
        records = Simulation(calibration).run()
        cs2 = _cs2(spec.args, records)
        if math.isnan(cs2):
            cs2 = 0.0

    profiles = full_job_profiles(config)
    service = ServiceStats.with_cs2(service_lower_bound(profiles), float(cs2))
    result = layer_bounds(profiles, config.m, ArrivalProcess.poisson(config.arrival_rate), service)
    rows = bounds_table(result, config.m)
    logger.log(dict(cs2=float(cs2), queueing=result.queueing), 0)

    columns = ['layer', 'mini_jobs', 'cumulative_fraction', 'ts_bound', 'delay_bound']
    write_table(spec.out, spec.format, columns, rows, provenance(spec.args))
    return rows

def verify_codec(spec, logger):
    '''Decodes random instances from many k-subsets of their task results'''
    verify = spec.args['verify']
    rng = np.random.default_rng(spec.args['seed'])
    cases = list(itertools.product([1, 2, 3], [1, 2, 3], verify['omegas']))
    rows = []
    for case in range(verify['trials']):
        n1, n2, omega = cases[case % len(cases)]
        rows_a = int(rng.integers(1, verify['max_dim'] + 1))
        cols_a = int(rng.integers(1, verify['max_dim'] + 1))
        cols_b = int(rng.integers(1, verify['max_dim'] + 1))
        high = verify['max_entry'] + 1
        k = n1 * n2
        num_tasks = code_num_tasks(k, omega)
        # Large enough that the integer product never wraps
        modulus = find_prime_above(max(rows_a * (high - 1)**2, num_tasks, 2))
        a = FieldMatrix(rng.integers(0, high, size=(rows_a, cols_a)), modulus)
        b = FieldMatrix(rng.integers(0, high, size=(rows_a, cols_b)), modulus)
        params = CodeParams(n1, n2, omega, modulus)
        results = [compute_task(t) for t in encode(a, b, params, pad=True)]
        expected = mat_mul_transpose(a, b)
        oracle = a.to_numpy().astype(np.int64).T @ b.to_numpy().astype(np.int64)

        if math.comb(num_tasks, k) <= verify['exhaustive_limit']:
            subsets = list(itertools.combinations(range(num_tasks), k))
        else:
            subsets = [tuple(rng.choice(num_tasks, size=k, replace=False)) for _ in range(verify['random_subsets'])]

        passed = True
        for subset in subsets:
            decoded = decode([results[i] for i in subset], params, shape=(cols_a, cols_b))
            passed = passed and decoded == expected and np.array_equal(decoded.to_numpy(), oracle)

        rows.append(dict(case=case, n1=n1, n2=n2, omega=float(omega), k=k,
            num_tasks=num_tasks, subsets=len(subsets), passed=passed))

    logger.log(dict(cases=len(rows), passed=sum(r['passed'] for r in rows)), 0)
    columns = ['case', 'n1', 'n2', 'omega', 'k', 'num_tasks', 'subsets', 'passed']
    write_table(spec.out, spec.format, columns, rows, provenance(spec.args))
    return rows


def run_experiment(spec, logger=None):
    '''Runs one mode end to end and returns its exit status'''
    logger = logger or make_logger(spec.args)
    start = time.time()
    config = spec.sim
    summary = dict(mode=spec.mode, config=spec.args['name'], seed=config.seed, workers=config.num_workers,
        arrival_rate=config.arrival_rate, k=config.k, omega=config.omega, m=config.m, jobs=config.num_jobs)
    status = EXIT_OK
    layer_rows = []
    diagnostics = None

    if spec.mode == 'simulate':
        stats, diagnostics = simulate(spec, logger)
        layer_rows = [dict(layer=l, **s) for l, s in enumerate(stats['layer'])]
        summary['terminated'] = stats['terminated']
        if config.with_payload:
            summary['payload_ok'] = stats['payload_ok']
            if not stats['payload_ok']:
                status = EXIT_RUNTIME
    elif spec.mode in ('sweep-omega', 'sweep-deadline'):
        backend = make_backend(spec.args)
        try:
            fn = sweep_omega if spec.mode == 'sweep-omega' else sweep_deadline
            layer_rows = fn(spec, logger, backend)
        finally:
            backend.close()
        summary['points'] = len(spec.grid)
    elif spec.mode == 'bounds':
        layer_rows = bounds(spec, logger)
    else:
        layer_rows = verify_codec(spec, logger)
        failed = sum(not r['passed'] for r in layer_rows)
        summary['failed'] = failed
        if failed:
            status = EXIT_RUNTIME

    logger.close()
    summary['wall_time'] = time.time() - start
    if not spec.args['output']['quiet']:
        print_dashboard(spec.mode, summary, layer_rows[:40], diagnostics)

    return status


### Config
def _config_paths(name):
    project_dir = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))
    default = os.path.join(project_dir, 'config/default.ini')
    if name is None or name == 'default':
        return [default]
    if os.path.isfile(name):
        return [default, name]

    for path in sorted(glob.glob(os.path.join(project_dir, 'config/**/*.ini'), recursive=True)):
        p = configparser.ConfigParser()
        p.read([default, path])
        if name in p['base']['name'].split():
            return [default, path]

    raise ConfigError(f'No config file or config name {name}')

def load_config(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = ArgumentParser(
        description=f'layercode [bright_cyan]{layercode.__version__}[/]'
        ' experiment options. Every config key is also a flag',
        formatter_class=RichHelpFormatter, add_help=False, allow_abbrev=False)
    parser.add_argument('--config', type=str, default=None,
        help='Path to an .ini file or the [base] name of a shipped config')
    parser.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='RNG seed (unsigned 64-bit)')
    parser.add_argument('--jobs', type=int, default=argparse.SUPPRESS, help='Number of jobs to simulate')
    parser.add_argument('--omega', type=float, default=argparse.SUPPRESS, help='Redundancy ratio')
    parser.add_argument('--m', type=int, default=argparse.SUPPRESS, help='Chunks per element (1 disables layering)')
    parser.add_argument('--deadline', type=float, default=argparse.SUPPRESS, help='Per-job computation budget')
    parser.add_argument('--out', type=str, default=argparse.SUPPRESS, help='Output path, - for stdout')
    parser.add_argument('--format', type=str, default=argparse.SUPPRESS, choices=['csv', 'json'])
    parser.add_argument('--intra-layer', type=str, default=argparse.SUPPRESS, choices=['concurrent', 'serial'])
    parser.add_argument('--with-payload', action='store_true', default=argparse.SUPPRESS,
        help='Run the real codec on small matrices inside the simulation')
    args = parser.parse_known_args(argv)[0]

    p = configparser.ConfigParser()
    try:
        read = p.read(_config_paths(args.config))
    except configparser.Error as e:
        raise ConfigError(f'Malformed config: {e}')
    if not read or 'base' not in p:
        raise ConfigError('config/default.ini is missing')

    # Dynamic help menu from config
    def config_type(value):
        try:
            return ast.literal_eval(value)
        except (ValueError, SyntaxError):
            return value

    for section in p.sections():
        for key in p[section]:
            if section == 'base' and key == 'seed':
                continue
            fmt = f'--{key}' if section == 'base' else f'--{section}.{key}'
            parser.add_argument(
                fmt.replace('_', '-'),
                default=config_type(p[section][key]),
                type=config_type
            )

    parser.add_argument('-h', '--help', default=argparse.SUPPRESS,
        action='help', help='Show this help message and exit')

    # Unpack to nested dict
    parsed = vars(parser.parse_args(argv))
    parsed.pop('config')
    pinned = []
    for alias, (section, key) in ALIASES.items():
        if alias in parsed:
            parsed[f'{section}.{key}'] = parsed.pop(alias)
            pinned.append(key)

    seed = parsed.pop('seed', None)
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f'{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]}')
    if seed is None:
        seed = config_type(p['base'].get('seed', '0'))

    args = defaultdict(dict)
    for key, value in parsed.items():
        next = args
        for subkey in key.split('.'):
            prev = next
            next = next.setdefault(subkey, {})

        prev[subkey] = value

    args['seed'] = seed
    args = _plain(args)
    args['_pinned'] = pinned
    return args

def _plain(d):
    return {k: _plain(v) if isinstance(v, dict) else v for k, v in d.items()}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    err = f'Usage: layercode [{", ".join(MODES)}] [optional args]. --help for more info'
    if not argv or argv[0] not in MODES:
        if argv and argv[0] in ('-h', '--help'):
            console.print(err, highlight=False)
            return EXIT_OK
        console.print(f'[red]{err}', highlight=False)
        return EXIT_CONFIG

    mode = argv.pop(0)
    try:
        args = load_config(argv)
        spec = ExperimentSpec(mode, args)
    except APIUsageError as e:
        console.print(f'[red]Config error:[/] {e}', highlight=False)
        return EXIT_CONFIG

    try:
        return run_experiment(spec)
    except Exception as e:
        console.print(f'[red]Runtime error:[/] {type(e).__name__}: {e}', highlight=False)
        return EXIT_RUNTIME

if __name__ == '__main__':
    sys.exit(main())
