#!/usr/bin/env python3
"""
Experiment Harness
Command-line runner for training, baseline sweeps, decay estimates, validation and run verification
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import os
import platform
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import networkx as nx
import numpy as np
import scipy
import yaml

from decay import decay_table
from envs import ENVIRONMENT_KEYS, aloha_policy, build_environment, unknown_keys
from errors import ConfigError, NetSACError, PreconditionError
from netmdp import derive_seed, exact_objective, make_rng
from run_verifier import MANIFEST_NAME, RunVerifier, print_verification_summary
from sac import SACConfig, evaluate_policy, evaluation_horizon, run, save_checkpoint
from validation_suite import ValidationSuite

logger = logging.getLogger(__name__)

VERSION = '1.0'
METRICS_COLUMNS = ['run_id', 'seed', 'replicate', 'm', 't_total', 'return_estimate', 'return_exact',
                   'grad_norm', 'max_critic_residual', 'wall_ms']
BASELINE_COLUMNS = ['p_empty', 'mean', 'stderr']
DECAY_COLUMNS = ['kappa', 'mc_mean', 'mc_stderr', 'exp_bound', 'near_exp_bound']

TOP_LEVEL_KEYS = {'seed', 'replicates', 'workers', 'output', 'environment', 'sac', 'evaluation', 'baseline',
                  'oracle'}
SAC_KEYS = {'kappa', 'beta', 'T', 'M', 'H', 't0', 'eta', 'warm_start', 'sigma_prime', 'K2', 'W_prime'}
BASELINE_KEYS = {'grid', 'rollouts', 'method'}


# ======================================================================
# Configuration
# ======================================================================

@dataclass
class ExperimentConfig:
    """Resolved experiment configuration"""
    environment: dict
    sac: dict
    seed: int = 0
    replicates: int = 1
    workers: int = 1
    output_dir: str = 'runs'
    baseline: Optional[dict] = None
    oracle: bool = False
    eval_rollouts: int = 0
    wall_time: bool = False
    source: Optional[str] = None
    notes: Optional[str] = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError(f"replicates must be at least 1, got {self.replicates}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")

    def sac_config(self, gamma, seed) -> SACConfig:
        return SACConfig(gamma=gamma, seed=seed, eval_rollouts=self.eval_rollouts, oracle=self.oracle, **self.sac)

    def resolved(self) -> dict:
        data = asdict(self)
        data.pop('source')
        data.pop('wall_time')
        return data


def _key_lines(node, prefix='') -> Dict[str, int]:
    """Dotted key path -> 1-based line of the key"""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}{key_node.value}"
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path + '.'))
    return lines


def _check_keys(section, allowed, prefix, lines, path):
    for key in section:
        if key not in allowed:
            name = f"{prefix}{key}"
            raise ConfigError(f"unknown key '{name}'", line=lines.get(name), path=path)


def _number(value, kind, name, lines, path):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be {kind.__name__}, got {value!r}", line=lines.get(name), path=path) from None


def load_experiment_config(path, seed=None, out=None, env=None, workers=None, wall_time=False) -> ExperimentConfig:
    """
    Read a YAML (or JSON) experiment file

    CLI arguments override NETSAC_OUT_DIR / NETSAC_WORKERS, which override
    the file.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    try:
        data = yaml.safe_load(text) or {}
        lines = _key_lines(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None, path=path) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path=path)

    _check_keys(data, TOP_LEVEL_KEYS, '', lines, path)
    sac = dict(data.get('sac') or {})
    _check_keys(sac, SAC_KEYS, 'sac.', lines, path)
    for name in ('kappa', 'beta', 'T', 'M'):
        if name not in sac:
            raise ConfigError(f"missing key 'sac.{name}'", line=lines.get('sac'), path=path)
        sac[name] = _number(sac[name], int, f"sac.{name}", lines, path)
    for name in ('H', 't0', 'eta', 'sigma_prime', 'K2', 'W_prime'):
        if sac.get(name) is not None:
            sac[name] = _number(sac[name], float, f"sac.{name}", lines, path)
    sac.setdefault('H', 1.0)
    sac.setdefault('t0', max(4.0 * sac['H'], 1.0))
    sac.setdefault('eta', 0.1)

    environment = dict(data.get('environment') or {})
    if env is not None and environment.get('kind') != env:
        environment = {'kind': env}
    if environment.get('kind') not in ENVIRONMENT_KEYS:
        raise ConfigError(f"environment.kind must be one of {', '.join(sorted(ENVIRONMENT_KEYS))}",
                          line=lines.get('environment.kind', lines.get('environment')), path=path)
    extra = unknown_keys(environment)
    if extra:
        name = f"environment.{extra[0]}"
        raise ConfigError(f"unknown key '{name}'", line=lines.get(name), path=path)

    baseline = data.get('baseline')
    if baseline is not None:
        _check_keys(baseline, BASELINE_KEYS, 'baseline.', lines, path)
        if not baseline.get('grid'):
            raise ConfigError("baseline grid must be nonempty", line=lines.get('baseline.grid'), path=path)

    output = data.get('output') or {}
    evaluation = data.get('evaluation') or {}
    replicates = _number(data.get('replicates', 1), int, 'replicates', lines, path)
    if replicates < 1:
        raise ConfigError(f"replicates must be at least 1, got {replicates}", line=lines.get('replicates'), path=path)
    seed = _number(seed if seed is not None else data.get('seed', 0), int, 'seed', lines, path)
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}", line=lines.get('seed'), path=path)
    workers_line = None
    if workers is None:
        workers = os.environ.get('NETSAC_WORKERS') or None
    if workers is None:
        workers = data.get('workers', 1)
        workers_line = lines.get('workers')
    workers = _number(workers, int, 'workers', lines, path)
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}", line=workers_line, path=path)

    return ExperimentConfig(
        environment=environment,
        sac=sac,
        seed=seed,
        replicates=replicates,
        workers=workers,
        output_dir=out if out is not None else (os.environ.get('NETSAC_OUT_DIR') or output.get('dir', 'runs')),
        baseline=baseline,
        oracle=bool(data.get('oracle', False)),
        eval_rollouts=_number(evaluation.get('rollouts', 0), int, 'evaluation.rollouts', lines, path),
        wall_time=wall_time,
        source=str(path),
    )


# ======================================================================
# Experiment
# ======================================================================

def _format(value):
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _run_replicate(job):
    """Train one replicate; runs in a worker process"""
    config, replicate = job
    mdp = build_environment(config.environment, make_rng(config.seed, 'environment'))
    seed = derive_seed(config.seed, 'replicate', replicate)
    record = run(mdp, config.sac_config(mdp.gamma, seed))
    run_id = f"{mdp.name}-s{config.seed}-r{replicate}"
    rows = []
    for metrics in record.metrics:
        rows.append({
            'run_id': run_id,
            'seed': seed,
            'replicate': replicate,
            'm': metrics.m,
            't_total': metrics.t_total,
            'return_estimate': metrics.return_estimate,
            'return_exact': metrics.return_exact,
            'grad_norm': metrics.grad_norm,
            'max_critic_residual': metrics.max_critic_residual,
            'wall_ms': metrics.wall_ms if config.wall_time else None,
        })
    return replicate, seed, rows, record.policy


def sweep_baseline(mdp, grid, rollouts, seed=0, method='rollout') -> dict:
    """
    Evaluate the localized ALOHA policy at each p_empty in grid

    Returns:
        dict: best point with per-point means and standard errors;
        ties go to the smaller p_empty
    """
    if not grid:
        raise PreconditionError("baseline grid must be nonempty")
    if method not in ('rollout', 'exact'):
        raise PreconditionError(f"unknown baseline method '{method}'")
    points = []
    for k, p_empty in enumerate(grid):
        policy = aloha_policy(mdp, float(p_empty))
        if method == 'exact':
            mean, stderr = exact_objective(mdp, policy), 0.0
        else:
            mean, stderr = evaluate_policy(mdp, policy, rollouts, make_rng(seed, 'baseline', k))
        points.append({'p_empty': float(p_empty), 'mean': mean, 'stderr': stderr})
        logger.info("p_empty=%.3f: %.4f +- %.4f", p_empty, mean, stderr)
    best = min(points, key=lambda point: (-point['mean'], point['p_empty']))
    return dict(best, points=points)


def _write_csv(path, columns, rows):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(row.get(key)) for key in columns})


def _versions() -> dict:
    return {
        'netsac': VERSION,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'networkx': nx.__version__,
        'pyyaml': yaml.__version__,
    }


def _phase(number, title, quiet):
    if not quiet:
        print("\n" + "=" * 70)
        print(f"PHASE {number}: {title}")
        print("=" * 70)


def run_experiment(config: ExperimentConfig, quiet=False) -> dict:
    """
    Train every replicate, sweep the baseline and write run artifacts

    Artifacts: metrics.csv, checkpoints/replicate_<r>.json, baseline.csv
    (when configured) and manifest.json with SHA-256 of every file.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'checkpoints').mkdir(exist_ok=True)

    if not quiet:
        print("=" * 70)
        print("NETWORKED ACTOR-CRITIC EXPERIMENT")
        print(f"Config: {config.source or '(in-memory)'}  Seed: {config.seed}")
        print("=" * 70)

    _phase(1, "Environment", quiet)
    mdp = build_environment(config.environment, make_rng(config.seed, 'environment'))
    if not quiet:
        print(f"✓ {mdp.name}: {mdp.n} agents, gamma={mdp.gamma}")

    _phase(2, f"Training ({config.replicates} replicate(s), {config.workers} worker(s))", quiet)
    jobs = [(config, r) for r in range(config.replicates)]
    if config.workers > 1 and config.replicates > 1:
        with multiprocessing.Pool(min(config.workers, config.replicates)) as pool:
            results = pool.map(_run_replicate, jobs)
    else:
        results = [_run_replicate(job) for job in jobs]
    results.sort(key=lambda item: item[0])

    rows = [row for _, _, replicate_rows, _ in results for row in replicate_rows]
    _write_csv(out_dir / 'metrics.csv', METRICS_COLUMNS, rows)
    replicate_seeds = {}
    for replicate, seed, _, policy in results:
        replicate_seeds[replicate] = seed
        save_checkpoint(policy, out_dir / 'checkpoints' / f'replicate_{replicate}.json',
                        extra={'seed': seed, 'replicate': replicate})
        if not quiet:
            print(f"✓ replicate {replicate} (seed {seed}): {len([r for r in rows if r['replicate'] == replicate])} iterations")

    best = None
    if config.baseline:
        _phase(3, "Baseline Sweep", quiet)
        if mdp.name != 'wireless':
            logger.warning("baseline sweep needs a wireless environment; skipped for %s", mdp.name)
        else:
            best = sweep_baseline(mdp, config.baseline['grid'], config.baseline.get('rollouts', 100),
                                  config.seed, config.baseline.get('method', 'rollout'))
            _write_csv(out_dir / 'baseline.csv', BASELINE_COLUMNS, best['points'])
            if not quiet:
                print(f"✓ best p_empty={best['p_empty']} ({best['mean']:.4f} +- {best['stderr']:.4f})")

    _phase(4, "Manifest", quiet)
    verifier = RunVerifier()
    horizon = evaluation_horizon(mdp.gamma)
    manifest = {
        'version': VERSION,
        'seed': config.seed,
        'config': config.resolved(),
        'replicate_seeds': {str(k): v for k, v in sorted(replicate_seeds.items())},
        'environment': mdp.describe(),
        'return_estimator': (f"{config.eval_rollouts} evaluation rollouts of horizon {horizon}"
                             if config.eval_rollouts else "discounted return of the training trajectory"),
        'notes': config.notes,
        'baseline_best': None if best is None else {k: best[k] for k in ('p_empty', 'mean', 'stderr')},
        'versions': _versions(),
        'hash_algorithm': 'SHA-256',
        'artifacts': verifier.artifact_hashes(out_dir),
    }
    with open(out_dir / MANIFEST_NAME, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=_json_default)
    if not quiet:
        print(f"✓ {len(manifest['artifacts'])} artifact(s) recorded in {out_dir / MANIFEST_NAME}")
    return {'out_dir': str(out_dir), 'rows': len(rows), 'baseline': best, 'manifest': manifest}


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


# ======================================================================
# Subcommands
# ======================================================================

def cmd_run(args):
    config = load_experiment_config(args.config, args.seed, args.out, args.env, args.workers, args.wall_time)
    summary = run_experiment(config)
    print(f"\n✓ {summary['rows']} metrics row(s) written to {summary['out_dir']}")
    return 0


def cmd_sweep_baseline(args):
    config = load_experiment_config(args.config, args.seed, args.out, args.env or 'wireless', args.workers)
    mdp = build_environment(config.environment, make_rng(config.seed, 'environment'))
    baseline = config.baseline or {}
    grid = args.grid or baseline.get('grid') or [k / 10 for k in range(11)]
    rollouts = args.rollouts or baseline.get('rollouts', 100)
    best = sweep_baseline(mdp, grid, rollouts, config.seed, args.method or baseline.get('method', 'rollout'))

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / 'baseline.csv', BASELINE_COLUMNS, best['points'])
    print("\n" + "-" * 70)
    for point in best['points']:
        print(f"  p_empty={point['p_empty']:.2f}: {point['mean']:.4f} +- {point['stderr']:.4f}")
    print("-" * 70)
    print(f"✓ best p_empty={best['p_empty']}")
    return 0


def cmd_estimate_decay(args):
    config = load_experiment_config(args.config, args.seed, args.out, args.env)
    mdp = build_environment(config.environment, make_rng(config.seed, 'environment'))
    kappas = [int(k) for k in args.kappas.split(',')]
    rows = decay_table(mdp.graph, mdp.link_dist, config.sac['beta'], args.agent, kappas, mdp.gamma,
                       args.samples, config.seed, args.c0, args.n0)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / 'decay.csv', DECAY_COLUMNS, rows)
    for row in rows:
        print(f"  kappa={row['kappa']}: E[gamma^X]={row['mc_mean']:.5f} +- {row['mc_stderr']:.5f}")
    print(f"✓ decay table written to {out_dir / 'decay.csv'}")
    return 0


def cmd_validate(args):
    report = ValidationSuite().run(args.suite, args.scale)
    if args.report:
        with open(args.report, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2, default=_json_default)
    if report['all_passed']:
        print("✓✓✓ VALIDATION PASSED ✓✓✓")
        return 0
    print(f"✗✗✗ VALIDATION FAILED ✗✗✗ ({report['failed_count']} check(s))")
    return 1


def cmd_verify(args):
    verifier = RunVerifier()
    if args.second is None:
        result = verifier.verify_manifest(args.first)
    else:
        result = verifier.verify_no_changes(args.first, args.second)
    print_verification_summary(result)
    if args.report:
        verifier.export_verification_report(args.report)
    if args.attestation:
        with open(args.attestation, 'w', encoding='utf-8') as f:
            f.write(verifier.generate_attestation(result))
    return 0 if result['match'] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='netsac', description="Scalable actor-critic experiments for networked MDPs")
    parser.add_argument('--log-level', default=os.environ.get('NETSAC_LOG_LEVEL', 'WARNING'),
                        help="logging level (default WARNING, env NETSAC_LOG_LEVEL)")
    sub = parser.add_subparsers(dest='command', required=True)

    def experiment_args(p, config_required=True):
        p.add_argument('--config', required=config_required, help="experiment YAML/JSON file")
        p.add_argument('--seed', type=int, help="override the config seed")
        p.add_argument('--out', help="output directory (env NETSAC_OUT_DIR)")
        p.add_argument('--env', choices=['wireless', 'sis', 'synthetic'], help="environment kind")
        p.add_argument('--workers', type=int, help="worker processes (env NETSAC_WORKERS)")

    p = sub.add_parser('run', help="train SAC over replicates and write artifacts")
    experiment_args(p)
    p.add_argument('--wall-time', action='store_true', help="record wall_ms (artifacts stop being byte-identical)")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('sweep-baseline', help="tune the localized ALOHA p_empty")
    experiment_args(p)
    p.add_argument('--grid', type=lambda text: [float(x) for x in text.split(',')], help="comma-separated p_empty values")
    p.add_argument('--rollouts', type=int)
    p.add_argument('--method', choices=['rollout', 'exact'])
    p.set_defaults(handler=cmd_sweep_baseline)

    p = sub.add_parser('estimate-decay', help="Monte-Carlo spread times against decay bounds")
    experiment_args(p)
    p.add_argument('--agent', type=int, default=0)
    p.add_argument('--kappas', default='1,2,3')
    p.add_argument('--samples', type=int, default=10_000)
    p.add_argument('--c0', type=float, default=4.0)
    p.add_argument('--n0', type=int, default=1)
    p.set_defaults(handler=cmd_estimate_decay)

    p = sub.add_parser('validate', help="run the invariant and oracle checks")
    p.add_argument('--suite', default='', help="module suite to run (default: all)")
    p.add_argument('--scale', choices=['quick', 'full'], default='quick')
    p.add_argument('--report', help="write the JSON report here")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser('verify', help="compare two run directories or check one manifest")
    p.add_argument('first')
    p.add_argument('second', nargs='?')
    p.add_argument('--report', help="write the JSON verification report here")
    p.add_argument('--attestation', help="write the attestation text here")
    p.set_defaults(handler=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except NetSACError as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("\n⚠️ Interrupted", file=sys.stderr)
        return 130


if __name__ == '__main__':
    sys.exit(main())
