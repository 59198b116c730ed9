import csv
import json

import pytest

from envs import WirelessConfig, build_wireless
from errors import ConfigError, PreconditionError
from harness import (METRICS_COLUMNS, ExperimentConfig, _format, load_experiment_config, main, run_experiment,
                     sweep_baseline)
from run_verifier import MANIFEST_NAME, RunVerifier

SMALL = """\
seed: 3
replicates: 2
oracle: true
environment:
  kind: synthetic
  graph: {kind: path, n: 3}
sac:
  kappa: 1
  beta: 0
  T: 20
  M: 2
  H: 5.0
  t0: 20.0
  eta: 0.1
"""


def _small_config(out_dir, **overrides):
    params = dict(environment={'kind': 'synthetic', 'graph': {'kind': 'path', 'n': 3}},
                  sac={'kappa': 1, 'beta': 0, 'T': 20, 'M': 2, 'H': 5.0, 't0': 20.0, 'eta': 0.1},
                  seed=3, replicates=2, output_dir=str(out_dir), oracle=True)
    params.update(overrides)
    return ExperimentConfig(**params)


def test_load_sample_configs(config_dir, monkeypatch):
    monkeypatch.delenv('NETSAC_OUT_DIR', raising=False)
    monkeypatch.delenv('NETSAC_WORKERS', raising=False)
    config = load_experiment_config(config_dir / 'wireless_5x5.yaml')
    assert config.environment['kind'] == 'wireless'
    assert config.sac['kappa'] == 1 and config.sac['M'] == 500
    assert config.baseline['grid'][0] == 0.0
    assert config.eval_rollouts == 20
    assert config.output_dir == 'runs/wireless_5x5'
    assert load_experiment_config(config_dir / 'oracle_path3.yaml').oracle
    assert load_experiment_config(config_dir / 'sis_5x5.yaml').sac['beta'] == 1
    shared = load_experiment_config(config_dir / 'wireless_3x4.yaml').environment
    wireless = WirelessConfig(**{k: v for k, v in shared.items() if k != 'kind'})
    assert (len(wireless.access_lists()), wireless.num_aps) == (24, 20)


def test_defaults_for_schedule(write_config):
    config = load_experiment_config(write_config("environment: {kind: sis}\nsac: {kappa: 1, beta: 0, T: 5, M: 1}\n"))
    assert config.sac['H'] == 1.0
    assert config.sac['t0'] == 4.0
    assert config.sac['eta'] == 0.1


def test_unknown_key_reports_line(write_config):
    path = write_config("environment:\n  kind: sis\nsac:\n  kappa: 1\n  bogus: 2\n")
    with pytest.raises(ConfigError) as info:
        load_experiment_config(path)
    assert info.value.line == 5
    assert "sac.bogus" in str(info.value)


def test_unknown_environment_key_reports_line(write_config):
    path = write_config("environment:\n  kind: wireless\n  colour: red\nsac: {kappa: 1, beta: 0, T: 5, M: 1}\n")
    with pytest.raises(ConfigError) as info:
        load_experiment_config(path)
    assert info.value.line == 3


def test_invalid_values(write_config):
    with pytest.raises(ConfigError, match="missing key 'sac.T'"):
        load_experiment_config(write_config("environment: {kind: sis}\nsac: {kappa: 1, beta: 0, M: 1}\n"))
    with pytest.raises(ConfigError, match="replicates"):
        load_experiment_config(write_config(
            "replicates: 0\nenvironment: {kind: sis}\nsac: {kappa: 1, beta: 0, T: 5, M: 1}\n"))
    with pytest.raises(ConfigError, match="must be int"):
        load_experiment_config(write_config("environment: {kind: sis}\nsac: {kappa: one, beta: 0, T: 5, M: 1}\n"))
    with pytest.raises(ConfigError, match="line"):
        load_experiment_config(write_config("environment: [kind\n"))
    with pytest.raises(ConfigError):
        load_experiment_config(write_config("environment: {kind: traffic}\nsac: {kappa: 1, beta: 0, T: 5, M: 1}\n"))


def test_overrides_take_precedence(write_config, monkeypatch):
    path = write_config(SMALL)
    monkeypatch.setenv('NETSAC_OUT_DIR', 'env-out')
    monkeypatch.setenv('NETSAC_WORKERS', '3')
    config = load_experiment_config(path)
    assert config.output_dir == 'env-out' and config.workers == 3
    config = load_experiment_config(path, seed=9, out='cli-out', workers=2)
    assert (config.seed, config.output_dir, config.workers) == (9, 'cli-out', 2)
    assert load_experiment_config(path, env='sis').environment == {'kind': 'sis'}


def test_explicit_zero_workers_is_rejected(write_config, monkeypatch, tmp_path):
    path = write_config(SMALL)
    monkeypatch.setenv('NETSAC_WORKERS', '3')
    with pytest.raises(ConfigError, match="got 0") as excinfo:
        load_experiment_config(path, workers=0)
    assert excinfo.value.line is None
    monkeypatch.delenv('NETSAC_WORKERS')
    assert load_experiment_config(path, workers=None).workers == 1
    assert main(['run', '--config', str(path), '--workers', '0', '--out', str(tmp_path / 'zero')]) == 2


def test_format_cells():
    assert _format(None) == ''
    assert _format(3) == '3'
    assert _format(True) == '1'
    assert _format(0.1) == '0.1'


def test_run_writes_artifacts(tmp_path, quiet_schedule):
    summary = run_experiment(_small_config(tmp_path / 'run'), quiet=True)
    out = tmp_path / 'run'
    assert summary['rows'] == 4
    with open(out / 'metrics.csv', encoding='utf-8', newline='') as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == METRICS_COLUMNS
    assert all(row['wall_ms'] == '' and row['return_exact'] != '' for row in rows)
    assert {row['replicate'] for row in rows} == {'0', '1'}
    assert (out / 'checkpoints' / 'replicate_1.json').is_file()
    manifest = json.loads((out / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert set(manifest['artifacts']) == {'metrics.csv', 'checkpoints/replicate_0.json',
                                          'checkpoints/replicate_1.json'}
    assert manifest['seed'] == 3
    assert RunVerifier().verify_manifest(out)['match']


def test_same_seed_reproduces_artifacts(tmp_path, quiet_schedule):
    run_experiment(_small_config(tmp_path / 'a'), quiet=True)
    run_experiment(_small_config(tmp_path / 'b'), quiet=True)
    run_experiment(_small_config(tmp_path / 'c', seed=4), quiet=True)
    verifier = RunVerifier()
    assert verifier.verify_no_changes(tmp_path / 'a', tmp_path / 'b')['match']
    assert not verifier.verify_no_changes(tmp_path / 'a', tmp_path / 'c')['match']


def test_wall_time_fills_column(tmp_path, quiet_schedule):
    run_experiment(_small_config(tmp_path / 'run', replicates=1, wall_time=True), quiet=True)
    with open(tmp_path / 'run' / 'metrics.csv', encoding='utf-8', newline='') as f:
        assert all(row['wall_ms'] != '' for row in csv.DictReader(f))


def test_wireless_run_writes_baseline(tmp_path, quiet_schedule):
    config = _small_config(tmp_path / 'run', replicates=1, oracle=False,
                           environment={'kind': 'wireless', 'h': 1, 'w': 2, 'd': 1},
                           baseline={'grid': [0.0, 1.0], 'rollouts': 5})
    summary = run_experiment(config, quiet=True)
    assert summary['baseline']['p_empty'] in (0.0, 1.0)
    assert (tmp_path / 'run' / 'baseline.csv').is_file()
    assert summary['manifest']['baseline_best'] is not None


def test_sweep_selects_best_and_breaks_ties(lone_user):
    best = sweep_baseline(lone_user, [0.5, 0.0, 1.0], 0, method='exact')
    assert best['p_empty'] == 0.0
    assert len(best['points']) == 3
    silent = build_wireless(WirelessConfig(d=1, q=1.0, ap_probs=(0.0,), user_access=((0,),)), None)
    assert sweep_baseline(silent, [0.5, 0.2, 0.9], 0, method='exact')['p_empty'] == 0.2
    with pytest.raises(PreconditionError):
        sweep_baseline(lone_user, [], 10)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(['run', '--config', str(tmp_path / 'absent.yaml')]) == 2
    assert main(['validate', '--suite', 'nope']) == 2
    first = tmp_path / 'first'
    first.mkdir()
    (first / 'metrics.csv').write_text('m\n', encoding='utf-8')
    assert main(['verify', str(first), str(first)]) == 0
    assert "VERIFICATION PASSED" in capsys.readouterr().out


def test_cli_run_and_verify(tmp_path, write_config, quiet_schedule):
    path = write_config(SMALL)
    assert main(['run', '--config', str(path), '--out', str(tmp_path / 'one')]) == 0
    assert main(['run', '--config', str(path), '--out', str(tmp_path / 'two')]) == 0
    attestation = tmp_path / 'attestation.txt'
    assert main(['verify', str(tmp_path / 'one'), str(tmp_path / 'two'), '--attestation', str(attestation)]) == 0
    assert "HASHES MATCH" in attestation.read_text(encoding='utf-8')
    assert main(['verify', str(tmp_path / 'one')]) == 0


def test_cli_estimate_decay(tmp_path, write_config):
    path = write_config("environment: {kind: sis, h: 3, w: 3}\nsac: {kappa: 1, beta: 0, T: 5, M: 1}\n")
    assert main(['estimate-decay', '--config', str(path), '--out', str(tmp_path / 'decay'),
                 '--agent', '4', '--kappas', '1', '--samples', '50']) == 0
    with open(tmp_path / 'decay' / 'decay.csv', encoding='utf-8', newline='') as f:
        rows = list(csv.DictReader(f))
    assert rows[0]['kappa'] == '1' and rows[0]['near_exp_bound'] != ''
