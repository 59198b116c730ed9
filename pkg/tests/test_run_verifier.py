import json

import pytest

from errors import ConfigError
from run_verifier import MANIFEST_NAME, RunVerifier


def _populate(root, metrics='m,t_total\n0,11\n'):
    root.mkdir(parents=True, exist_ok=True)
    (root / 'metrics.csv').write_text(metrics, encoding='utf-8')
    (root / 'checkpoints').mkdir(exist_ok=True)
    (root / 'checkpoints' / 'replicate_0.json').write_text('{"format": "netsac-policy"}', encoding='utf-8')
    return root


def test_hash_ignores_key_order():
    verifier = RunVerifier()
    assert verifier.generate_hash({'a': 1, 'b': 2}) == verifier.generate_hash({'b': 2, 'a': 1})
    assert len(verifier.generate_hash([1, 2])) == 64


def test_identical_runs_match(tmp_path):
    first = _populate(tmp_path / 'first')
    second = _populate(tmp_path / 'second')
    verifier = RunVerifier()
    result = verifier.verify_no_changes(first, second)
    assert result['match']
    assert result['total_files'] == 2
    assert 'violations' not in result
    assert "[PASS]" in verifier.generate_attestation(result)


def test_changed_and_missing_artifacts(tmp_path):
    first = _populate(tmp_path / 'first')
    second = _populate(tmp_path / 'second', metrics='m,t_total\n0,12\n')
    (first / 'baseline.csv').write_text('p_empty,mean,stderr\n', encoding='utf-8')
    result = RunVerifier().verify_no_changes(first, second)
    assert not result['match']
    changes = {v['artifact']: v['changes'] for v in result['violations']}
    assert changes == {'baseline.csv': 'missing from second run', 'metrics.csv': 'content differs'}
    attestation = RunVerifier().generate_attestation(result)
    assert "[FAIL]" in attestation and "metrics.csv: content differs" in attestation


def test_manifest_is_excluded_from_comparison(tmp_path):
    first = _populate(tmp_path / 'first')
    second = _populate(tmp_path / 'second')
    (first / MANIFEST_NAME).write_text('{}', encoding='utf-8')
    assert RunVerifier().verify_no_changes(first, second)['match']


def test_manifest_check_detects_tampering(tmp_path):
    run_dir = _populate(tmp_path / 'run')
    verifier = RunVerifier()
    manifest = {'artifacts': verifier.artifact_hashes(run_dir)}
    (run_dir / MANIFEST_NAME).write_text(json.dumps(manifest), encoding='utf-8')
    assert verifier.verify_manifest(run_dir)['match']
    (run_dir / 'metrics.csv').write_text('tampered\n', encoding='utf-8')
    result = verifier.verify_manifest(run_dir)
    assert not result['match']
    assert result['violations'][0]['artifact'] == 'metrics.csv'


def test_missing_directory_and_manifest(tmp_path):
    verifier = RunVerifier()
    with pytest.raises(ConfigError):
        verifier.artifact_hashes(tmp_path / 'absent')
    with pytest.raises(ConfigError):
        verifier.verify_manifest(_populate(tmp_path / 'run'))


def test_export_report(tmp_path):
    verifier = RunVerifier()
    run_dir = _populate(tmp_path / 'run')
    verifier.verify_no_changes(run_dir, run_dir)
    path = verifier.export_verification_report(tmp_path / 'report.json')
    report = json.loads(path.read_text(encoding='utf-8'))
    assert report['verification_count'] == 1
    assert report['hash_algorithm'] == 'SHA-256'
