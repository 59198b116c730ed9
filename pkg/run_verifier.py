#!/usr/bin/env python3
"""
Run Verification Module
SHA-256 artifact hashes to prove two runs produced identical outputs
"""

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path

from errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
CHUNK_SIZE = 1 << 16


class RunVerifier:
    """
    Cryptographic comparison of run directories
    Proves that a (config, seed) pair reproduces its artifacts byte for byte
    """

    def __init__(self):
        self.verification_log = []

    def generate_hash(self, data):
        """
        SHA-256 of a JSON-compatible value

        Args:
            data: Dictionary or list

        Returns:
            str: SHA-256 hex digest
        """
        json_str = json.dumps(data, sort_keys=True)
        return hashlib.sha256(json_str.encode('utf-8')).hexdigest()

    def file_hash(self, path):
        digest = hashlib.sha256()
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(CHUNK_SIZE), b''):
                digest.update(chunk)
        return digest.hexdigest()

    def artifact_hashes(self, run_dir, exclude=(MANIFEST_NAME,)):
        """
        Hash every file under a run directory

        Returns:
            dict: relative posix path -> SHA-256, sorted by path
        """
        root = Path(run_dir)
        if not root.is_dir():
            raise ConfigError(f"run directory {run_dir} does not exist")
        hashes = {}
        for path in sorted(root.rglob('*')):
            rel = path.relative_to(root).as_posix()
            if path.is_file() and rel not in exclude:
                hashes[rel] = self.file_hash(path)
        return hashes

    def verify_no_changes(self, before_dir, after_dir):
        """
        Compare the artifacts of two runs

        Returns:
            dict: Verification result with per-artifact details
        """
        before = self.artifact_hashes(before_dir)
        after = self.artifact_hashes(after_dir)
        before_hash = self.generate_hash(before)
        after_hash = self.generate_hash(after)

        result = {
            'timestamp': datetime.now().isoformat(),
            'before_dir': str(before_dir),
            'after_dir': str(after_dir),
            'before_hash': before_hash,
            'after_hash': after_hash,
            'match': before_hash == after_hash,
            'total_files': len(set(before) | set(after)),
            'file_details': [],
        }

        for artifact in sorted(set(before) | set(after)):
            detail = self.verify_artifact(artifact, before.get(artifact), after.get(artifact))
            result['file_details'].append(detail)
            if not detail['hashes_match']:
                result.setdefault('violations', []).append(detail)

        self.verification_log.append(result)
        return result

    def verify_artifact(self, artifact, before_hash, after_hash):
        changes = None
        if before_hash is None:
            changes = 'missing from first run'
        elif after_hash is None:
            changes = 'missing from second run'
        elif before_hash != after_hash:
            changes = 'content differs'
        return {
            'artifact': artifact,
            'before_hash': before_hash,
            'after_hash': after_hash,
            'hashes_match': changes is None,
            'changes': changes,
        }

    def verify_manifest(self, run_dir):
        """
        Check the artifact hashes recorded in a run's manifest

        Returns:
            dict: Verification result shaped like verify_no_changes
        """
        manifest_path = Path(run_dir) / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ConfigError(f"{manifest_path} not found")
        with open(manifest_path, 'r', encoding='utf-8') as f:
            recorded = json.load(f).get('artifacts', {})
        actual = self.artifact_hashes(run_dir)

        result = {
            'timestamp': datetime.now().isoformat(),
            'before_dir': str(manifest_path),
            'after_dir': str(run_dir),
            'before_hash': self.generate_hash(recorded),
            'after_hash': self.generate_hash(actual),
            'total_files': len(set(recorded) | set(actual)),
            'file_details': [],
        }
        result['match'] = result['before_hash'] == result['after_hash']
        for artifact in sorted(set(recorded) | set(actual)):
            detail = self.verify_artifact(artifact, recorded.get(artifact), actual.get(artifact))
            result['file_details'].append(detail)
            if not detail['hashes_match']:
                result.setdefault('violations', []).append(detail)
        self.verification_log.append(result)
        return result

    def export_verification_report(self, filename='run_verification.json'):
        report = {
            'verification_timestamp': datetime.now().isoformat(),
            'verifier_version': '1.0',
            'hash_algorithm': 'SHA-256',
            'verification_count': len(self.verification_log),
            'verifications': self.verification_log,
        }
        with open(filename, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2)
        logger.info("verification report written to %s", filename)
        return filename

    def generate_attestation(self, result):
        """
        Formal reproducibility statement

        Returns:
            str: Attestation text, PASS or FAIL
        """
        if result['match']:
            return f"""
REPRODUCIBILITY ATTESTATION
{'=' * 70}

Verification Timestamp: {result['timestamp']}
Artifacts Compared: {result['total_files']}

ARTIFACT HASH VERIFICATION:
  First Run  (SHA-256): {result['before_hash']}
  Second Run (SHA-256): {result['after_hash']}

RESULT: [PASS] HASHES MATCH

Every metrics file, checkpoint and baseline record is byte-identical
between the two runs of the same configuration and seed.

{'=' * 70}
"""
        details = "\n".join(f"  - {v['artifact']}: {v['changes']}" for v in result.get('violations', []))
        return f"""
REPRODUCIBILITY VIOLATION
{'=' * 70}

Verification Timestamp: {result['timestamp']}
Artifacts Compared: {result['total_files']}

ARTIFACT HASH VERIFICATION:
  First Run  (SHA-256): {result['before_hash']}
  Second Run (SHA-256): {result['after_hash']}

RESULT: [FAIL] HASHES DO NOT MATCH

The following artifacts differ:
{details}

{'=' * 70}
"""


def print_verification_summary(result):
    print("\n" + "=" * 70)
    print("RUN VERIFICATION RESULTS")
    print("=" * 70)

    print(f"\nVerification Time: {result['timestamp']}")
    print(f"Artifacts: {result['total_files']}")
    print(f"\nFirst Hash:  {result['before_hash']}")
    print(f"Second Hash: {result['after_hash']}")

    if result['match']:
        print("\n✓✓✓ VERIFICATION PASSED ✓✓✓")
        print("\nAll artifacts are byte-identical")
    else:
        print("\n✗✗✗ VERIFICATION FAILED ✗✗✗")
        violations = result.get('violations', [])
        print(f"\n⚠️ {len(violations)} artifact(s) differ:")
        for v in violations:
            print(f"  {v['artifact']}: {v['changes']}")
