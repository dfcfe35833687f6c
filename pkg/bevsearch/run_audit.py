"""
Run audit trail
Records resolved config plus input/output hashes for every CLI run
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from .errors import DataError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "run_manifest.json"
MANIFEST_VERSION = "1.0"


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


class RunAuditor:
    """
    Builds run manifests.

    Manifests carry no wall-clock time or host details, so two runs with the
    same inputs and seed write byte-identical files.
    """

    def __init__(self):
        self.records: Dict[str, Dict[str, Any]] = {}

    def hash_payload(self, payload: Dict[str, Any]) -> str:
        """SHA-256 of the canonical JSON form"""
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()

    def hash_file(self, path) -> str:
        path = Path(path)
        if not path.exists():
            raise DataError(f"cannot hash missing file: {path}")
        digest = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()

    def hash_files(self, paths: Iterable) -> Dict[str, str]:
        """Hashes keyed by file name; bundle sidecars are included when present"""
        hashes: Dict[str, str] = {}
        for path in paths:
            path = Path(path)
            hashes[path.name] = self.hash_file(path)
            sidecar = path.with_name(path.name + ".json")
            if sidecar.exists():
                hashes[sidecar.name] = self.hash_file(sidecar)
        return hashes

    def create_audit_payload(self, subcommand: str, config: Mapping[str, Any],
                             inputs: Iterable = (), outputs: Iterable = ()) -> Dict[str, Any]:
        payload = {
            "version": MANIFEST_VERSION,
            "subcommand": subcommand,
            "config": dict(config),
            "inputs": self.hash_files(inputs),
            "outputs": self.hash_files(outputs),
        }
        payload["manifest_hash"] = self.hash_payload(payload)
        self.records[subcommand] = payload
        return payload

    def write_manifest(self, directory, payload: Dict[str, Any]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"✅ run manifest written: {path}")
        return path

    def get_record(self, subcommand: str) -> Optional[Dict[str, Any]]:
        return self.records.get(subcommand)


# Global auditor instance
auditor = RunAuditor()
