#!/usr/bin/env python3
"""
Run Manifest

Every command leaves one manifest.json in its output directory: what ran,
with which config and seed, what it wrote and how long it took. The
manifest is enough to rerun the command.

OutputLock keeps two commands from writing one directory at once.
"""

import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent))

from errors import OutputLockedError

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


def describe_version(fallback: str) -> str:
    """git-describe string of the source tree, or v<fallback> outside a checkout"""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{fallback}"


@dataclass
class RunManifest:
    """Record of one command invocation"""

    command: str
    config: Dict
    seed: int
    version: str
    outputs: List[str] = field(default_factory=list)
    duration_seconds: float = 0.0
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunManifest':
        return cls(**data)

    def save(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, out_dir: Path) -> 'RunManifest':
        with open(Path(out_dir) / MANIFEST_NAME, 'r') as f:
            return cls.from_dict(json.load(f))


class OutputLock:
    """Exclusive lock file inside an output directory (context manager)"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / LOCK_NAME
        self._fd: Optional[int] = None

    def __enter__(self) -> 'OutputLock':
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(f"{self.out_dir} is in use by another command (remove {self.path} if stale)")
        os.write(self._fd, str(os.getpid()).encode('ascii'))
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
