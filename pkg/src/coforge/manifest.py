"""Workspace manifest: every artifact with its content hash and the hashes of
the inputs it was built from."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


class StaleArtifact(RuntimeError):
    """An input is missing, was edited after it was recorded, or was built from
    inputs that have since changed."""


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Manifest:
    root: Path
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root: str | Path) -> "Manifest":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST_NAME
        arts = json.loads(path.read_text())["artifacts"] if path.exists() else {}
        return cls(root, arts)

    def save(self) -> None:
        text = json.dumps({"artifacts": self.artifacts}, sort_keys=True, indent=1) + "\n"
        (self.root / MANIFEST_NAME).write_text(text)

    def path(self, name: str) -> Path:
        return self.root / self.artifacts[name]["path"] if name in self.artifacts else self.root / name

    def record(self, name: str, rel_path: str, inputs: tuple[str, ...] = (), meta: dict | None = None) -> str:
        """Hash ``rel_path`` and remember which input hashes produced it."""
        digest = file_sha256(self.root / rel_path)
        self.artifacts[name] = {"path": rel_path, "sha256": digest,
                                "inputs": {i: self.artifacts[i]["sha256"] for i in inputs},
                                "meta": meta or {}}
        self.save()
        return digest

    def require(self, name: str) -> Path:
        """Path of a fresh artifact; raises StaleArtifact otherwise."""
        entry = self.artifacts.get(name)
        if entry is None:
            raise StaleArtifact(f"{name}: not produced yet in {self.root}")
        path = self.root / entry["path"]
        if not path.exists():
            raise StaleArtifact(f"{name}: {path} is missing")
        if file_sha256(path) != entry["sha256"]:
            raise StaleArtifact(f"{name}: {path} changed since it was recorded")
        for dep, digest in entry["inputs"].items():
            cur = self.artifacts.get(dep)
            if cur is None or cur["sha256"] != digest:
                raise StaleArtifact(f"{name}: {path} was built from an older {dep}")
        return path

    def has(self, name: str) -> bool:
        return name in self.artifacts

    def meta(self, name: str) -> dict:
        return self.artifacts.get(name, {}).get("meta", {})
