"""Which checkpoints make up one enhancement system, with integrity checks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import checkpoint
from ..errors import ConfigError, IoError, StaleArtifact

# (inputs, outputs) -> artifacts the chain needs besides the aligner
_CHAINS = {
    ("bnf", "units"): ("recognition", "units", "synthesis", "embedding"),
    ("mel", "mel"): (),
    ("bnf", "mel"): ("recognition",),
}
_ARTIFACTS = ("recognition", "units", "alignment", "synthesis", "embedding", "scorer")


@dataclass
class SystemLineage:
    system_id: str
    in_type: str
    out_type: str
    pretraining: str
    alignment: str
    recognition: str | None = None
    units: str | None = None
    synthesis: str | None = None
    embedding: str | None = None
    vocoder: dict = field(default_factory=lambda: {"kind": "griffin_lim"})
    guidance: float = 1.0
    scorer: str | None = None  # typical-speech recognizer used to grade outputs
    config_hash: str = ""
    digests: dict = field(default_factory=dict)

    def artifacts(self) -> dict:
        return {k: getattr(self, k) for k in _ARTIFACTS if getattr(self, k)}

    def check_chain(self) -> None:
        need = _CHAINS.get((self.in_type, self.out_type))
        if need is None:
            raise ConfigError(f"system {self.system_id}: {self.in_type} -> {self.out_type} is not a supported chain")
        missing = [k for k in need if not getattr(self, k)]
        if missing:
            raise ConfigError(f"system {self.system_id}: chain {self.in_type}->{self.out_type} lacks {missing}")

    def seal(self) -> None:
        """Record the current digest of every referenced artifact."""
        self.check_chain()
        self.digests = {}
        for k, p in self.artifacts().items():
            if not Path(p).exists():
                raise IoError(f"system {self.system_id}: {k} artifact {p} does not exist")
            self.digests[k] = checkpoint.file_digest(p)

    def verify(self) -> None:
        """Raise IoError for missing artifacts and StaleArtifact for changed ones."""
        self.check_chain()
        for k, p in self.artifacts().items():
            if not Path(p).exists():
                raise IoError(f"system {self.system_id}: {k} artifact {p} does not exist")
            if k not in self.digests:
                raise StaleArtifact(f"system {self.system_id}: no recorded digest for {k}")
            if checkpoint.file_digest(p) != self.digests[k]:
                raise StaleArtifact(f"system {self.system_id}: {k} artifact {p} changed since the lineage was sealed")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "SystemLineage":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read lineage {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path} is not a lineage file: {exc}") from exc
        return cls(**data)
