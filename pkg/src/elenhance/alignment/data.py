"""Feature sequences and (source, target) pairing for alignment training."""
from __future__ import annotations

import numpy as np

from ..corpus import Manifest, ManifestEntry
from ..errors import ConfigError
from ..features import FeatureStore
from ..recognition.model import Recognizer, encode_symbols, extract_bnf
from ..units import UnitCodebook, UnitStore, extract_units


class FeatureBank:
    """Serves mel, BNF, unit and symbol-id sequences per utterance id, memoised."""

    def __init__(self, store: FeatureStore, recognizer: Recognizer | None = None, units=None):
        self.store = store
        self.recognizer = recognizer
        self.units = units  # UnitCodebook or UnitStore
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @property
    def manifest(self) -> Manifest:
        return self.store.manifest

    def get(self, uid: str, kind: str) -> np.ndarray:
        key = (kind, uid)
        if key in self._cache:
            return self._cache[key]
        if kind == "mel":
            value = self.store.mel(uid)
        elif kind == "bnf":
            if self.recognizer is None:
                raise ConfigError("BNF features need a recognizer")
            value = extract_bnf(self.recognizer, self.store.mel(uid))
        elif kind == "units":
            if isinstance(self.units, UnitCodebook):
                value = extract_units(self.units, self.store.waveform(uid)).frames.astype(np.float32)
            elif isinstance(self.units, UnitStore):
                value = self.units[uid].frames.astype(np.float32)
            else:
                raise ConfigError("unit features need a codebook or unit store")
        elif kind == "text":
            value = np.asarray(encode_symbols(self.store.entry(uid).transcript), dtype=np.int64)
        else:
            raise ConfigError(f"unknown feature kind {kind!r}")
        self._cache[key] = value
        return value


def pair_entries(manifest: Manifest, selector: dict, pair_with: str) -> list[tuple[str, str]]:
    """(source id, target id) pairs for the entries matched by ``selector``.

    ``pair_with``: ``parallel`` follows each entry's parallel_id; ``self`` pairs
    an entry with itself; ``speaker:<id>`` pairs with the same sentence index
    read by another speaker of the same group.
    """
    entries = manifest.select(**selector).entries
    index = manifest.by_id()
    pairs = []
    for e in entries:
        if pair_with == "parallel":
            if e.parallel_id is None:
                continue
            pairs.append((e.utterance_id, e.parallel_id))
        elif pair_with == "self":
            pairs.append((e.utterance_id, e.utterance_id))
        elif pair_with.startswith("speaker:"):
            target = _same_sentence(e, pair_with.split(":", 1)[1])
            if target == e.utterance_id or target not in index:
                continue
            pairs.append((e.utterance_id, target))
        else:
            raise ConfigError(f"unknown pairing {pair_with!r}")
    if not pairs:
        raise ConfigError(f"no training pairs for selector {selector} / {pair_with}")
    return pairs


def _same_sentence(e: ManifestEntry, speaker: str) -> str:
    group, _, idx = e.utterance_id.split("-")
    return f"{group}-{speaker}-{idx}"
