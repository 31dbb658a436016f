"""The model inventor's database: fingerprint issuance per user and the
decode-then-match attribution decision over 1+N sources.

Issuance resamples until the new fingerprint is well separated from every
existing record (fewer than threshold matching bits against each), which
keeps the attribution argmax unambiguous.  Attribution scans all records
with packed-word popcounts; a decoded fingerprint that matches no record
at the threshold is ruled Real, since a real image decodes to an
effectively random bit string.

Journal format, one record per line, append-only:

    fp128:<hex> TAB user_id TAB digest-hex TAB RFC3339-timestamp TAB note
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import RegistryError, RegistryFullError
from .fingerprints import (Fingerprint, FingerprintSpace, capacity_estimate,
                           default_threshold, fingerprint_digest,
                           matching_bits_matrix, null_p_value)
from .nets import decode_bits

__all__ = ["RegistryRecord", "AttributionResult", "Registry",
           "save_registry", "load_registry"]

MAX_REGISTER_ATTEMPTS = 100


@dataclass(frozen=True)
class RegistryRecord:
    fingerprint: Fingerprint
    user_id: str
    digest: bytes
    created_at: datetime
    note: str = ""

    def to_line(self) -> str:
        return "\t".join([self.fingerprint.to_text(), self.user_id,
                          self.digest.hex(), self.created_at.isoformat(),
                          self.note])

    @classmethod
    def from_line(cls, line: str) -> "RegistryRecord":
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
        fp_text, user_id, digest_hex, stamp, note = parts
        if not user_id:
            raise ValueError("empty user_id")
        return cls(fingerprint=Fingerprint.from_text(fp_text),
                   user_id=user_id,
                   digest=bytes.fromhex(digest_hex),
                   created_at=datetime.fromisoformat(stamp),
                   note=note)


@dataclass(frozen=True)
class AttributionResult:
    """Either Real, or Attributed with the matched user and evidence."""

    verdict: str                    # "real" | "attributed"
    user_id: str | None = None
    matching: int | None = None     # matching-bit count k
    p_value: float | None = None

    @property
    def attributed(self) -> bool:
        return self.verdict == "attributed"

    def __str__(self) -> str:
        if not self.attributed:
            return "Real"
        return f"Attributed {self.user_id} k={self.matching} p={self.p_value:.3e}"


class Registry:
    """Append-only record set, optionally bound to a journal file that
    every registration is flushed to."""

    def __init__(self, d_c: int = 128, threshold: int | None = None,
                 path=None):
        self.space = FingerprintSpace(d_c)
        self.threshold = default_threshold(d_c) if threshold is None else int(threshold)
        if not 0 <= self.threshold <= d_c:
            raise ValueError(f"threshold {self.threshold} out of range [0, {d_c}]")
        self.path = Path(path) if path is not None else None
        self.records: list[RegistryRecord] = []
        self._packed: np.ndarray | None = None

    @property
    def d_c(self) -> int:
        return self.space.d_c

    def __len__(self) -> int:
        return len(self.records)

    def _packed_matrix(self) -> np.ndarray:
        if self._packed is None:
            self._packed = np.stack([r.fingerprint.packed_words()
                                     for r in self.records])
        return self._packed

    def _append(self, record: RegistryRecord) -> None:
        self.records.append(record)
        self._packed = None
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(record.to_line() + "\n")
                fh.flush()

    # -- issuance

    def register(self, user_id: str, rng: np.random.Generator,
                 note: str = "", now: datetime | None = None) -> RegistryRecord:
        """Issue a fresh fingerprint for a user and persist the record.

        Candidates within threshold reach of any existing record are
        rejected and resampled (at most 100 draws)."""
        if not user_id:
            raise ValueError("user_id must be non-empty")
        for text in (user_id, note):
            if "\t" in text or "\n" in text:
                raise ValueError("user_id and note must not contain tabs or newlines")
        for _ in range(MAX_REGISTER_ATTEMPTS):
            candidate = self.space.sample(rng)
            if self.records:
                km = matching_bits_matrix(candidate.packed_words()[None, :],
                                          self._packed_matrix(), self.d_c)
                if int(km.max()) >= self.threshold:
                    continue
            record = RegistryRecord(
                fingerprint=candidate, user_id=user_id,
                digest=fingerprint_digest(candidate),
                created_at=now if now is not None else datetime.now(timezone.utc),
                note=note)
            self._append(record)
            return record
        est = capacity_estimate(self.d_c, self.threshold / self.d_c)
        raise RegistryFullError(
            f"no admissible fingerprint after {MAX_REGISTER_ATTEMPTS} draws: "
            f"{len(self.records)} records at d_c={self.d_c} with threshold "
            f"{self.threshold}; a space this size supports on the order of "
            f"10^{est.magnitude} well-separated fingerprints and is "
            f"effectively full at this threshold")

    # -- attribution

    def attribute(self, decoded: Fingerprint,
                  threshold: int | None = None) -> AttributionResult:
        """Match a decoded fingerprint against every record."""
        if decoded.d_c != self.d_c:
            raise ValueError(f"fingerprint length mismatch: {decoded.d_c} "
                             f"vs registry d_c={self.d_c}")
        tau = self.threshold if threshold is None else int(threshold)
        if not self.records:
            return AttributionResult("real")
        km = matching_bits_matrix(decoded.packed_words()[None, :],
                                  self._packed_matrix(), self.d_c)[0]
        best = int(km.argmax())   # unique by the issuance margin; ties break low
        k = int(km[best])
        if k < tau:
            return AttributionResult("real")
        return AttributionResult("attributed",
                                 user_id=self.records[best].user_id,
                                 matching=k,
                                 p_value=null_p_value(k, self.d_c))

    def attribute_image(self, decoder, image,
                        threshold: int | None = None) -> AttributionResult:
        """Decode an image's fingerprint bits, then attribute them."""
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 3:
            img = img[None]
        from . import autodiff as ad
        with ad.no_grad():
            _, c_logits = decoder.decode(img)
        bits = decode_bits(c_logits)[0]
        return self.attribute(Fingerprint.from_bits(bits), threshold)

    # -- stats

    def min_pairwise_distance(self) -> int | None:
        """Smallest Hamming distance over all record pairs."""
        if len(self.records) < 2:
            return None
        packed = self._packed_matrix()
        best = self.d_c
        for i in range(len(self.records) - 1):
            dist = np.bitwise_count(packed[i] ^ packed[i + 1:]).sum(axis=1)
            best = min(best, int(dist.min()))
        return best

    def stats(self) -> dict:
        est = capacity_estimate(self.d_c, self.threshold / self.d_c)
        count = len(self.records)
        headroom = est.magnitude - (int(np.ceil(np.log10(count))) if count else 0)
        return {
            "records": count,
            "d_c": self.d_c,
            "threshold": self.threshold,
            "min_pairwise_distance": self.min_pairwise_distance(),
            "capacity_magnitude": est.magnitude,
            "headroom_magnitude": headroom,
        }


def save_registry(registry: Registry, path) -> None:
    """Full rewrite of the journal (write-to-temp, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in registry.records:
            fh.write(record.to_line() + "\n")
    tmp.replace(path)


def load_registry(path, d_c: int | None = None,
                  threshold: int | None = None) -> Registry:
    """Parse a journal; an empty file yields an empty registry of the
    given (or default) bit length."""
    path = Path(path)
    records: list[RegistryRecord] = []
    seen_users: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                record = RegistryRecord.from_line(line)
            except ValueError as exc:
                raise RegistryError(f"{path}: line {lineno}: {exc}") from None
            if records and record.fingerprint.d_c != records[0].fingerprint.d_c:
                raise RegistryError(
                    f"{path}: line {lineno}: fingerprint length "
                    f"{record.fingerprint.d_c} differs from earlier records")
            if record.user_id in seen_users:
                warnings.warn(f"{path}: line {lineno}: duplicate user_id "
                              f"{record.user_id!r}")
            seen_users.add(record.user_id)
            records.append(record)
    if records:
        d_c = records[0].fingerprint.d_c
    registry = Registry(d_c=d_c if d_c is not None else 128,
                        threshold=threshold, path=path)
    registry.records = records
    return registry
