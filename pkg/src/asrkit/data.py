"""Dataset manifests, length-sorted batching, and asynchronous featurization.

The prefetcher is the one deliberately concurrent piece of the toolkit: P
worker threads featurize batches ahead of the consumer while a bounded
budget of P + Q batches keeps memory flat. Results are handed over in the
exact sorted-batch order no matter which worker finishes first, so training
is bit-reproducible for any P.
"""

from __future__ import annotations

import random
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from threading import BoundedSemaphore

import numpy as np

from . import features as feat
from .errors import ManifestError, PipelineError
from .lexicon import TokenTable, targets_to_array, tokenize_transcript


@dataclass
class ManifestEntry:
    utt_id: str
    audio_path: str
    duration_ms: float
    transcript: str


def load_manifest(path) -> list:
    """Parse `id<TAB>audio_path<TAB>duration_ms<TAB>transcript` lines."""
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ManifestError(
                    f"expected 4 tab-separated fields, got {len(fields)}", line=lineno
                )
            utt_id, audio_path, duration_text, transcript = fields
            if not utt_id:
                raise ManifestError("empty utterance id", line=lineno)
            if utt_id in seen:
                raise ManifestError(f"duplicate utterance id {utt_id!r}", line=lineno)
            seen.add(utt_id)
            try:
                duration = float(duration_text)
            except ValueError:
                raise ManifestError(
                    f"bad duration {duration_text!r}", line=lineno
                ) from None
            if duration <= 0:
                raise ManifestError(f"duration must be positive, got {duration}", line=lineno)
            entries.append(ManifestEntry(utt_id, audio_path, duration, transcript))
    if not entries:
        raise ManifestError("manifest holds no entries")
    return entries


def sort_and_batch(entries, batch_size: int) -> list:
    """Group entries into batches of near-equal duration.

    Entries are sorted ascending by (duration_ms, utt_id) so each batch pads
    as little as possible; the trailing partial batch is kept. Batches are
    lazy: just lists of manifest entries until featurized.
    """
    if batch_size < 1:
        raise ManifestError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(entries, key=lambda e: (e.duration_ms, e.utt_id))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


def shuffle_batches(batches, seed: int, epoch: int) -> list:
    """Deterministic whole-batch shuffle; intra-batch order is untouched.

    The stream depends only on (seed, epoch), never on how many epochs ran
    before, so a resumed run replays the exact batch order.
    """
    order = list(range(len(batches)))
    random.Random(1_000_003 * seed + epoch).shuffle(order)
    return [batches[i] for i in order]


@dataclass
class Batch:
    features: np.ndarray        # B x T_max x D float32, zero padded
    feature_lengths: np.ndarray  # B, true frame counts
    targets: np.ndarray         # B x L_max int64, padded with -1
    target_lengths: np.ndarray  # B
    utt_ids: list
    transcripts: list

    @property
    def size(self) -> int:
        return len(self.utt_ids)

    def utterance_features(self, i: int) -> np.ndarray:
        return self.features[i, : self.feature_lengths[i]]

    def utterance_target(self, i: int):
        return self.targets[i, : self.target_lengths[i]].tolist()

    def checksum(self) -> int:
        """CRC32 over features, lengths, and targets; order-sensitive."""
        crc = 0
        for arr in (self.features, self.feature_lengths, self.targets, self.target_lengths):
            crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
        for uid in self.utt_ids:
            crc = zlib.crc32(uid.encode("utf-8"), crc)
        return crc


def build_batch(entries, config: feat.FeatureConfig, table: TokenTable, lexicon=None) -> Batch:
    """Featurize and pad one batch; wraps failures with the utterance id."""
    mats, targets = [], []
    for entry in entries:
        try:
            audio = feat.load_wav(entry.audio_path)
            mats.append(feat.featurize(audio, config))
            targets.append(tokenize_transcript(entry.transcript, table, lexicon))
        except Exception as exc:
            raise PipelineError(f"utterance {entry.utt_id!r}: {exc}") from exc
    b = len(entries)
    t_max = max(m.shape[0] for m in mats)
    dim = mats[0].shape[1]
    feats = np.zeros((b, t_max, dim), dtype=np.float32)
    feat_lens = np.zeros(b, dtype=np.int64)
    l_max = max(1, max(len(t) for t in targets))
    target_arr = np.full((b, l_max), -1, dtype=np.int64)
    target_lens = np.zeros(b, dtype=np.int64)
    for i, (m, t) in enumerate(zip(mats, targets)):
        feats[i, : m.shape[0]] = m
        feat_lens[i] = m.shape[0]
        target_arr[i, : len(t)] = targets_to_array(t)
        target_lens[i] = len(t)
    return Batch(
        features=feats,
        feature_lengths=feat_lens,
        targets=target_arr,
        target_lengths=target_lens,
        utt_ids=[e.utt_id for e in entries],
        transcripts=[e.transcript for e in entries],
    )


def prefetch_stream(batches, config: feat.FeatureConfig, table: TokenTable,
                    lexicon=None, parallelism: int = 1, queue_capacity: int = 2):
    """Yield built batches in order while up to `parallelism` build ahead.

    A semaphore of parallelism + queue_capacity tickets bounds how many
    batches exist at once (building or waiting); each yield returns one
    ticket. Worker exceptions are re-raised in order, as the failing batch's
    slot, carrying the utterance id from build_batch.
    """
    if parallelism < 1 or queue_capacity < 1:
        raise ManifestError("parallelism and queue_capacity must be >= 1")

    budget = BoundedSemaphore(parallelism + queue_capacity)

    def build(entry_list):
        try:
            return build_batch(entry_list, config, table, lexicon)
        except BaseException as exc:
            return exc

    def generate():
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            pending = []
            it = iter(batches)

            def submit_next():
                entry_list = next(it, None)
                if entry_list is None:
                    return False
                budget.acquire()
                pending.append(pool.submit(build, entry_list))
                return True

            for _ in range(parallelism + queue_capacity):
                if not submit_next():
                    break
            while pending:
                result = pending.pop(0).result()
                # the consumer's copy no longer counts against the budget,
                # so peak resident batches stay <= parallelism + capacity + 1
                budget.release()
                submit_next()
                if isinstance(result, BaseException):
                    raise result
                yield result

    return generate()
