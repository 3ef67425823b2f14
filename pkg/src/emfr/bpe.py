"""Byte-level BPE: training, encoding, decoding, model (de)serialization.

No pre-tokenization: merges are learned directly over UTF-8 bytes and may
cross word boundaries. Any string round-trips exactly, long s and tilde
vowels included. Ties during training break by lexicographic byte order of
the pair, so training is deterministic regardless of sharding.
"""

from __future__ import annotations

import base64
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import kvconfig

# Fixed special-token ids; byte b maps to id BYTE_BASE + b, merges follow.
SPECIAL_TOKENS = ("<s>", "<pad>", "</s>", "<unk>", "<MASK>")
BOS_ID, PAD_ID, EOS_ID, UNK_ID, MASK_ID = range(len(SPECIAL_TOKENS))
N_SPECIALS = len(SPECIAL_TOKENS)
BYTE_BASE = N_SPECIALS
FIRST_MERGE_ID = BYTE_BASE + 256

MAX_SEQUENCE_LENGTH = 512  # default cap used by the encoder and pretrainer

TokenSequence = list[int]


class BpeError(ValueError):
    pass


@dataclass
class BpeModel:
    """Vocabulary and ordered merge list.

    merges[k] is a pair of token ids merged into id FIRST_MERGE_ID + k;
    token identity is its byte sequence, so ids and surfaces are bijective.
    """

    merges: list[tuple[int, int]] = field(default_factory=list)
    token_bytes: dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.token_bytes:
            self.token_bytes = {BYTE_BASE + b: bytes([b]) for b in range(256)}

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self.token_bytes)

    @property
    def special_ids(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIAL_TOKENS)}

    def merge_ranks(self) -> dict[tuple[int, int], int]:
        cached = getattr(self, "_ranks_cache", None)
        if cached is None or len(cached) != len(self.merges):
            cached = {pair: rank for rank, pair in enumerate(self.merges)}
            self._ranks_cache = cached
        return cached


def _bytes_to_ids(data: bytes) -> list[int]:
    return [BYTE_BASE + b for b in data]


def _merge_pass(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    """Replace adjacent occurrences of pair, left to right (overlap-safe)."""
    left, right = pair
    out: list[int] = []
    i, n = 0, len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def _count_pairs(seqs: Sequence[list[int]]) -> Counter:
    counts: Counter = Counter()
    for seq in seqs:
        for i in range(len(seq) - 1):
            counts[(seq[i], seq[i + 1])] += 1
    return counts


def _count_pairs_sharded(seqs: list[list[int]], jobs: int) -> Counter:
    # Integer counter addition commutes, so shard totals are independent of
    # shard count and summation order.
    if jobs <= 1 or len(seqs) < 2:
        return _count_pairs(seqs)
    shard_size = (len(seqs) + jobs - 1) // jobs
    shards = [seqs[i:i + shard_size] for i in range(0, len(seqs), shard_size)]
    total: Counter = Counter()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for partial in pool.map(_count_pairs, shards):
            total.update(partial)
    return total


def train(corpus: Iterable[str], target_vocab: int, jobs: int = 1) -> BpeModel:
    """Greedy BPE training over raw UTF-8 bytes.

    Repeatedly merges the most frequent adjacent token pair until the
    vocabulary reaches target_vocab or no pair occurs at least twice.
    A candidate whose merged byte sequence already exists in the vocabulary
    is skipped, keeping byte sequences and ids bijective (and the merges
    file unambiguous).
    """
    if target_vocab < 256 + N_SPECIALS:
        raise BpeError(f"target_vocab must be >= {256 + N_SPECIALS}")
    seqs = [_bytes_to_ids(body.encode("utf-8")) for body in corpus]
    if not seqs:
        raise BpeError("empty corpus")

    model = BpeModel()
    known_bytes = set(model.token_bytes.values())
    while model.vocab_size < target_vocab:
        counts = _count_pairs_sharded(seqs, jobs)
        best: tuple[int, int] | None = None
        best_count = 1  # pairs must occur at least twice
        for pair, count in counts.items():
            merged = model.token_bytes[pair[0]] + model.token_bytes[pair[1]]
            if merged in known_bytes:
                continue
            key = (model.token_bytes[pair[0]], model.token_bytes[pair[1]])
            if count > best_count or (
                    best is not None and count == best_count
                    and key < (model.token_bytes[best[0]], model.token_bytes[best[1]])):
                best = pair
                best_count = count
        if best is None:
            break
        new_id = N_SPECIALS + len(model.token_bytes)
        merged = model.token_bytes[best[0]] + model.token_bytes[best[1]]
        model.token_bytes[new_id] = merged
        known_bytes.add(merged)
        model.merges.append(best)
        seqs = [_merge_pass(seq, best, new_id) for seq in seqs]
    return model


def encode_bytes(data: bytes, model: BpeModel) -> list[int]:
    """Encode raw bytes without framing specials (used for word alignment)."""
    seq = _bytes_to_ids(data)
    ranks = model.merge_ranks()
    while len(seq) > 1:
        best_rank = None
        best_pair = None
        for i in range(len(seq) - 1):
            rank = ranks.get((seq[i], seq[i + 1]))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_pair = (seq[i], seq[i + 1])
        if best_pair is None:
            break
        seq = _merge_pass(seq, best_pair, FIRST_MERGE_ID + ranks[best_pair])
    return seq


def encode(text: str, model: BpeModel) -> TokenSequence:
    """Apply merges in training order over the UTF-8 bytes; frame with
    begin/end-of-sequence ids."""
    return [BOS_ID] + encode_bytes(text.encode("utf-8"), model) + [EOS_ID]


def decode(ids: Sequence[int], model: BpeModel) -> str:
    """Exact inverse of encode: concatenate the byte sequences of all
    non-special tokens and decode as UTF-8."""
    chunks = []
    for token_id in ids:
        if 0 <= token_id < N_SPECIALS:
            continue
        data = model.token_bytes.get(token_id)
        if data is None:
            raise BpeError(f"invalid token id {token_id}")
        chunks.append(data)
    return b"".join(chunks).decode("utf-8")


# ---------------------------------------------------------------------------
# model directory: vocab + merges + config

def save_model(model: BpeModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "vocab", "w", encoding="ascii") as handle:
        for token_id in sorted(model.token_bytes):
            b64 = base64.b64encode(model.token_bytes[token_id]).decode("ascii")
            handle.write(f"{token_id}\t{b64}\n")
    # One merge per line: the two sides as base64 byte strings (byte
    # sequences are not necessarily valid UTF-8 mid-merge).
    with open(directory / "merges", "w", encoding="ascii") as handle:
        for left, right in model.merges:
            lb = base64.b64encode(model.token_bytes[left]).decode("ascii")
            rb = base64.b64encode(model.token_bytes[right]).decode("ascii")
            handle.write(f"{lb} {rb}\n")
    config = {name: i for i, name in enumerate(SPECIAL_TOKENS)}
    config["vocab_size"] = model.vocab_size
    kvconfig.write_kv(config, directory / "config")


def load_model(directory: str | Path) -> BpeModel:
    directory = Path(directory)
    token_bytes: dict[int, bytes] = {}
    for line in (directory / "vocab").read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        id_text, b64 = line.split("\t")
        token_bytes[int(id_text)] = base64.b64decode(b64)
    bytes_to_id = {b: i for i, b in token_bytes.items()}
    if len(bytes_to_id) != len(token_bytes):
        raise BpeError("vocab file contains duplicate byte sequences")
    merges: list[tuple[int, int]] = []
    merges_text = (directory / "merges").read_text(encoding="ascii")
    for lineno, line in enumerate(merges_text.splitlines(), start=1):
        if not line.strip():
            continue
        lb, rb = line.split(" ")
        try:
            pair = (bytes_to_id[base64.b64decode(lb)], bytes_to_id[base64.b64decode(rb)])
        except KeyError as exc:
            raise BpeError(f"merges line {lineno}: unknown token bytes") from exc
        merges.append(pair)
    model = BpeModel(merges=merges, token_bytes=token_bytes)
    config = kvconfig.read_kv(directory / "config")
    declared = kvconfig.get_int(config, "vocab_size", model.vocab_size)
    if declared != model.vocab_size:
        raise BpeError(f"config declares vocab_size {declared}, "
                       f"files contain {model.vocab_size}")
    return model
