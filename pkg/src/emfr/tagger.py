"""POS tagging on top of the encoder: a pooled-feature head, fine-tuning,
and century/genre-stratified evaluation.

Per word, the head consumes the final hidden state of the begin-of-sequence
token together with the mean of the word's subword hidden states (concatenated
by default, summed as the alternative reading), maps through a 256-unit tanh
layer, then projects to tag logits.

Tagged-corpus format: one sentence per block of `token<TAB>tag` lines, blank
line between sentences, doc-level metadata as leading `# key = value` lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpe, kvconfig
from .encoder import EncoderModel, backward, forward, load_blobs, load_checkpoint, \
    save_blobs, save_checkpoint
from .pretrain import OptimizerConfig, TrainState, adam_step

HEAD_HIDDEN = 256

CENTURIES = (16, 17, 18, 19, 20)
GENRE_CLASSES = ("drama", "varia")
STATES = ("original", "normalised")

PRECLASSICAL = (1500, 1630)  # preclassical French; boundary year -> later period
CLASSICAL = (1630, 1689)


class TaggerError(ValueError):
    pass


def century_and_period(year: int) -> tuple[int, str]:
    """Century by the ceiling convention (1700 is 17th c.), plus the
    linguistic period; boundary years belong to the later period."""
    if not 1000 <= year <= 2100:
        raise TaggerError(f"year {year} outside [1000, 2100]")
    century = math.ceil(year / 100)
    if PRECLASSICAL[0] <= year < PRECLASSICAL[1]:
        period = "preclassical"
    elif CLASSICAL[0] <= year < CLASSICAL[1]:
        period = "classical"
    else:
        period = "other"
    return century, period


# ---------------------------------------------------------------------------
# tagged corpora

@dataclass
class TaggedSentence:
    tokens: list[str]
    gold_tags: list[str]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.gold_tags):
            raise TaggerError("tokens and gold_tags must have equal length")


@dataclass
class TaggedDoc:
    meta: dict[str, str]
    sentences: list[TaggedSentence]


def read_tagged_file(path: str | Path) -> list[TaggedDoc]:
    docs: list[TaggedDoc] = []
    current: TaggedDoc | None = None
    tokens: list[str] = []
    tags: list[str] = []

    def flush_sentence() -> None:
        nonlocal tokens, tags, current
        if tokens:
            if current is None:
                current = TaggedDoc(meta={}, sentences=[])
                docs.append(current)
            current.sentences.append(TaggedSentence(tokens, tags))
            tokens, tags = [], []

    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                  start=1):
        if line.startswith("#"):
            flush_sentence()
            body = line.lstrip("#").strip()
            if "=" not in body:
                raise TaggerError(f"{path}:{lineno}: bad metadata line {line!r}")
            key, _, value = body.partition("=")
            if current is None or current.sentences:
                current = TaggedDoc(meta={}, sentences=[])
                docs.append(current)
            current.meta[key.strip()] = value.strip()
            continue
        if not line.strip():
            flush_sentence()
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaggerError(f"{path}:{lineno}: expected 'token<TAB>tag'")
        tokens.append(parts[0])
        tags.append(parts[1])
    flush_sentence()
    return docs


def write_tagged_file(docs: list[TaggedDoc], path: str | Path) -> None:
    lines: list[str] = []
    for doc in docs:
        for key, value in doc.meta.items():
            lines.append(f"# {key} = {value}")
        for sent in doc.sentences:
            for token, tag in zip(sent.tokens, sent.gold_tags):
                lines.append(f"{token}\t{tag}")
            lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TagSet:
    tags: tuple[str, ...]

    @classmethod
    def from_docs(cls, docs: list[TaggedDoc]) -> "TagSet":
        seen = sorted({tag for doc in docs for s in doc.sentences for tag in s.gold_tags})
        if not seen:
            raise TaggerError("no tags found in the training corpus")
        return cls(tags=tuple(seen))

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError as exc:
            raise TaggerError(f"tag {tag!r} not in the tag set") from exc

    def __len__(self) -> int:
        return len(self.tags)


def align_subwords(tokens: list[str], model: bpe.BpeModel,
                   ) -> tuple[list[int], list[tuple[int, int]]]:
    """Encode each word independently and accumulate its subword range.

    Returns framed ids ([<s>] words [</s>]) and per-word (start, end) ranges;
    ranges are non-empty, non-overlapping, and in order.
    """
    ids = [bpe.BOS_ID]
    ranges: list[tuple[int, int]] = []
    for token in tokens:
        piece = bpe.encode_bytes(token.encode("utf-8"), model)
        if not piece:
            raise TaggerError(f"empty token in sentence: {tokens!r}")
        ranges.append((len(ids), len(ids) + len(piece)))
        ids.extend(piece)
    ids.append(bpe.EOS_ID)
    return ids, ranges


# ---------------------------------------------------------------------------
# tagging model

@dataclass
class TaggerModel:
    encoder: EncoderModel
    bpe_model: bpe.BpeModel
    tagset: TagSet
    pooling: str  # "concat" | "sum"
    head: dict[str, np.ndarray]

    @property
    def head_input_dim(self) -> int:
        d = self.encoder.config.hidden_dim
        return 2 * d if self.pooling == "concat" else d


def build_head(encoder: EncoderModel, tagset: TagSet, seed: int,
               pooling: str = "concat") -> dict[str, np.ndarray]:
    if pooling not in ("concat", "sum"):
        raise TaggerError("pooling must be 'concat' or 'sum'")
    d = encoder.config.hidden_dim
    in_dim = 2 * d if pooling == "concat" else d
    rng = np.random.default_rng(seed)
    dtype = encoder.config.np_dtype
    return {
        "head.w1": (rng.standard_normal((in_dim, HEAD_HIDDEN)) * 0.02).astype(dtype),
        "head.b1": np.zeros(HEAD_HIDDEN, dtype=dtype),
        "head.w2": (rng.standard_normal((HEAD_HIDDEN, len(tagset))) * 0.02).astype(dtype),
        "head.b2": np.zeros(len(tagset), dtype=dtype),
    }


def _features(h_final: np.ndarray, ranges: list[tuple[int, int]],
              pooling: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-word features from the final hidden states of one sentence.
    Returns (features, pooled) where pooled is kept for the backward pass."""
    s = h_final[0]
    pooled = np.stack([h_final[a:b].mean(axis=0) for a, b in ranges])
    if pooling == "concat":
        feats = np.concatenate([np.broadcast_to(s, pooled.shape), pooled], axis=1)
    else:
        feats = s[None, :] + pooled
    return feats, pooled


def _head_forward(head: dict[str, np.ndarray], feats: np.ndarray):
    z1 = feats @ head["head.w1"] + head["head.b1"]
    a1 = np.tanh(z1)
    logits = a1 @ head["head.w2"] + head["head.b2"]
    return logits, (feats, a1)


def _head_backward(head: dict[str, np.ndarray], cache, d_logits):
    feats, a1 = cache
    grads = {
        "head.w2": a1.T @ d_logits,
        "head.b2": d_logits.sum(axis=0),
    }
    da1 = d_logits @ head["head.w2"].T
    dz1 = da1 * (1.0 - a1 * a1)
    grads["head.w1"] = feats.T @ dz1
    grads["head.b1"] = dz1.sum(axis=0)
    dfeats = dz1 @ head["head.w1"].T
    return grads, dfeats


def sentence_logits(tagger: TaggerModel, tokens: list[str]):
    """Forward one sentence; returns (word logits, backward closure inputs)."""
    ids, ranges = align_subwords(tokens, tagger.bpe_model)
    ids_arr = np.asarray(ids)[None, :]
    hidden, _, cache = forward(tagger.encoder, ids_arr)
    h_final = hidden.final[0]
    feats, _ = _features(h_final, ranges, tagger.pooling)
    logits, head_cache = _head_forward(tagger.head, feats)
    return logits, (ids_arr, ranges, cache, head_cache)


def tag(sentences: list[list[str]], tagger: TaggerModel) -> list[list[str]]:
    """Argmax tags per word; output length always matches input."""
    out: list[list[str]] = []
    for tokens in sentences:
        if not tokens:
            out.append([])
            continue
        logits, _ = sentence_logits(tagger, tokens)
        out.append([tagger.tagset.tags[i] for i in logits.argmax(axis=1)])
    return out


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.000005
    epochs: int = 10
    seed: int = 0
    pooling: str = "concat"


def _word_ce_and_grad(logits: np.ndarray, gold: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = len(gold)
    loss = float((logz - shifted[np.arange(n), gold]).mean())
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n), gold] -= 1.0
    return loss, probs / n


def _sentence_step(tagger: TaggerModel, sent: TaggedSentence,
                   gold_idx: np.ndarray, params, state, opt_cfg) -> float:
    ids, ranges = align_subwords(sent.tokens, tagger.bpe_model)
    ids_arr = np.asarray(ids)[None, :]
    hidden, _, cache = forward(tagger.encoder, ids_arr)
    h_final = hidden.final[0]
    feats, _ = _features(h_final, ranges, tagger.pooling)
    logits, head_cache = _head_forward(tagger.head, feats)
    loss, d_logits = _word_ce_and_grad(logits, gold_idx)
    head_grads, dfeats = _head_backward(tagger.head, head_cache, d_logits)

    d = tagger.encoder.config.hidden_dim
    d_h = np.zeros_like(h_final)
    if tagger.pooling == "concat":
        d_s = dfeats[:, :d].sum(axis=0)
        d_pooled = dfeats[:, d:]
    else:
        d_s = dfeats.sum(axis=0)
        d_pooled = dfeats
    d_h[0] += d_s
    for w, (a, b) in enumerate(ranges):
        d_h[a:b] += d_pooled[w] / (b - a)

    enc_grads = backward(tagger.encoder, cache, d_final_hidden=d_h[None, :, :])
    grads = {**enc_grads, **head_grads}
    adam_step(state, params, grads, opt_cfg)
    return loss


def accuracy(tagger: TaggerModel, docs: list[TaggedDoc]) -> float:
    correct = 0
    total = 0
    sentences = [s for doc in docs for s in doc.sentences]
    predictions = tag([s.tokens for s in sentences], tagger)
    for sent, pred in zip(sentences, predictions):
        for gold_tag, pred_tag in zip(sent.gold_tags, pred):
            # Unknown gold tags score as wrong, never crash evaluation.
            correct += int(gold_tag == pred_tag)
            total += 1
    return correct / max(total, 1)


def finetune(train_docs: list[TaggedDoc], dev_docs: list[TaggedDoc],
             encoder_model: EncoderModel, bpe_model: bpe.BpeModel,
             cfg: FinetuneConfig) -> tuple[TaggerModel, list[tuple[int, float, float]]]:
    """Fine-tune encoder + head with cross-entropy over word-level tags.
    The checkpoint with the best dev accuracy is retained."""
    tagset = TagSet.from_docs(train_docs)
    for doc in dev_docs:
        for sent in doc.sentences:
            for gold in sent.gold_tags:
                if gold not in tagset.tags:
                    raise TaggerError(f"dev tag {gold!r} absent from the "
                                      f"training tag set")
    head = build_head(encoder_model, tagset, seed=cfg.seed, pooling=cfg.pooling)
    tagger = TaggerModel(encoder=encoder_model, bpe_model=bpe_model,
                         tagset=tagset, pooling=cfg.pooling, head=head)
    params = {**encoder_model.params, **head}
    opt_cfg = OptimizerConfig(peak_lr=cfg.lr, warmup_steps=0, total_steps=1,
                              schedule="constant", batch_sequences=1,
                              max_seq_len=encoder_model.config.max_positions)
    state = TrainState.fresh(params, cfg.seed)
    sentences = [s for doc in train_docs for s in doc.sentences if s.tokens]
    gold_indices = [np.asarray([tagset.index(t) for t in s.gold_tags])
                    for s in sentences]
    rng = np.random.default_rng(cfg.seed)
    history: list[tuple[int, float, float]] = []
    best_acc = -1.0
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(sentences))
        epoch_loss = 0.0
        for idx in order:
            epoch_loss += _sentence_step(tagger, sentences[idx], gold_indices[idx],
                                         params, state, opt_cfg)
        dev_acc = accuracy(tagger, dev_docs)
        history.append((epoch, epoch_loss / max(len(sentences), 1), dev_acc))
        if dev_acc > best_acc:
            best_acc = dev_acc
            best_params = {k: v.copy() for k, v in params.items()}

    if best_params is not None:
        for key, value in best_params.items():
            params[key][...] = value
    return tagger, history


# ---------------------------------------------------------------------------
# stratified evaluation

@dataclass
class EvalCell:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float | None:
        return None if self.total == 0 else self.correct / self.total


@dataclass
class EvalReport:
    """Token accuracy per (state, genre, century) cell plus micro-averaged
    'both' cells and macro row averages, mirroring the standard grid."""

    cells: dict[tuple[str, str, int], EvalCell] = field(default_factory=dict)

    def cell(self, state: str, genre: str, century: int) -> EvalCell:
        key = (state, genre, century)
        if key not in self.cells:
            self.cells[key] = EvalCell()
        return self.cells[key]

    def both_cell(self, state: str, century: int) -> EvalCell:
        merged = EvalCell()
        for genre in GENRE_CLASSES:
            got = self.cells.get((state, genre, century))
            if got is not None:
                merged.correct += got.correct
                merged.total += got.total
        return merged

    def row_average(self, state: str, genre: str) -> float | None:
        accs = []
        for century in CENTURIES:
            cell = (self.both_cell(state, century) if genre == "both"
                    else self.cells.get((state, genre, century), EvalCell()))
            if cell.total > 0:
                accs.append(cell.accuracy)
        return None if not accs else sum(accs) / len(accs)


def _genre_class(value: str) -> str:
    return "drama" if value.lower() in ("drama", "theatre", "théâtre") else "varia"


def _doc_century(meta: dict[str, str]) -> int:
    if "century" in meta:
        return int(meta["century"])
    if "year" in meta:
        return century_and_period(int(meta["year"]))[0]
    raise TaggerError("test document needs 'year' or 'century' metadata")


def evaluate(docs: list[TaggedDoc], tagger: TaggerModel) -> EvalReport:
    report = EvalReport()
    for doc in docs:
        state = doc.meta.get("state", "original")
        if state not in STATES:
            raise TaggerError(f"bad state {state!r}; expected one of {STATES}")
        genre = _genre_class(doc.meta.get("genre", "varia"))
        century = _doc_century(doc.meta)
        cell = report.cell(state, genre, century)
        predictions = tag([s.tokens for s in doc.sentences], tagger)
        for sent, pred in zip(doc.sentences, predictions):
            for gold_tag, pred_tag in zip(sent.gold_tags, pred):
                cell.total += 1
                cell.correct += int(gold_tag == pred_tag)
    return report


def _fmt_acc(cell_or_avg) -> str:
    if cell_or_avg is None:
        return "-"
    value = cell_or_avg.accuracy if isinstance(cell_or_avg, EvalCell) else cell_or_avg
    return "-" if value is None else f"{100.0 * value:.2f}"


def render_report_grid(report: EvalReport) -> str:
    """Aligned grid: one block per state, rows drama/varia/both, columns by
    century plus the row average. Empty cells render as '-'."""
    lines: list[str] = []
    header = ["genre"] + [str(c) for c in CENTURIES] + ["avg"]
    widths = [8] + [7] * (len(CENTURIES) + 1)

    def fmt_row(cells: list[str]) -> str:
        label, rest = cells[0], cells[1:]
        return label.ljust(widths[0]) + "".join(
            v.rjust(w) for v, w in zip(rest, widths[1:]))

    for state in STATES:
        lines.append(state.upper())
        lines.append(fmt_row(header))
        for genre in (*GENRE_CLASSES, "both"):
            row = [genre]
            for century in CENTURIES:
                cell = (report.both_cell(state, century) if genre == "both"
                        else report.cells.get((state, genre, century)))
                row.append(_fmt_acc(cell))
            row.append(_fmt_acc(report.row_average(state, genre)))
            lines.append(fmt_row(row))
        lines.append("")
    return "\n".join(lines)


def report_tsv(report: EvalReport) -> str:
    lines = ["state\tgenre\tcentury\tcorrect\ttotal\taccuracy"]
    for state in STATES:
        for genre in (*GENRE_CLASSES, "both"):
            for century in CENTURIES:
                cell = (report.both_cell(state, century) if genre == "both"
                        else report.cells.get((state, genre, century), EvalCell()))
                acc = "" if cell.accuracy is None else f"{100.0 * cell.accuracy:.4f}"
                lines.append(f"{state}\t{genre}\t{century}\t{cell.correct}"
                             f"\t{cell.total}\t{acc}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tagger directory

def save_tagger(tagger: TaggerModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tagger.encoder, directory / "encoder")
    bpe.save_model(tagger.bpe_model, directory / "bpe")
    save_blobs(tagger.head, directory / "head.bin", directory / "head.tsv")
    (directory / "tagset.txt").write_text(
        "\n".join(tagger.tagset.tags) + "\n", encoding="utf-8")
    kvconfig.write_kv({"pooling": tagger.pooling}, directory / "config")


def load_tagger(directory: str | Path) -> TaggerModel:
    directory = Path(directory)
    encoder_model = load_checkpoint(directory / "encoder")
    bpe_model = bpe.load_model(directory / "bpe")
    head = load_blobs(directory / "head.bin", directory / "head.tsv")
    tags = tuple(t for t in (directory / "tagset.txt")
                 .read_text(encoding="utf-8").splitlines() if t)
    mapping = kvconfig.read_kv(directory / "config")
    return TaggerModel(encoder=encoder_model, bpe_model=bpe_model,
                       tagset=TagSet(tags=tags), head=head,
                       pooling=kvconfig.get_str(mapping, "pooling", "concat"))
