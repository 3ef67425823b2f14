"""Corpus compilation: ingest heterogeneous sources, canonicalize, partition by
licence tier, and compute corpus statistics.

Canonical on-disk format is one JSON record per line with the Document fields;
an unknown year is stored as null, never 0. Output ordering is always sorted
by document id so parallel ingestion stays deterministic.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.etree import ElementTree as ET


class Tier(str, Enum):
    OPEN = "open"
    NO_MODIFICATION = "no_modification"
    NON_OPEN = "non_open"


@dataclass(frozen=True)
class Licence:
    tier: Tier
    name: str = ""


LINGUISTIC_STATUSES = ("original", "normalised")

FORMATS = ("plain-text", "tei-subset-xml", "record-per-line")

YEAR_MIN, YEAR_MAX = 1000, 2100


class CorpusError(ValueError):
    pass


@dataclass
class Document:
    """Canonical corpus record: text body plus bibliographic metadata."""

    id: str
    title: str
    author: str
    year: int | None
    genre: str
    subgenre: str | None
    linguistic_status: str
    licence: Licence
    source_origin: str
    body: str

    def validate(self) -> None:
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if not self.body.strip():
            raise CorpusError(f"document {self.id!r}: body is empty")
        if self.year is not None and not (YEAR_MIN <= self.year <= YEAR_MAX):
            raise CorpusError(f"document {self.id!r}: year {self.year} outside "
                              f"[{YEAR_MIN}, {YEAR_MAX}]")
        if self.linguistic_status not in LINGUISTIC_STATUSES:
            raise CorpusError(f"document {self.id!r}: bad linguistic_status "
                              f"{self.linguistic_status!r}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "author": self.author,
            "year": self.year,
            "genre": self.genre,
            "subgenre": self.subgenre,
            "linguistic_status": self.linguistic_status,
            "licence_tier": self.licence.tier.value,
            "licence_name": self.licence.name,
            "source_origin": self.source_origin,
            "body": self.body,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "Document":
        try:
            tier = Tier(record["licence_tier"])
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"bad or missing licence_tier in record: {exc}") from exc
        doc = cls(
            id=str(record["id"]),
            title=str(record.get("title", "")),
            author=str(record.get("author", "")),
            year=int(record["year"]) if record.get("year") is not None else None,
            genre=str(record.get("genre", "")),
            subgenre=record.get("subgenre"),
            linguistic_status=str(record.get("linguistic_status", "original")),
            licence=Licence(tier, str(record.get("licence_name", ""))),
            source_origin=str(record.get("source_origin", "")),
            body=str(record["body"]),
        )
        doc.validate()
        return doc


@dataclass(frozen=True)
class IngestError:
    path: str
    message: str


@dataclass
class CorpusStats:
    total_tokens: int = 0
    per_origin_tokens: dict[str, int] = field(default_factory=dict)
    per_year_doc_counts: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class HistogramBin:
    start: int  # inclusive
    end: int    # exclusive
    count: int


# ---------------------------------------------------------------------------
# metadata table

METADATA_COLUMNS = ("file", "id", "title", "author", "year", "genre", "subgenre",
                    "linguistic_status", "licence_tier", "licence_name",
                    "source_origin")


def read_metadata_table(path: str | Path) -> dict[str, dict[str, str]]:
    """Tab-separated metadata keyed by source file name; header row required."""
    rows: dict[str, dict[str, str]] = {}
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        if reader.fieldnames is None or "file" not in reader.fieldnames:
            raise CorpusError(f"{path}: metadata table needs a header row with a "
                              f"'file' column")
        for row in reader:
            key = (row.get("file") or "").strip()
            if not key:
                raise CorpusError(f"{path}: metadata row with empty 'file' cell")
            if key in rows:
                raise CorpusError(f"{path}: duplicate metadata row for {key!r}")
            rows[key] = {k: (v or "").strip() for k, v in row.items()}
    return rows


def _document_from_row(row: Mapping[str, str], file_path: Path, body: str) -> Document:
    year_text = row.get("year", "")
    doc = Document(
        id=row.get("id") or file_path.stem,
        title=row.get("title", ""),
        author=row.get("author", ""),
        year=int(year_text) if year_text else None,
        genre=row.get("genre", ""),
        subgenre=row.get("subgenre") or None,
        linguistic_status=row.get("linguistic_status") or "original",
        licence=Licence(Tier(row.get("licence_tier") or "open"),
                        row.get("licence_name", "")),
        source_origin=row.get("source_origin", ""),
        body=body,
    )
    doc.validate()
    return doc


# ---------------------------------------------------------------------------
# TEI-subset extraction

# Structure elements whose close marks a paragraph/line boundary.
_TEI_BREAK = {"p", "l", "head"}
# Dropped entirely: page breaks, editorial notes, foreign-language material.
_TEI_DROP = {"pb", "note", "foreign"}


def _local_name(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _collect_tei(element: ET.Element, parts: list[str]) -> None:
    if _local_name(element.tag) in _TEI_DROP:
        return
    if element.text:
        parts.append(element.text)
    for child in element:
        _collect_tei(child, parts)
        if _local_name(child.tag) in _TEI_BREAK:
            parts.append("\n")
        if child.tail:
            parts.append(child.tail)


def extract_tei_text(xml_text: str) -> str:
    """Strip a TEI-subset document to its text content.

    Paragraphs, verse lines, and headings become newline-separated lines;
    page breaks, notes, and foreign material are dropped; any other markup
    contributes its text content with attributes ignored.
    """
    root = ET.fromstring(xml_text)
    text_el = None
    for el in root.iter():
        if _local_name(el.tag) == "text":
            text_el = el
            break
    parts: list[str] = []
    _collect_tei(text_el if text_el is not None else root, parts)
    lines = [" ".join(chunk.split()) for chunk in "".join(parts).split("\n")]
    return "\n".join(line for line in lines if line)


# ---------------------------------------------------------------------------
# ingest

def _read_source(path: Path, fmt: str) -> str:
    if fmt == "plain-text":
        return path.read_text(encoding="utf-8")
    if fmt == "tei-subset-xml":
        try:
            return extract_tei_text(path.read_text(encoding="utf-8"))
        except ET.ParseError as exc:
            line, col = exc.position
            raise CorpusError(f"malformed XML at line {line}, column {col}") from exc
    raise CorpusError(f"unknown source format {fmt!r}")


def detect_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".xml":
        return "tei-subset-xml"
    if suffix == ".jsonl":
        return "record-per-line"
    return "plain-text"


def _ingest_one(path: Path, fmt: str,
                metadata: Mapping[str, Mapping[str, str]]) -> list[Document]:
    if fmt == "record-per-line":
        # Records carry their own metadata, so no table row is required.
        docs = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                      start=1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid record: {exc}") from exc
        return docs
    row = metadata.get(path.name)
    if row is None:
        raise CorpusError("missing metadata")
    body = _read_source(path, fmt)
    return [_document_from_row(row, path, body)]


def ingest(source_files: Sequence[tuple[str | Path, str]],
           metadata: Mapping[str, Mapping[str, str]],
           jobs: int = 1) -> tuple[list[Document], list[IngestError]]:
    """Canonicalize source files into Documents.

    Per-file failures (missing metadata row, malformed XML) are reported and
    the pipeline continues. Results are sorted by id regardless of execution
    order; duplicate ids are an error on the later file.
    """
    tasks = [(Path(p), fmt) for p, fmt in source_files]
    for _, fmt in tasks:
        if fmt not in FORMATS:
            raise CorpusError(f"unknown format {fmt!r}; expected one of {FORMATS}")

    def work(task: tuple[Path, str]):
        path, fmt = task
        try:
            return _ingest_one(path, fmt, metadata), None
        except (CorpusError, OSError, ValueError) as exc:
            return None, IngestError(str(path), str(exc))

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(task) for task in tasks]

    docs: list[Document] = []
    errors: list[IngestError] = []
    for got, err in results:
        if err is not None:
            errors.append(err)
        else:
            docs.extend(got)
    docs.sort(key=lambda d: d.id)
    seen: set[str] = set()
    deduped: list[Document] = []
    for doc in docs:
        if doc.id in seen:
            errors.append(IngestError(doc.id, f"duplicate document id {doc.id!r}"))
            continue
        seen.add(doc.id)
        deduped.append(doc)
    return deduped, errors


# ---------------------------------------------------------------------------
# partition / stats / histogram

def partition(docs: Iterable[Document]) -> tuple[list[Document], list[Document]]:
    """Split into (distributable, withheld). Non-open documents are withheld;
    open and no-modification documents are distributable. Never drops or
    duplicates a document."""
    distributable: list[Document] = []
    withheld: list[Document] = []
    for doc in docs:
        if doc.licence.tier is Tier.NON_OPEN:
            withheld.append(doc)
        else:
            distributable.append(doc)
    return distributable, withheld


def count_tokens(text: str) -> int:
    # Token = maximal run of non-whitespace (str.split handles Unicode spaces).
    return len(text.split())


def stats(docs: Iterable[Document]) -> CorpusStats:
    result = CorpusStats()
    for doc in docs:
        n = count_tokens(doc.body)
        result.total_tokens += n
        origin = doc.source_origin or "(unknown)"
        result.per_origin_tokens[origin] = result.per_origin_tokens.get(origin, 0) + n
        if doc.year is not None:
            result.per_year_doc_counts[doc.year] = (
                result.per_year_doc_counts.get(doc.year, 0) + 1)
    return result


def histogram_bins(st: CorpusStats, bin_width: int) -> list[HistogramBin]:
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    if not st.per_year_doc_counts:
        return []
    lo = min(st.per_year_doc_counts)
    hi = max(st.per_year_doc_counts)
    bins = []
    start = lo
    while start <= hi:
        end = start + bin_width
        count = sum(c for y, c in st.per_year_doc_counts.items() if start <= y < end)
        bins.append(HistogramBin(start, end, count))
        start = end
    return bins


def emit_histogram(st: CorpusStats, bin_width: int) -> str:
    """Text histogram of dated-document counts per year bin."""
    bins = histogram_bins(st, bin_width)
    if not bins:
        return ""
    peak = max(b.count for b in bins) or 1
    lines = []
    for b in bins:
        bar = "#" * round(40 * b.count / peak)
        lines.append(f"[{b.start}, {b.end})\t{b.count}\t{bar}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# canonical serialization

def write_corpus(docs: Iterable[Document], path: str | Path) -> None:
    ordered = sorted(docs, key=lambda d: d.id)
    seen: set[str] = set()
    for doc in ordered:
        doc.validate()
        if doc.id in seen:
            raise CorpusError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
    with open(path, "w", encoding="utf-8") as handle:
        for doc in ordered:
            handle.write(json.dumps(doc.to_record(), ensure_ascii=False,
                                    sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[Document]:
    docs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            docs.append(Document.from_record(json.loads(line)))
    return docs


def read_corpus_dir(directory: str | Path) -> list[Document]:
    """All *.jsonl files under a directory, sorted by document id."""
    docs: list[Document] = []
    for path in sorted(Path(directory).glob("*.jsonl")):
        docs.extend(read_corpus(path))
    docs.sort(key=lambda d: d.id)
    return docs


def mark_normalised(doc: Document, new_body: str) -> Document:
    return replace(doc, body=new_body, linguistic_status="normalised")
