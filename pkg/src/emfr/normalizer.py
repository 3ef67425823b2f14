"""Rule-based graphemic modernization of Early Modern French spellings.

Covers the phenomena decidable by local rules: long s, tilde abbreviations
(vowel + tilde standing for vowel + nasal consonant), and positional u/v
confusion. Lexical changes (etymological letters, welding) go through the
exception lexicon only. Accent restoration is out of scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

UV_INITIAL = "initial-v-to-u"
UV_INTERVOCALIC = "intervocalic-u-to-v"
_KNOWN_UV_RULES = (UV_INITIAL, UV_INTERVOCALIC)

_VOWELS = set("aàâäæeéèêëiîïoôöœuùûüy")

# Unicode letter runs; digits and underscore excluded.
_LETTER_RUN = re.compile(r"[^\W\d_]+", re.UNICODE)
_TOKEN_SPLIT = re.compile(r"\s+|\S+", re.UNICODE)


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class RuleSet:
    """Ordered normalization machinery.

    char_map: single character -> replacement (e.g. long s -> s).
    tilde_expansions: tilde vowel -> bare vowel; the nasal consonant is chosen
        from context (m before b/p/m, else n).
    uv_rules: positional u/v rewrites, applied in order.
    uv_confirm: words (lowercase) confirmed for the intervocalic u -> v rule.
    exceptions: whole-word lexicon; takes absolute priority over all rules.
    """

    char_map: dict[str, str]
    tilde_expansions: dict[str, str]
    uv_rules: tuple[str, ...]
    uv_confirm: frozenset[str]
    exceptions: dict[str, str]

    def __post_init__(self) -> None:
        overlap = set(self.char_map) & set(self.tilde_expansions)
        if overlap:
            raise RuleError(f"char_map and tilde_expansions keys overlap: {overlap}")
        for rule in self.uv_rules:
            if rule not in _KNOWN_UV_RULES:
                raise RuleError(f"unknown u/v rule {rule!r}; known: {_KNOWN_UV_RULES}")


def parse_rules(text: str) -> RuleSet:
    """Parse the plain-text rule format (one directive per line).

    Directives: `char <from> <to>`, `tilde <vowel> <bare>`, `uv <rule-name>`,
    `confirm <word>`, `except <old> <new>`. `#` starts a comment.
    """
    char_map: dict[str, str] = {}
    tilde: dict[str, str] = {}
    uv: list[str] = []
    confirm: set[str] = set()
    exceptions: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind, args = fields[0], fields[1:]
        if kind == "char" and len(args) == 2:
            char_map[args[0]] = args[1]
        elif kind == "tilde" and len(args) == 2:
            tilde[args[0]] = args[1]
        elif kind == "uv" and len(args) == 1:
            uv.append(args[0])
        elif kind == "confirm" and len(args) == 1:
            confirm.add(args[0].lower())
        elif kind == "except" and len(args) == 2:
            exceptions[args[0].lower()] = args[1]
        else:
            raise RuleError(f"line {lineno}: cannot parse directive {raw!r}")
    return RuleSet(char_map=char_map, tilde_expansions=tilde, uv_rules=tuple(uv),
                   uv_confirm=frozenset(confirm), exceptions=exceptions)


def load_rules(path: str | Path) -> RuleSet:
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def default_rules() -> RuleSet:
    shipped = resources.files("emfr").joinpath("data/default_rules.txt")
    return parse_rules(shipped.read_text(encoding="utf-8"))


def _match_case(replacement: str, source_char: str) -> str:
    if source_char.isupper() and replacement:
        return replacement[0].upper() + replacement[1:]
    return replacement


def _is_vowel(ch: str) -> bool:
    return ch.lower() in _VOWELS


def _apply_letter_rules(run: str, rules: RuleSet) -> str:
    lower = run.lower()
    if lower in rules.exceptions:
        return _match_case(rules.exceptions[lower], run[0])

    # Character map, case-preserving.
    chars: list[str] = []
    for ch in run:
        if ch in rules.char_map:
            chars.append(rules.char_map[ch])
        elif ch.lower() in rules.char_map:
            chars.append(_match_case(rules.char_map[ch.lower()], ch))
        else:
            chars.append(ch)

    # Tilde expansion; nasal consonant is m before b/p/m, else n.
    expanded: list[str] = []
    for i, ch in enumerate(chars):
        key = ch.lower()
        if key in rules.tilde_expansions:
            nxt = chars[i + 1] if i + 1 < len(chars) else ""
            nasal = "m" if nxt[:1].lower() in ("b", "p", "m") else "n"
            expanded.append(_match_case(rules.tilde_expansions[key], ch) + nasal)
        else:
            expanded.append(ch)
    word = "".join(expanded)

    for rule in rules.uv_rules:
        if rule == UV_INITIAL:
            # Word-initial v before a consonant is a u glyph (vne -> une).
            # r is excluded: modern vr- words (vrai) exist and the rewrite
            # would not be idempotent on them.
            if (len(word) >= 2 and word[0].lower() == "v"
                    and word[1].isalpha() and not _is_vowel(word[1])
                    and word[1].lower() != "r"):
                word = _match_case("u", word[0]) + word[1:]
        elif rule == UV_INTERVOCALIC:
            if word.lower() not in rules.uv_confirm:
                continue
            chars2 = list(word)
            for i in range(1, len(chars2) - 1):
                ch = chars2[i]
                prev_ch, next_ch = chars2[i - 1], chars2[i + 1]
                # In a uu digraph the second u is the consonant (ouu -> ouv).
                if (ch.lower() == "u" and _is_vowel(prev_ch)
                        and _is_vowel(next_ch) and next_ch.lower() != "u"):
                    chars2[i] = _match_case("v", ch)
            word = "".join(chars2)
    return word


def normalize_word(word: str, rules: RuleSet) -> str:
    """Normalize one whitespace-free word; the first letter's case is kept.

    The exception lexicon is checked against the whole word first (so
    hyphenated entries match); otherwise rules apply to each letter run,
    leaving punctuation untouched.
    """
    if any(ch.isspace() for ch in word):
        raise ValueError("normalize_word expects a single whitespace-free word")
    lower = word.lower()
    if lower in rules.exceptions:
        return _match_case(rules.exceptions[lower], word[0])
    return _LETTER_RUN.sub(lambda m: _apply_letter_rules(m.group(0), rules), word)


def normalize_text(text: str, rules: RuleSet) -> str:
    """Word-by-word normalization preserving all whitespace and punctuation."""
    parts = []
    for token in _TOKEN_SPLIT.findall(text):
        parts.append(token if token.isspace() else normalize_word(token, rules))
    return "".join(parts)
