"""Patch formats: search-replace blocks, unified diffs, and line diffs.

Three formats, one applier contract: matching is exact (character for
character, no whitespace normalization, no fuzzy offsets) so that a model
that hallucinates content or line numbers fails loudly instead of silently
corrupting the file. Multi-file application is all-or-nothing.

Wire grammars
-------------
Search-replace (one block)::

    path/to/file.py
    ```
    <<<<<<< SEARCH
    exact existing lines
    =======
    replacement lines
    >>>>>>> REPLACE
    ```

The fence lines are optional. The search text must occur exactly once in the
target file. An empty replacement deletes the search text; creating a new
file is only expressible in unified format.

Unified diffs follow the standard ---/+++/@@ form, including the
"\\ No newline at end of file" marker. Line diffs name a file on its own
line followed by edits ``- <n>: <text>`` / ``+ <n>: <text>`` where all line
numbers refer to the original file: deletes must match the original text and
adds insert after original line n (0 prepends).
"""

from __future__ import annotations

import difflib
import re
from collections import Counter
from dataclasses import dataclass, field

from .workspace import Workspace

SEARCH_MARKER = "<<<<<<< SEARCH"
DIVIDER_MARKER = "======="
REPLACE_MARKER = ">>>>>>> REPLACE"

FORMAT_SEARCH_REPLACE = "search_replace"
FORMAT_UNIFIED = "unified"
FORMAT_LINE = "line"


class PatchError(Exception):
    """Base for parse/apply failures in any patch format."""


class MalformedBlockError(PatchError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SearchNotFoundError(PatchError):
    def __init__(self, path: str, block_index: int):
        super().__init__(f"block {block_index}: search text not found in {path}")
        self.path = path
        self.block_index = block_index


class AmbiguousSearchError(PatchError):
    def __init__(self, path: str, block_index: int, count: int):
        super().__init__(
            f"block {block_index}: search text occurs {count} times in {path}; "
            "it must be unique"
        )
        self.path = path
        self.block_index = block_index
        self.count = count


class ContextMismatchError(PatchError):
    def __init__(self, path: str, hunk_index: int, line: int, detail: str = ""):
        msg = f"hunk {hunk_index}: context mismatch in {path} at line {line}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.path = path
        self.hunk_index = hunk_index
        self.line = line


class HeaderCountMismatchError(PatchError):
    pass


class LineOutOfRangeError(PatchError):
    pass


class DeleteTextMismatchError(PatchError):
    pass


@dataclass
class SearchReplaceBlock:
    path: str
    search_text: str
    replace_text: str

    def __post_init__(self):
        if not self.search_text:
            raise ValueError("search_text must be non-empty")


# Unified diff model. Each hunk line is (tag, text) with tag in
# {"context", "add", "delete"}; text keeps its newline unless the source
# line was the last of a file with no trailing newline.
@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class FilePatch:
    old_path: str | None  # None means /dev/null (file creation)
    new_path: str | None  # None means /dev/null (file deletion)
    hunks: list[Hunk] = field(default_factory=list)

    @property
    def path(self) -> str:
        p = self.new_path if self.new_path is not None else self.old_path
        assert p is not None
        return p


@dataclass
class UnifiedPatch:
    files: list[FilePatch] = field(default_factory=list)


@dataclass
class LineEdit:
    line_number: int  # 1-based in the ORIGINAL file; 0 allowed for adds (prepend)
    op: str  # "add" | "delete"
    text: str


@dataclass
class LinePatch:
    files: dict[str, list[LineEdit]] = field(default_factory=dict)


@dataclass
class AppliedPatch:
    """Result of applying a patch: new contents per file plus a rendered diff.

    A value of None in ``files`` marks a deleted file.
    """

    files: dict[str, str | None]
    diff_text: str


def split_keepends(content: str) -> list[str]:
    return content.splitlines(keepends=True)


def _join_tagged(lines: list[str]) -> str:
    return "".join(lines)


# ---------------------------------------------------------------------------
# Search-replace format


def parse_search_replace(text: str) -> list[SearchReplaceBlock]:
    """Extract all search-replace blocks from a raw model response.

    Prose outside blocks is ignored. The file path is the last non-empty,
    non-fence line before the SEARCH marker. Raises MalformedBlockError with
    the 1-based line of the first problem.
    """
    lines = text.split("\n")
    blocks: list[SearchReplaceBlock] = []
    i = 0
    n = len(lines)
    while i < n:
        stripped = lines[i].strip()
        if stripped == REPLACE_MARKER:
            raise MalformedBlockError("REPLACE marker without an open block", i + 1)
        if stripped != SEARCH_MARKER:
            i += 1
            continue
        marker_line = i + 1
        path = _path_before(lines, i)
        if path is None:
            raise MalformedBlockError("no file path before SEARCH marker", marker_line)
        i += 1
        search_lines: list[str] = []
        while i < n and lines[i].strip() != DIVIDER_MARKER:
            if lines[i].strip() in (SEARCH_MARKER, REPLACE_MARKER):
                raise MalformedBlockError("missing ======= divider", marker_line)
            search_lines.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedBlockError("missing ======= divider", marker_line)
        i += 1
        replace_lines: list[str] = []
        while i < n and lines[i].strip() != REPLACE_MARKER:
            if lines[i].strip() == SEARCH_MARKER:
                raise MalformedBlockError("missing REPLACE marker", marker_line)
            replace_lines.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedBlockError("missing REPLACE marker", marker_line)
        i += 1
        if not search_lines:
            raise MalformedBlockError("empty search text", marker_line)
        blocks.append(
            SearchReplaceBlock(
                path=path,
                search_text="\n".join(search_lines),
                replace_text="\n".join(replace_lines),
            )
        )
    return blocks


def _path_before(lines: list[str], marker_index: int) -> str | None:
    j = marker_index - 1
    while j >= 0:
        candidate = lines[j].strip()
        if not candidate or candidate.startswith("```"):
            j -= 1
            continue
        # A path must look like one: a single token without spaces.
        if " " in candidate or candidate in (DIVIDER_MARKER, REPLACE_MARKER):
            return None
        return candidate
    return None


def contains_block_markers(text: str) -> bool:
    """True when the text contains anything block-like, however malformed."""
    return SEARCH_MARKER in text or REPLACE_MARKER in text


def apply_search_replace(ws: Workspace, blocks: list[SearchReplaceBlock]) -> AppliedPatch:
    """Apply blocks in order; each search text must match exactly once.

    Later blocks see earlier blocks' effects. Any failure rolls everything
    back (nothing is written unless every block applies).
    """
    before: dict[str, str] = {}
    working: dict[str, str] = {}
    for idx, block in enumerate(blocks, start=1):
        if block.path not in working:
            content = ws.read_file(block.path)  # FileNotFoundError propagates
            before[block.path] = content
            working[block.path] = content
        current = working[block.path]
        count = current.count(block.search_text)
        if count == 0:
            raise SearchNotFoundError(block.path, idx)
        if count > 1:
            raise AmbiguousSearchError(block.path, idx, count)
        working[block.path] = current.replace(block.search_text, block.replace_text, 1)
    after = {path: content for path, content in working.items()}
    for path, content in after.items():
        ws.write_file(path, content)
    diff = render_unified(before, after)
    return AppliedPatch(files=dict(after), diff_text=diff)


# ---------------------------------------------------------------------------
# Unified diff format

HUNK_HEADER_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
NO_NEWLINE_MARKER = "\\ No newline at end of file"


def _strip_diff_prefix(header_path: str) -> str | None:
    token = header_path.split("\t")[0].strip()
    if token == "/dev/null":
        return None
    for prefix in ("a/", "b/"):
        if token.startswith(prefix):
            return token[len(prefix):]
    return token


def parse_unified(text: str) -> UnifiedPatch:
    """Parse unified diff text; header counts are validated against bodies."""
    lines = text.split("\n")
    files: list[FilePatch] = []
    i = 0
    n = len(lines)
    current: FilePatch | None = None
    while i < n:
        line = lines[i]
        if line.startswith("--- "):
            old = _strip_diff_prefix(line[4:])
            if i + 1 >= n or not lines[i + 1].startswith("+++ "):
                raise PatchError(f"line {i + 1}: '---' header without '+++'")
            new = _strip_diff_prefix(lines[i + 1][4:])
            current = FilePatch(old_path=old, new_path=new)
            files.append(current)
            i += 2
            continue
        m = HUNK_HEADER_RE.match(line)
        if m:
            if current is None:
                raise PatchError(f"line {i + 1}: hunk before file header")
            old_start = int(m.group(1))
            old_len = int(m.group(2)) if m.group(2) is not None else 1
            new_start = int(m.group(3))
            new_len = int(m.group(4)) if m.group(4) is not None else 1
            hunk = Hunk(old_start, old_len, new_start, new_len)
            i += 1
            seen_old = seen_new = 0
            while i < n and (seen_old < old_len or seen_new < new_len):
                body = lines[i]
                if body.startswith("-"):
                    hunk.lines.append(("delete", body[1:] + "\n"))
                    seen_old += 1
                elif body.startswith("+"):
                    hunk.lines.append(("add", body[1:] + "\n"))
                    seen_new += 1
                elif body.startswith(" ") or body == "":
                    hunk.lines.append(("context", body[1:] + "\n" if body else "\n"))
                    seen_old += 1
                    seen_new += 1
                elif body.startswith("\\"):
                    _mark_no_newline(hunk)
                else:
                    raise HeaderCountMismatchError(
                        f"line {i + 1}: hunk body ended before header counts "
                        f"were satisfied"
                    )
                i += 1
            if i < n and lines[i].startswith("\\"):
                _mark_no_newline(hunk)
                i += 1
            if seen_old != old_len or seen_new != new_len:
                raise HeaderCountMismatchError(
                    f"hunk @@ -{old_start},{old_len} +{new_start},{new_len} @@: "
                    f"body has {seen_old}/{seen_new} lines"
                )
            current.hunks.append(hunk)
            continue
        i += 1
    for fp in files:
        _check_hunk_order(fp)
    return UnifiedPatch(files=files)


def _mark_no_newline(hunk: Hunk) -> None:
    if not hunk.lines:
        raise PatchError("no-newline marker with no preceding line")
    tag, text = hunk.lines[-1]
    if not text.endswith("\n"):
        raise PatchError("duplicate no-newline marker")
    hunk.lines[-1] = (tag, text[:-1])


def _check_hunk_order(fp: FilePatch) -> None:
    prev_end = 0
    for hunk in fp.hunks:
        start = hunk.old_start if hunk.old_len else hunk.old_start + 1
        if start <= prev_end:
            raise PatchError(f"overlapping or unordered hunks in {fp.path}")
        prev_end = hunk.old_start + max(hunk.old_len, 0)


def _apply_hunks_to_lines(path: str, old_lines: list[str], hunks: list[Hunk]) -> list[str]:
    out: list[str] = []
    cursor = 0  # 0-based index into old_lines
    for hunk_index, hunk in enumerate(hunks, start=1):
        begin = hunk.old_start - 1 if hunk.old_len else hunk.old_start
        if begin < cursor or begin > len(old_lines):
            raise ContextMismatchError(path, hunk_index, hunk.old_start, "bad offset")
        out.extend(old_lines[cursor:begin])
        cursor = begin
        for tag, text in hunk.lines:
            if tag == "add":
                out.append(text)
                continue
            if cursor >= len(old_lines):
                raise ContextMismatchError(path, hunk_index, cursor + 1, "past end of file")
            if old_lines[cursor] != text:
                raise ContextMismatchError(
                    path,
                    hunk_index,
                    cursor + 1,
                    f"expected {text!r}, found {old_lines[cursor]!r}",
                )
            if tag == "context":
                out.append(text)
            cursor += 1
    out.extend(old_lines[cursor:])
    return out


def apply_unified(ws: Workspace, patch: UnifiedPatch) -> AppliedPatch:
    """Apply a unified patch with strict context verification.

    Every context and delete line must match the file byte-for-byte at the
    stated offset; any drift raises ContextMismatchError and nothing is
    written.
    """
    before: dict[str, str] = {}
    results: dict[str, str | None] = {}
    for fp in patch.files:
        if fp.old_path is None:
            old_content = ""
        else:
            old_content = ws.read_file(fp.old_path)
            before[fp.old_path] = old_content
        new_lines = _apply_hunks_to_lines(fp.path, split_keepends(old_content), fp.hunks)
        if fp.new_path is None:
            results[fp.old_path] = None  # deletion
        else:
            results[fp.new_path] = _join_tagged(new_lines)
    for path, content in results.items():
        if content is None:
            ws.delete_file(path)
        else:
            ws.write_file(path, content)
    after = {p: c for p, c in results.items() if c is not None}
    diff = render_unified(before, after)
    return AppliedPatch(files=results, diff_text=diff)


def apply_unified_to_map(files: dict[str, str], patch: UnifiedPatch) -> dict[str, str]:
    """Pure-map variant of apply_unified, used for round-trip checks."""
    out = dict(files)
    for fp in patch.files:
        if fp.old_path is None:
            old_content = ""
        elif fp.old_path in out:
            old_content = out[fp.old_path]
        else:
            raise FileNotFoundError(fp.old_path)
        new_lines = _apply_hunks_to_lines(fp.path, split_keepends(old_content), fp.hunks)
        if fp.new_path is None:
            out.pop(fp.old_path, None)
        else:
            out[fp.new_path] = _join_tagged(new_lines)
    return out


def render_unified(before: dict[str, str], after: dict[str, str], context: int = 3) -> str:
    """Render a unified diff between two file maps.

    Round-trip law: apply_unified_to_map(before, parse_unified(result))
    equals after. Creation of an empty file is not representable and is
    rejected.
    """
    chunks: list[str] = []
    for path in sorted(set(before) | set(after)):
        old = before.get(path)
        new = after.get(path)
        if old == new:
            continue
        if old is None and new == "":
            raise PatchError(f"cannot express creation of empty file {path}")
        if old == "" and new is None:
            raise PatchError(f"cannot express deletion of empty file {path}")
        old_lines = split_keepends(old or "")
        new_lines = split_keepends(new or "")
        header_old = f"a/{path}" if old is not None else "/dev/null"
        header_new = f"b/{path}" if new is not None else "/dev/null"
        sm = difflib.SequenceMatcher(a=old_lines, b=new_lines, autojunk=False)
        groups = list(sm.get_grouped_opcodes(context))
        if not groups:
            continue
        chunks.append(f"--- {header_old}")
        chunks.append(f"+++ {header_new}")
        for group in groups:
            i1, i2 = group[0][1], group[-1][2]
            j1, j2 = group[0][3], group[-1][4]
            old_len = i2 - i1
            new_len = j2 - j1
            old_start = i1 + 1 if old_len else i1
            new_start = j1 + 1 if new_len else j1
            chunks.append(f"@@ -{old_start},{old_len} +{new_start},{new_len} @@")
            for tag, a1, a2, b1, b2 in group:
                if tag == "equal":
                    for text in old_lines[a1:a2]:
                        chunks.extend(_render_line(" ", text))
                    continue
                if tag in ("replace", "delete"):
                    for text in old_lines[a1:a2]:
                        chunks.extend(_render_line("-", text))
                if tag in ("replace", "insert"):
                    for text in new_lines[b1:b2]:
                        chunks.extend(_render_line("+", text))
    if not chunks:
        return ""
    return "\n".join(chunks) + "\n"


def _render_line(prefix: str, text: str) -> list[str]:
    if text.endswith("\n"):
        return [prefix + text[:-1]]
    return [prefix + text, NO_NEWLINE_MARKER]


def render_unified_patch(patch: UnifiedPatch) -> str:
    """Serialize a parsed UnifiedPatch back to diff text (parse inverse)."""
    chunks: list[str] = []
    tag_prefix = {"context": " ", "add": "+", "delete": "-"}
    for fp in patch.files:
        chunks.append(f"--- {'a/' + fp.old_path if fp.old_path else '/dev/null'}")
        chunks.append(f"+++ {'b/' + fp.new_path if fp.new_path else '/dev/null'}")
        for hunk in fp.hunks:
            chunks.append(
                f"@@ -{hunk.old_start},{hunk.old_len} +{hunk.new_start},{hunk.new_len} @@"
            )
            for tag, text in hunk.lines:
                chunks.extend(_render_line(tag_prefix[tag], text))
    if not chunks:
        return ""
    return "\n".join(chunks) + "\n"


# ---------------------------------------------------------------------------
# Line diff format

LINE_EDIT_RE = re.compile(r"^([+-])\s*(\d+):\s?(.*)$")


def parse_line_diff(text: str) -> LinePatch:
    """Parse the compact line-diff format (see module docstring)."""
    files: dict[str, list[LineEdit]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.strip().startswith("```"):
            continue
        m = LINE_EDIT_RE.match(line)
        if m:
            if current is None:
                raise PatchError(f"line {lineno}: edit before any file path")
            op = "add" if m.group(1) == "+" else "delete"
            files.setdefault(current, []).append(
                LineEdit(line_number=int(m.group(2)), op=op, text=m.group(3))
            )
        else:
            candidate = line.strip()
            if " " in candidate:
                raise PatchError(f"line {lineno}: expected file path or edit, got {candidate!r}")
            current = candidate
            files.setdefault(current, [])
    return LinePatch(files=files)


def apply_line_diff(ws: Workspace, patch: LinePatch) -> AppliedPatch:
    """Apply line edits, all interpreted against the original file at once.

    Deletes must match the original text exactly; adds insert after the
    stated original line number (0 prepends).
    """
    before: dict[str, str] = {}
    results: dict[str, str | None] = {}
    for path, edits in patch.files.items():
        original = ws.read_file(path)
        before[path] = original
        lines = original.split("\n")
        trailing_newline = lines and lines[-1] == ""
        if trailing_newline:
            lines = lines[:-1]
        deletes: set[int] = set()
        adds: dict[int, list[str]] = {}
        for edit in edits:
            if edit.op == "delete":
                if edit.line_number < 1 or edit.line_number > len(lines):
                    raise LineOutOfRangeError(
                        f"{path}: delete line {edit.line_number} of {len(lines)}"
                    )
                actual = lines[edit.line_number - 1]
                if actual != edit.text:
                    raise DeleteTextMismatchError(
                        f"{path} line {edit.line_number}: stated {edit.text!r}, "
                        f"actual {actual!r}"
                    )
                deletes.add(edit.line_number)
            else:
                if edit.line_number < 0 or edit.line_number > len(lines):
                    raise LineOutOfRangeError(
                        f"{path}: add after line {edit.line_number} of {len(lines)}"
                    )
                adds.setdefault(edit.line_number, []).append(edit.text)
        out: list[str] = []
        out.extend(adds.get(0, []))
        for number, text in enumerate(lines, start=1):
            if number not in deletes:
                out.append(text)
            out.extend(adds.get(number, []))
        content = "\n".join(out)
        if trailing_newline or not out:
            content += "\n" if out else ""
        results[path] = content
    for path, content in results.items():
        assert content is not None
        ws.write_file(path, content)
    after = {p: c for p, c in results.items() if c is not None}
    return AppliedPatch(files=results, diff_text=render_unified(before, after))


# ---------------------------------------------------------------------------
# PatchSet and similarity


@dataclass
class PatchSet:
    """A parsed patch in any of the three formats.

    touched_paths always equals the union of paths its contents reference.
    """

    format: str
    search_blocks: list[SearchReplaceBlock] = field(default_factory=list)
    unified: UnifiedPatch | None = None
    line_patch: LinePatch | None = None

    @classmethod
    def from_blocks(cls, blocks: list[SearchReplaceBlock]) -> "PatchSet":
        return cls(format=FORMAT_SEARCH_REPLACE, search_blocks=list(blocks))

    @classmethod
    def from_unified(cls, patch: UnifiedPatch) -> "PatchSet":
        return cls(format=FORMAT_UNIFIED, unified=patch)

    @classmethod
    def from_unified_text(cls, text: str) -> "PatchSet":
        return cls.from_unified(parse_unified(text))

    @classmethod
    def from_line(cls, patch: LinePatch) -> "PatchSet":
        return cls(format=FORMAT_LINE, line_patch=patch)

    @property
    def touched_paths(self) -> set[str]:
        if self.format == FORMAT_SEARCH_REPLACE:
            return {b.path for b in self.search_blocks}
        if self.format == FORMAT_UNIFIED:
            assert self.unified is not None
            return {fp.path for fp in self.unified.files}
        assert self.line_patch is not None
        return set(self.line_patch.files)

    def changed_lines(self) -> tuple[Counter, Counter]:
        """Multisets of (normalized) added and deleted lines."""
        adds: Counter = Counter()
        dels: Counter = Counter()

        def norm(text: str) -> str | None:
            stripped = text.strip()
            return stripped or None

        if self.format == FORMAT_UNIFIED:
            assert self.unified is not None
            for fp in self.unified.files:
                for hunk in fp.hunks:
                    for tag, text in hunk.lines:
                        key = norm(text)
                        if key is None:
                            continue
                        if tag == "add":
                            adds[key] += 1
                        elif tag == "delete":
                            dels[key] += 1
        elif self.format == FORMAT_LINE:
            assert self.line_patch is not None
            for edits in self.line_patch.files.values():
                for edit in edits:
                    key = norm(edit.text)
                    if key is None:
                        continue
                    (adds if edit.op == "add" else dels)[key] += 1
        else:
            for block in self.search_blocks:
                old = block.search_text.split("\n")
                new = block.replace_text.split("\n") if block.replace_text else []
                sm = difflib.SequenceMatcher(a=old, b=new, autojunk=False)
                for tag, i1, i2, j1, j2 in sm.get_opcodes():
                    if tag in ("replace", "delete"):
                        for text in old[i1:i2]:
                            key = norm(text)
                            if key is not None:
                                dels[key] += 1
                    if tag in ("replace", "insert"):
                        for text in new[j1:j2]:
                            key = norm(text)
                            if key is not None:
                                adds[key] += 1
        return adds, dels


def patch_similarity(a: PatchSet, b: PatchSet) -> float:
    """Jaccard similarity between a's changes and the INVERSE of b's.

    An exact revert of b scores 1.0, a disjoint patch 0.0. Lines are
    compared as whitespace-stripped multisets, additions against deletions
    and vice versa; the score is symmetric in its arguments.
    """
    a_adds, a_dels = a.changed_lines()
    b_adds, b_dels = b.changed_lines()
    mine: Counter = Counter()
    theirs: Counter = Counter()
    for key, cnt in a_adds.items():
        mine[("add", key)] += cnt
    for key, cnt in a_dels.items():
        mine[("del", key)] += cnt
    # Inverse of b: its deletions become additions and vice versa.
    for key, cnt in b_dels.items():
        theirs[("add", key)] += cnt
    for key, cnt in b_adds.items():
        theirs[("del", key)] += cnt
    union = mine | theirs
    if not union:
        return 0.0
    inter = mine & theirs
    return sum(inter.values()) / sum(union.values())
