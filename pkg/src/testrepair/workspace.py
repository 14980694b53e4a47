"""Sandboxed view of a repository checkout plus a full-text / symbol index.

All file access resolves strictly inside the workspace root; the index is an
in-memory snapshot built once and shared read-only by the agent's search
tools. Mutation goes through ``write_file``/``delete_file`` and requires a
writable workspace.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

# Directories that never belong to the code under repair.
SKIP_DIRS = {".git", ".hg", ".svn", "__pycache__", ".pytest_cache", "node_modules"}

WINDOW_LINES = 50
WINDOW_BEFORE = 25  # lines shown before the target; 24 after (target included)

DEFAULT_SEARCH_CAP = 50


class PathEscapeError(ValueError):
    """A relative path resolved outside the workspace root."""


class NotUtf8Error(ValueError):
    """File content is not valid UTF-8; binary files are not readable."""


class LineOutOfRangeError(ValueError):
    """Requested line number does not exist in the file."""


class ReadOnlyWorkspaceError(PermissionError):
    """Mutation attempted on a workspace opened with writable=False."""


class Workspace:
    """A directory snapshot with confined file access.

    ``snapshot_id`` is a content hash over all text files, so two workspaces
    with identical trees share an id and any edit changes it.
    """

    def __init__(self, root: Path, writable: bool):
        self.root = root
        self.writable = writable
        self.snapshot_id = self._content_hash()

    def _content_hash(self) -> str:
        digest = hashlib.sha256()
        for rel in self.iter_text_files():
            digest.update(rel.encode("utf-8"))
            digest.update(b"\x00")
            digest.update((self.root / rel).read_bytes())
        return digest.hexdigest()[:16]

    def resolve(self, path: str) -> Path:
        """Resolve a workspace-relative path, rejecting escapes.

        Absolute inputs and ``..`` traversal that leave the root raise
        PathEscapeError; symlinks are resolved before the containment check.
        """
        candidate = Path(path)
        if candidate.is_absolute():
            resolved = candidate.resolve()
        else:
            resolved = (self.root / candidate).resolve()
        try:
            resolved.relative_to(self.root)
        except ValueError:
            raise PathEscapeError(f"path escapes workspace root: {path}")
        return resolved

    def relative(self, full: Path) -> str:
        return full.relative_to(self.root).as_posix()

    def read_file(self, path: str) -> str:
        """Return exact decoded file content; no newline normalization."""
        full = self.resolve(path)
        if not full.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        data = full.read_bytes()
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError:
            raise NotUtf8Error(f"not a UTF-8 text file: {path}")

    def write_file(self, path: str, content: str) -> None:
        if not self.writable:
            raise ReadOnlyWorkspaceError("workspace is read-only")
        full = self.resolve(path)
        full.parent.mkdir(parents=True, exist_ok=True)
        full.write_bytes(content.encode("utf-8"))

    def delete_file(self, path: str) -> None:
        if not self.writable:
            raise ReadOnlyWorkspaceError("workspace is read-only")
        full = self.resolve(path)
        if not full.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        full.unlink()

    def read_directory(self, path: str = ".") -> list[tuple[str, str]]:
        """List (name, kind) entries sorted by name; kind is 'file' or 'dir'."""
        full = self.resolve(path)
        if not full.exists():
            raise FileNotFoundError(f"no such directory: {path}")
        if not full.is_dir():
            raise NotADirectoryError(f"not a directory: {path}")
        entries = []
        for child in sorted(full.iterdir(), key=lambda p: p.name):
            entries.append((child.name, "dir" if child.is_dir() else "file"))
        return entries

    def find_file(self, file_name: str) -> list[str]:
        """All relative paths of files whose final component equals file_name."""
        hits = []
        for rel in self.iter_files():
            if rel.rsplit("/", 1)[-1] == file_name:
                hits.append(rel)
        return sorted(hits)

    def window_around_line(self, path: str, line: int) -> str:
        """Numbered snippet of at most 50 lines centered on ``line``."""
        content = self.read_file(path)
        lines = content.splitlines()
        if line < 1 or line > len(lines):
            raise LineOutOfRangeError(
                f"line {line} out of range for {path} ({len(lines)} lines)"
            )
        start = max(1, line - WINDOW_BEFORE)
        end = min(len(lines), line + (WINDOW_LINES - WINDOW_BEFORE - 1))
        return "\n".join(f"{n}: {lines[n - 1]}" for n in range(start, end + 1))

    def iter_files(self):
        """Yield relative paths (posix separators) of all regular files, sorted."""
        found = []
        for dirpath, dirnames, filenames in os.walk(self.root):
            dirnames[:] = sorted(d for d in dirnames if d not in SKIP_DIRS)
            for name in filenames:
                full = Path(dirpath) / name
                found.append(full.relative_to(self.root).as_posix())
        return sorted(found)

    def iter_text_files(self):
        """Relative paths of UTF-8 decodable files, sorted."""
        out = []
        for rel in self.iter_files():
            try:
                (self.root / rel).read_bytes().decode("utf-8")
            except UnicodeDecodeError:
                continue
            out.append(rel)
        return out

    def text_file_map(self) -> dict[str, str]:
        """Snapshot of every text file's content, used for patch deltas."""
        return {rel: self.read_file(rel) for rel in self.iter_text_files()}


def open_workspace(root: str | Path, writable: bool = False) -> Workspace:
    """Open a directory as a workspace; NotADirectoryError if root is missing."""
    path = Path(root).resolve()
    if not path.is_dir():
        raise NotADirectoryError(f"workspace root is not a directory: {root}")
    if not os.access(path, os.R_OK):
        raise PermissionError(f"workspace root not readable: {root}")
    return Workspace(path, writable)


@dataclass(frozen=True)
class SymbolEntry:
    """A class or method declaration located by pattern matching."""

    kind: str  # "class" | "method"
    name: str
    path: str
    line: int  # 1-based
    enclosing_class: str | None = None


# Declaration patterns, applied line by line. Pattern matching is deliberate:
# it is deterministic and language-extensible, and the agent only needs
# navigation-quality results, not AST-accurate resolution.
CLASS_PATTERNS = [
    re.compile(r"^\s*class\s+([A-Za-z_]\w*)"),
    re.compile(r"^\s*(?:public\s+|final\s+|abstract\s+|export\s+)*(?:struct|interface)\s+([A-Za-z_]\w*)"),
]
METHOD_PATTERNS = [
    re.compile(r"^\s*(?:async\s+)?def\s+([A-Za-z_]\w*)\s*\("),
    re.compile(r"^\s*(?:pub\s+)?(?:async\s+)?fn\s+([A-Za-z_]\w*)\s*\("),
    re.compile(r"^\s*(?:export\s+)?(?:async\s+)?function\s*\*?\s*([A-Za-z_$][\w$]*)\s*\("),
    # C-family definition with the opening brace on the same line.
    re.compile(r"^\s*(?:[\w:<>,&*~\[\]]+\s+)+([A-Za-z_]\w*)\s*\([^;{]*\)\s*(?:const\s*)?\{"),
]


def match_class_line(line: str) -> str | None:
    for pat in CLASS_PATTERNS:
        m = pat.match(line)
        if m:
            return m.group(1)
    return None


def match_method_line(line: str) -> str | None:
    for pat in METHOD_PATTERNS:
        m = pat.match(line)
        if m:
            return m.group(1)
    return None


def _indent_of(line: str) -> int:
    return len(line) - len(line.lstrip(" \t"))


def extract_symbols(path: str, lines: list[str]) -> list[SymbolEntry]:
    """Extract class/method entries from one file.

    Enclosing classes are tracked by indentation for Python files and by
    brace depth for everything else; both are heuristics, good enough for
    the search_method_in_class style of navigation.
    """
    entries: list[SymbolEntry] = []
    if path.endswith(".py"):
        stack: list[tuple[int, str]] = []  # (indent, class name)
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            indent = _indent_of(line)
            while stack and indent <= stack[-1][0]:
                stack.pop()
            cls = match_class_line(line)
            if cls is not None:
                entries.append(SymbolEntry("class", cls, path, lineno))
                stack.append((indent, cls))
                continue
            meth = match_method_line(line)
            if meth is not None:
                enclosing = stack[-1][1] if stack else None
                entries.append(SymbolEntry("method", meth, path, lineno, enclosing))
    else:
        # Brace tracking: a class owns methods declared while its brace is open.
        stack: list[tuple[int, str]] = []  # (depth at open, class name)
        depth = 0
        for lineno, line in enumerate(lines, start=1):
            cls = match_class_line(line)
            if cls is not None:
                entries.append(SymbolEntry("class", cls, path, lineno))
                stack.append((depth, cls))
            else:
                meth = match_method_line(line)
                if meth is not None:
                    enclosing = stack[-1][1] if stack else None
                    entries.append(SymbolEntry("method", meth, path, lineno, enclosing))
            depth += line.count("{") - line.count("}")
            while stack and depth <= stack[-1][0] and line.count("}"):
                stack.pop()
    return entries


@dataclass
class SearchHit:
    path: str
    line: int
    excerpt: str


class UnknownScopePathError(ValueError):
    """search scope names a path that is not in the index."""


@dataclass
class CodeIndex:
    """Immutable full-text + symbol index over a workspace snapshot.

    documents maps relative path to the file's lines; rebuilding on an
    unchanged tree yields an equal index.
    """

    documents: dict[str, list[str]] = field(default_factory=dict)
    symbols: list[SymbolEntry] = field(default_factory=list)
    skipped_binary: int = 0

    def search_code(
        self,
        query: str,
        scope: str | None = None,
        cap: int = DEFAULT_SEARCH_CAP,
    ) -> tuple[list[SearchHit], bool]:
        """Case-sensitive substring search over lines.

        Returns (hits, truncated); hits are sorted by (path, line) and capped.
        """
        if scope is not None and scope not in self.documents:
            raise UnknownScopePathError(f"path not in index: {scope}")
        paths = [scope] if scope is not None else sorted(self.documents)
        hits: list[SearchHit] = []
        truncated = False
        for path in paths:
            for lineno, line in enumerate(self.documents[path], start=1):
                if query in line:
                    if len(hits) >= cap:
                        truncated = True
                        return hits, truncated
                    hits.append(SearchHit(path, lineno, line))
        return hits, truncated

    def search_symbol(
        self,
        kind: str,
        name: str,
        path: str | None = None,
        enclosing_class: str | None = None,
    ) -> list[SymbolEntry]:
        """Exact-name symbol lookup filtered by kind and optional scope."""
        out = [
            s
            for s in self.symbols
            if s.kind == kind
            and s.name == name
            and (path is None or s.path == path)
            and (enclosing_class is None or s.enclosing_class == enclosing_class)
        ]
        return sorted(out, key=lambda s: (s.path, s.line))


def build_index(ws: Workspace) -> CodeIndex:
    """Index every text file in the workspace; binary files are skipped."""
    documents: dict[str, list[str]] = {}
    symbols: list[SymbolEntry] = []
    skipped = 0
    for rel in ws.iter_files():
        try:
            content = ws.read_file(rel)
        except NotUtf8Error:
            skipped += 1
            continue
        lines = content.splitlines()
        documents[rel] = lines
        symbols.extend(extract_symbols(rel, lines))
    symbols.sort(key=lambda s: (s.path, s.line, s.kind, s.name))
    return CodeIndex(documents=documents, symbols=symbols, skipped_binary=skipped)
