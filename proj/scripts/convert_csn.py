#!/usr/bin/env python3
"""Convert CodeSearchNet-style JSONL into the pair schema used here.

Best effort: expects one JSON object per line with at least `language`,
`docstring`, `code` (or `function`), and optionally `repo`, `path`,
`func_name`. The query is the first non-empty docstring line; the docstring
text, when it appears verbatim inside the code, is removed so the query is
not leaked into the code side. Records without a usable query are dropped.

Usage: convert_csn.py input.jsonl[.gz] output.jsonl
"""

import gzip
import hashlib
import json
import sys

LANGUAGES = {"python", "java", "go", "php", "javascript", "ruby"}


def pair_id(language: str, query: str, code: str) -> str:
    h = hashlib.sha256()
    h.update(language.encode())
    h.update(b"\x00")
    h.update(query.encode())
    h.update(b"\x00")
    h.update(code.encode())
    return h.hexdigest()


def first_line(docstring: str):
    for line in docstring.splitlines():
        line = line.strip().strip("\"'")
        for sigil in ("#", "//", "/*", "*/"):
            if line.startswith(sigil):
                line = line[len(sigil):].strip()
        if line.endswith("*/"):
            line = line[:-2].strip()
        if line:
            return line
    return None


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    src, dst = sys.argv[1], sys.argv[2]
    opener = gzip.open if src.endswith(".gz") else open
    kept = dropped = 0
    with opener(src, "rt", encoding="utf-8") as fin, open(dst, "w", encoding="utf-8") as fout:
        for line in fin:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            language = rec.get("language", "").lower()
            docstring = rec.get("docstring", "") or ""
            code = rec.get("code") or rec.get("function") or ""
            query = first_line(docstring)
            if language not in LANGUAGES or not query or not code.strip():
                dropped += 1
                continue
            if docstring and docstring in code:
                code = code.replace(docstring, "", 1)
            pair = {
                "id": pair_id(language, query, code),
                "language": language,
                "query": query,
                "code": code,
                "meta": {
                    "name": rec.get("func_name", ""),
                    "path": rec.get("path", ""),
                    "repo": rec.get("repo", ""),
                },
            }
            fout.write(json.dumps(pair, ensure_ascii=False) + "\n")
            kept += 1
    print(f"kept {kept}, dropped {dropped}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
