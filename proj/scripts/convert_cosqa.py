#!/usr/bin/env python3
"""Convert a CoSQA-style JSON file into search-eval inputs.

Best effort: expects a JSON array (or JSONL) of records with `doc` (the web
query), `code`, and an optional binary `label`; only label==1 records become
queries. Emits two files for `cl4d eval-search --queries ... --pool ...`.

Usage: convert_cosqa.py input.json queries.jsonl pool.jsonl
"""

import json
import sys


def load_records(path):
    with open(path, encoding="utf-8") as fin:
        text = fin.read().strip()
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def main() -> int:
    if len(sys.argv) != 4:
        print(__doc__, file=sys.stderr)
        return 2
    records = load_records(sys.argv[1])
    queries = 0
    with open(sys.argv[2], "w", encoding="utf-8") as fq, open(
            sys.argv[3], "w", encoding="utf-8") as fp:
        for i, rec in enumerate(records):
            code = rec.get("code", "")
            if not code.strip():
                continue
            code_id = str(rec.get("retrieval_idx", rec.get("idx", i)))
            fp.write(json.dumps({"id": code_id, "code": code},
                                ensure_ascii=False) + "\n")
            if int(rec.get("label", 1)) == 1 and rec.get("doc", "").strip():
                fq.write(json.dumps({"query": rec["doc"].strip(),
                                     "gold_id": code_id,
                                     "language": "python"},
                                    ensure_ascii=False) + "\n")
                queries += 1
    print(f"wrote {queries} queries", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
