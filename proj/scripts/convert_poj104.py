#!/usr/bin/env python3
"""Convert a POJ-104-style directory tree into clone-eval items.

Best effort: expects one subdirectory per problem, each holding source
files; every file becomes one item labeled by its problem directory.

Usage: convert_poj104.py dataset_dir output.jsonl
"""

import json
import os
import sys


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    root, dst = sys.argv[1], sys.argv[2]
    count = 0
    with open(dst, "w", encoding="utf-8") as fout:
        for problem in sorted(os.listdir(root)):
            pdir = os.path.join(root, problem)
            if not os.path.isdir(pdir):
                continue
            for name in sorted(os.listdir(pdir)):
                path = os.path.join(pdir, name)
                if not os.path.isfile(path):
                    continue
                try:
                    with open(path, encoding="utf-8", errors="replace") as fin:
                        code = fin.read()
                except OSError as err:
                    print(f"skipping {path}: {err}", file=sys.stderr)
                    continue
                if not code.strip():
                    continue
                fout.write(json.dumps({"id": f"{problem}/{name}",
                                       "code": code,
                                       "label": problem},
                                      ensure_ascii=False) + "\n")
                count += 1
    print(f"wrote {count} items", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
