"""Rebuild the bundled training corpus from CPython standard-library docstrings.

The output is plain UTF-8 prose (PSF-licensed). Run with the interpreter whose
stdlib you want to harvest; the committed asset was built from CPython 3.10.
"""
import argparse
import ast
import pathlib
import sys
import sysconfig


def harvest(root: pathlib.Path, min_len: int = 120):
    files = sorted(list(root.glob("*.py")) + list(root.glob("*/*.py")))
    for path in files:
        if "test" in str(path.relative_to(root)):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > min_len:
                    yield doc.strip()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--stdlib", default=sysconfig.get_paths()["stdlib"])
    parser.add_argument("--max-bytes", type=int, default=1_000_000)
    parser.add_argument("--output", default="src/nmsparse/assets/corpus.txt")
    args = parser.parse_args(argv)

    out, size = [], 0
    for doc in harvest(pathlib.Path(args.stdlib)):
        text = doc.encode("ascii", "ignore").decode("ascii") + "\n\n"
        if size + len(text) > args.max_bytes:
            break
        out.append(text)
        size += len(text)
    pathlib.Path(args.output).write_text("".join(out), encoding="utf-8")
    print(f"wrote {size} bytes to {args.output}", file=sys.stderr)


if __name__ == "__main__":
    main()
