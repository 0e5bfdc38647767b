"""Sandbox probe: tries to escape and reports what happened.

Exits 1 when any attempted operation failed (as a component depending on
it would), 0 when every attempt succeeded.
"""
import argparse
import json
import os
import socket
import sys

p = argparse.ArgumentParser()
p.add_argument("--input", required=True)
p.add_argument("--output", required=True)
p.add_argument("--peek", action="append", default=[])
p.add_argument("--host", default="1.1.1.1")
args = p.parse_args()

results = {}


def attempt(name, fn):
    try:
        fn()
        results[name] = "ok"
    except Exception as exc:  # report every failure mode
        results[name] = f"{type(exc).__name__}: {exc}"
        print(f"probe {name}: {exc}", file=sys.stderr)


def connect():
    with socket.create_connection((args.host, 80), timeout=3):
        pass


def write_input():
    with open(os.path.join(args.input, "probe-was-here"), "w") as fh:
        fh.write("x")


attempt("network", connect)
attempt("write_input", write_input)
for i, path in enumerate(args.peek):
    attempt(f"read_outside_{i}", lambda path=path: os.listdir(path) or (_ for _ in ()).throw(FileNotFoundError(f"{path} is empty")))

with open(os.path.join(args.output, "probe.json"), "w") as fh:
    json.dump(results, fh, sort_keys=True)
sys.exit(0 if all(v == "ok" for v in results.values()) else 1)
