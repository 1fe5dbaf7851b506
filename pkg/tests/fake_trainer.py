"""Scriptable stand-in for the trainer worker, used by the client tests.

Speaks the JSON-lines protocol on stdin/stdout.  ``--mode`` selects a
behaviour: ok (well-formed responses), bad-count (off-by-one parameter
count), error (ok:false), malformed (accuracy out of range), wrong-id,
hang (never answers), bad-ready (wrong protocol version).
"""

import argparse
import json
import sys
import time


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", default="ok")
    parser.add_argument("--accuracy", type=float, default=0.5)
    args = parser.parse_args()

    if args.mode == "no-ready":
        time.sleep(3600)
    protocol = 99 if args.mode == "bad-ready" else 1
    print(json.dumps({"op": "ready", "protocol": protocol}), flush=True)

    for line in sys.stdin:
        req = json.loads(line)
        if args.mode == "hang":
            time.sleep(3600)
        if args.mode == "malformed":
            print(json.dumps({"id": req["id"], "ok": True, "accuracy": 1.2,
                              "train_time_s": 0.0, "param_count": 1}), flush=True)
            continue
        if args.mode == "error":
            print(json.dumps({"id": req["id"], "ok": False, "error": "synthetic failure"}), flush=True)
            continue

        from swarmtune.shapes import parameter_count
        from swarmtune.space import HyperparamVector

        from swarmtune.evaluation import DATASETS

        vector = HyperparamVector.from_values(req["vector"])
        shape = DATASETS[req["dataset"]].shape
        count = parameter_count(vector, shape, 10)
        if args.mode == "bad-count":
            count += 1
        rid = req["id"] + 1000 if args.mode == "wrong-id" else req["id"]
        print(
            json.dumps(
                {
                    "id": rid,
                    "ok": True,
                    "accuracy": args.accuracy,
                    "train_time_s": 0.01,
                    "param_count": count,
                }
            ),
            flush=True,
        )


if __name__ == "__main__":
    main()
