"""JSON-lines trainer worker.

Reads one evaluation request per stdin line, trains the encoded CNN with SGD
and cross-entropy on the requested dataset, and answers with the test-set
accuracy (fraction of correctly classified held-out images), the wall time
spent, and the model's trainable-parameter count.  Emits
``{"op": "ready", "protocol": 1}`` on start and never crashes on a bad
request: every per-request problem becomes an ``ok: false`` response.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np
import torch
from torch import nn

from .datasets import DATASET_SHAPES, DatasetMissing, load_dataset
from .model import InfeasibleArchitecture, build_model, count_parameters, trace_sizes

__all__ = ["main", "serve", "train_and_test"]

PROTOCOL_VERSION = 1

SUPPORTED = {
    "optimizer": "sgd",
    "activation": "relu",
    "classifier": "softmax",
    "loss": "cross_entropy",
}


class BadRequest(ValueError):
    pass


def _validate(req: dict) -> dict:
    if req.get("op") != "evaluate":
        raise BadRequest(f"unsupported op {req.get('op')!r}")
    dataset = req.get("dataset")
    if dataset not in DATASET_SHAPES:
        raise BadRequest(f"unknown dataset {dataset!r}")
    vector = req.get("vector")
    if (
        not isinstance(vector, list)
        or len(vector) != 16
        or not all(isinstance(v, int) and v >= 1 for v in vector)
    ):
        raise BadRequest("vector must be 16 positive integers")
    epochs = req.get("epochs")
    if not isinstance(epochs, int) or epochs < 0:
        raise BadRequest("epochs must be a non-negative integer")
    for key, expected in SUPPORTED.items():
        if req.get(key) != expected:
            raise BadRequest(f"unsupported {key} {req.get(key)!r} (only {expected!r})")
    for key in ("train_subset", "test_subset"):
        value = req.get(key)
        if value is not None and (not isinstance(value, int) or value < 1):
            raise BadRequest(f"{key} must be a positive integer or null")
    seed = req.get("seed")
    if not isinstance(seed, int) or seed < 0:
        raise BadRequest("seed must be a non-negative integer")
    for key in ("lr", "momentum"):
        if not isinstance(req.get(key), (int, float)):
            raise BadRequest(f"{key} must be a number")
    return req


def train_and_test(
    vector: list[int],
    data: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    *,
    epochs: int,
    lr: float,
    momentum: float,
    seed: int,
    train_subset: int | None = None,
    test_subset: int | None = None,
    pooling: str = "max",
    num_classes: int = 10,
    holdout: str = "test",
) -> tuple[float, int]:
    """Train the encoded network and return (held-out accuracy, parameter count).

    Subsets take the first N samples of the canonical order, so a given
    (dataset, subset, seed) triple always sees the same data.  With
    ``holdout="validation"`` the score is computed on the tail of the training
    set instead of the test set (the tail must not overlap the training
    subset), so the test data stays untouched during the search.
    """
    x_train, y_train, x_test, y_test = data
    if holdout == "validation":
        n_val = test_subset if test_subset is not None else min(10000, len(x_train) // 6)
        if n_val < 1 or n_val >= len(x_train):
            raise BadRequest("validation split does not fit the training set")
        x_test, y_test = x_train[-n_val:], y_train[-n_val:]
        x_train, y_train = x_train[:-n_val], y_train[:-n_val]
        if train_subset is not None and train_subset > len(x_train):
            raise BadRequest("train subset overlaps the validation split")
        test_subset = None
    elif holdout != "test":
        raise BadRequest(f"holdout must be 'test' or 'validation', got {holdout!r}")
    if train_subset is not None:
        x_train, y_train = x_train[:train_subset], y_train[:train_subset]
    if test_subset is not None:
        x_test, y_test = x_test[:test_subset], y_test[:test_subset]
    if len(x_test) == 0 or len(x_train) == 0:
        raise BadRequest("empty train or test split")

    torch.manual_seed(seed)
    height, width = x_train.shape[1], x_train.shape[2]
    channels = x_train.shape[3]
    model = build_model(vector, height, width, channels, num_classes, pooling)
    batch_size = vector[15]

    train_x = torch.from_numpy(x_train).permute(0, 3, 1, 2).contiguous()
    train_y = torch.from_numpy(y_train)
    test_x = torch.from_numpy(x_test).permute(0, 3, 1, 2).contiguous()
    test_y = torch.from_numpy(y_test)

    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    loss_fn = nn.CrossEntropyLoss()
    shuffle = torch.Generator().manual_seed(seed)

    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(train_x), generator=shuffle)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(train_x[idx]), train_y[idx])
            loss.backward()
            optimizer.step()

    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(test_x), 512):
            logits = model(test_x[start : start + 512])
            correct += int((logits.argmax(dim=1) == test_y[start : start + 512]).sum())
    return correct / len(test_x), count_parameters(model)


class Worker:
    def __init__(self, pooling: str = "max", data_dir: str | None = None, holdout: str = "test"):
        self.pooling = pooling
        self.data_dir = data_dir
        self.holdout = holdout
        self._cache: dict[str, tuple] = {}

    def _data(self, name: str):
        if name not in self._cache:
            self._cache[name] = load_dataset(name, self.data_dir)
        return self._cache[name]

    def handle(self, line: str) -> dict:
        rid = 0
        try:
            obj = json.loads(line)
            if isinstance(obj, dict) and isinstance(obj.get("id"), int):
                rid = obj["id"]
            else:
                raise BadRequest("request must be a JSON object with an integer id")
            req = _validate(obj)
            height, width, _ = DATASET_SHAPES[req["dataset"]]
            trace_sizes(req["vector"], height, width)  # reject before touching data
            started = time.perf_counter()
            accuracy, params = train_and_test(
                req["vector"],
                self._data(req["dataset"]),
                epochs=req["epochs"],
                lr=float(req["lr"]),
                momentum=float(req["momentum"]),
                seed=req["seed"],
                train_subset=req["train_subset"],
                test_subset=req["test_subset"],
                pooling=self.pooling,
                holdout=self.holdout,
            )
            return {
                "id": rid,
                "ok": True,
                "accuracy": accuracy,
                "train_time_s": time.perf_counter() - started,
                "param_count": params,
            }
        except (
            BadRequest,
            InfeasibleArchitecture,
            DatasetMissing,
            ValueError,
            RuntimeError,
            MemoryError,
            json.JSONDecodeError,
        ) as exc:
            return {"id": rid, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def serve(pooling: str = "max", data_dir: str | None = None, holdout: str = "test") -> None:
    # best effort; some ops have no deterministic CPU kernel
    torch.use_deterministic_algorithms(True, warn_only=True)
    worker = Worker(pooling, data_dir, holdout)
    print(json.dumps({"op": "ready", "protocol": PROTOCOL_VERSION}), flush=True)
    for line in sys.stdin:
        if not line.strip():
            continue
        print(json.dumps(worker.handle(line)), flush=True)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="swarmtune-trainer", description=__doc__)
    parser.add_argument(
        "--pooling",
        choices=["max", "avg"],
        default="max",
        help="pooling operator for both pooling layers",
    )
    parser.add_argument("--data-dir", help="override $SWARMTUNE_DATA_DIR")
    parser.add_argument(
        "--holdout",
        choices=["test", "validation"],
        default="test",
        help="score on the test set (default) or on a held-back slice of train",
    )
    parser.add_argument("--threads", type=int, help="torch CPU thread count")
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    serve(args.pooling, args.data_dir, args.holdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
