"""Fitness evaluation: surrogates, caching, and the external-trainer client.

Fitness is test-set accuracy in [0, 1].  Two deterministic surrogates make the
optimizer testable without any CNN training; the external evaluator talks to a
trainer worker over newline-delimited JSON on the worker's stdin/stdout and
cross-checks the worker's parameter count against the local shape calculus.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .shapes import ImageShape, parameter_count
from .space import (
    KERNEL_COUNT_CHOICES,
    NUM_VARIABLES,
    HyperparamVector,
    baseline_vector,
    validate,
)

__all__ = [
    "DATASETS",
    "PROTOCOL_VERSION",
    "CachedEvaluator",
    "DatasetSpec",
    "EvalRequest",
    "EvalResponse",
    "Evaluator",
    "EvaluatorFailure",
    "ExternalTrainerEvaluator",
    "FitnessRecord",
    "MalformedMessage",
    "SurrogateParamTarget",
    "SurrogateSeparable",
    "TrainSpec",
    "ZeroTestSet",
    "accuracy",
    "build_evaluator",
    "decode_ready",
    "decode_request",
    "decode_response",
    "derive_trainer_seed",
    "encode_ready",
    "encode_request",
    "encode_response",
]

PROTOCOL_VERSION = 1


class ZeroTestSet(ValueError):
    """Accuracy requested over an empty test set."""


class EvaluatorFailure(Exception):
    """An evaluation could not produce a fitness value.

    ``solution_index`` and ``generation`` are filled in by the optimizer loop
    when the failure aborts a run.
    """

    def __init__(self, message: str, *, solution_index: int | None = None, generation: int | None = None):
        super().__init__(message)
        self.solution_index = solution_index
        self.generation = generation


class MalformedMessage(Exception):
    """A protocol line that does not satisfy the wire schema."""

    def __init__(self, reason: str, line: str):
        self.reason = reason
        self.line = line
        super().__init__(f"{reason}: {line!r}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    shape: ImageShape
    num_classes: int
    train_size: int
    test_size: int


DATASETS: Mapping[str, DatasetSpec] = {
    "mnist": DatasetSpec("mnist", ImageShape(28, 28, 1), 10, 60000, 10000),
    "fashion_mnist": DatasetSpec("fashion_mnist", ImageShape(28, 28, 1), 10, 60000, 10000),
    "cifar10": DatasetSpec("cifar10", ImageShape(32, 32, 3), 10, 50000, 10000),
}


def accuracy(correct: int, total: int) -> float:
    """Fraction of correctly classified samples."""
    if total == 0:
        raise ZeroTestSet("test set is empty")
    if total < 0 or correct < 0 or correct > total:
        raise ValueError(f"need 0 <= correct <= total, got correct={correct}, total={total}")
    return correct / total


@dataclass(frozen=True)
class FitnessRecord:
    """Outcome of one evaluation of one vector."""

    fitness: float
    eval_time: float
    evaluator_id: str
    cached: bool
    param_count: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness must be in [0, 1], got {self.fitness}")
        if self.eval_time < 0:
            raise ValueError(f"eval_time must be >= 0, got {self.eval_time}")


@dataclass(frozen=True)
class TrainSpec:
    """Training-run parameters forwarded to the trainer worker.

    The defaults are the experimental settings: 10 epochs of SGD with
    cross-entropy loss, ReLU activations and a softmax classifier.  Learning
    rate and momentum are fixed by the protocol so both sides agree; the
    defaults below train the reference network to useful accuracy within a
    single epoch (plain lr=0.01 SGD does not).
    """

    dataset: str = "mnist"
    epochs: int = 10
    optimizer_name: str = "sgd"
    activation_name: str = "relu"
    classifier_name: str = "softmax"
    loss_name: str = "cross_entropy"
    learning_rate: float = 0.01
    momentum: float = 0.9
    train_subset: int | None = None
    test_subset: int | None = None
    num_classes: int = 10
    trainer_seed: int = 0

    def __post_init__(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {sorted(DATASETS)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("train_subset", "test_subset"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def input_shape(self) -> ImageShape:
        return DATASETS[self.dataset].shape

    def digest(self) -> str:
        payload = json.dumps(
            {
                "dataset": self.dataset,
                "epochs": self.epochs,
                "optimizer": self.optimizer_name,
                "activation": self.activation_name,
                "classifier": self.classifier_name,
                "loss": self.loss_name,
                "lr": self.learning_rate,
                "momentum": self.momentum,
                "train_subset": self.train_subset,
                "test_subset": self.test_subset,
                "num_classes": self.num_classes,
                "trainer_seed": self.trainer_seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def derive_trainer_seed(run_seed: int, ordinal: int) -> int:
    """Stable per-evaluation seed mixed from the run seed and eval ordinal."""
    digest = hashlib.sha256(f"{run_seed}:{ordinal}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


class Evaluator:
    """Evaluator contract: ``evaluate(vector) -> FitnessRecord``.

    ``calls`` counts actual underlying evaluations, so cache hits are
    observable as a constant counter.
    """

    id: str = "evaluator"

    def __init__(self) -> None:
        self.calls = 0

    def evaluate(self, v: HyperparamVector) -> FitnessRecord:
        raise NotImplementedError

    def fingerprint(self) -> str:
        """Digest of everything that determines this evaluator's fitness values."""
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self) -> "Evaluator":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def _require_feasible(v: HyperparamVector, input_shape: ImageShape) -> None:
    violations = validate(v, input_shape)
    if violations:
        raise EvaluatorFailure("infeasible vector: " + "; ".join(str(x) for x in violations))


class SurrogateParamTarget(Evaluator):
    """Deterministic fitness peaking at a target trainable-parameter total.

    Fitness is ``1 / (1 + |count - target| / target)``: exactly 1.0 when the
    vector's parameter count equals the target and strictly decreasing in the
    relative distance from it.
    """

    def __init__(self, input_shape: ImageShape, target_count: int, num_classes: int = 10):
        super().__init__()
        if target_count < 1:
            raise ValueError(f"target_count must be positive, got {target_count}")
        self.input_shape = input_shape
        self.target_count = target_count
        self.num_classes = num_classes
        self.id = f"surrogate:param_target(T={target_count})"

    def evaluate(self, v: HyperparamVector) -> FitnessRecord:
        _require_feasible(v, self.input_shape)
        self.calls += 1
        count = parameter_count(v, self.input_shape, self.num_classes)
        fitness = 1.0 / (1.0 + abs(count - self.target_count) / self.target_count)
        return FitnessRecord(fitness, 0.0, self.id, False, count)

    def fingerprint(self) -> str:
        return f"{self.id}@{self.input_shape}/{self.num_classes}"


class SurrogateSeparable(Evaluator):
    """Deterministic separable fitness with a unique, known maximizer.

    Each variable contributes a concave tent score ``1 - |v_j - t_j| / span_j``
    peaking at the target vector; the fitness is the weighted mean of the 16
    scores, so it is 1.0 exactly at the target and strictly lower anywhere
    else.  Spans are the widest deviations any feasible value can reach, which
    keeps every score in [0, 1].
    """

    def __init__(
        self,
        input_shape: ImageShape,
        target: HyperparamVector | None = None,
        weights: Sequence[float] | None = None,
    ):
        super().__init__()
        self.input_shape = input_shape
        self.target = target if target is not None else baseline_vector()
        if weights is None:
            weights = (1.0,) * NUM_VARIABLES
        weights = tuple(float(w) for w in weights)
        if len(weights) != NUM_VARIABLES or any(w <= 0 for w in weights):
            raise ValueError("weights must be 16 positive numbers")
        self.weights = weights
        self.id = "surrogate:separable"
        self._spans = self._deviation_spans()
        self._weight_total = sum(weights)

    def _deviation_spans(self) -> tuple[int, ...]:
        inp = self.input_shape
        extremes = {
            1: (min(KERNEL_COUNT_CHOICES), max(KERNEL_COUNT_CHOICES)),
            2: (2, min(11, inp.width_x)),
            3: (2, min(11, inp.height_y)),
            4: (1, 4),
            5: (1, 4),
            6: (1, max(1, inp.width_x - 1)),
            7: (1, max(1, inp.height_y - 1)),
            8: (min(KERNEL_COUNT_CHOICES), max(KERNEL_COUNT_CHOICES)),
            9: (1, max(1, inp.width_x - 1)),
            10: (1, max(1, inp.height_y - 1)),
            11: (1, 4),
            12: (1, 4),
            13: (1, max(1, inp.width_x - 1)),
            14: (1, max(1, inp.height_y - 1)),
            15: (50, 150),
            16: (10, 30),
        }
        spans = []
        for index in range(1, NUM_VARIABLES + 1):
            lo, hi = extremes[index]
            t = self.target.x(index)
            spans.append(max(t - lo, hi - t, 1))
        return tuple(spans)

    def evaluate(self, v: HyperparamVector) -> FitnessRecord:
        _require_feasible(v, self.input_shape)
        self.calls += 1
        total = 0.0
        for value, t, span, w in zip(v.values(), self.target.values(), self._spans, self.weights):
            total += w * (1.0 - abs(value - t) / span)
        fitness = total / self._weight_total
        count = parameter_count(v, self.input_shape)
        return FitnessRecord(fitness, 0.0, self.id, False, count)

    def fingerprint(self) -> str:
        return f"{self.id}@{self.input_shape}/t={self.target}/w={self.weights}"


class CachedEvaluator(Evaluator):
    """Memoizes an evaluator by (vector text, evaluator fingerprint).

    Get-or-insert is atomic: under concurrent use, only the first caller for a
    key invokes the inner evaluator and everyone else waits for its result.
    """

    def __init__(self, inner: Evaluator):
        super().__init__()
        self.inner = inner
        self.id = inner.id
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], concurrent.futures.Future] = {}

    @property
    def calls(self) -> int:  # type: ignore[override]
        return self.inner.calls

    @calls.setter
    def calls(self, value: int) -> None:
        pass  # counter lives on the inner evaluator

    def evaluate(self, v: HyperparamVector) -> FitnessRecord:
        key = (v.to_text(), self.inner.fingerprint())
        with self._lock:
            fut = self._entries.get(key)
            owner = fut is None
            if owner:
                fut = concurrent.futures.Future()
                self._entries[key] = fut
        if not owner:
            return replace(fut.result(), cached=True, eval_time=0.0)
        try:
            record = self.inner.evaluate(v)
        except BaseException as exc:
            fut.set_exception(exc)
            with self._lock:
                self._entries.pop(key, None)
            raise
        fut.set_result(record)
        return record

    def fingerprint(self) -> str:
        return self.inner.fingerprint()

    def close(self) -> None:
        self.inner.close()


# --- wire protocol -----------------------------------------------------------

_DATASET_NAMES = frozenset(DATASETS)


@dataclass(frozen=True)
class EvalRequest:
    id: int
    dataset: str
    vector: tuple[int, ...]
    epochs: int
    lr: float
    momentum: float
    train_subset: int | None
    test_subset: int | None
    seed: int
    optimizer: str = "sgd"
    activation: str = "relu"
    classifier: str = "softmax"
    loss: str = "cross_entropy"


@dataclass(frozen=True)
class EvalResponse:
    id: int
    ok: bool
    accuracy: float | None = None
    train_time_s: float | None = None
    param_count: int | None = None
    error: str | None = None


def encode_request(req: EvalRequest) -> str:
    return json.dumps(
        {
            "id": req.id,
            "op": "evaluate",
            "dataset": req.dataset,
            "vector": list(req.vector),
            "epochs": req.epochs,
            "optimizer": req.optimizer,
            "lr": req.lr,
            "momentum": req.momentum,
            "activation": req.activation,
            "classifier": req.classifier,
            "loss": req.loss,
            "train_subset": req.train_subset,
            "test_subset": req.test_subset,
            "seed": req.seed,
        },
        separators=(",", ":"),
    )


def _parse_json_line(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(f"not valid JSON ({exc.msg})", line) from exc
    if not isinstance(obj, dict):
        raise MalformedMessage("message is not a JSON object", line)
    return obj


def _require(obj: dict, key: str, line: str):
    if key not in obj:
        raise MalformedMessage(f"missing field {key!r}", line)
    return obj[key]


def _require_uint(obj: dict, key: str, line: str) -> int:
    value = _require(obj, key, line)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise MalformedMessage(f"field {key!r} must be a non-negative integer", line)
    return value


def decode_request(line: str) -> EvalRequest:
    obj = _parse_json_line(line)
    if _require(obj, "op", line) != "evaluate":
        raise MalformedMessage(f"unsupported op {obj.get('op')!r}", line)
    dataset = _require(obj, "dataset", line)
    if dataset not in _DATASET_NAMES:
        raise MalformedMessage(f"unknown dataset {dataset!r}", line)
    vector = _require(obj, "vector", line)
    if (
        not isinstance(vector, list)
        or len(vector) != NUM_VARIABLES
        or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in vector)
    ):
        raise MalformedMessage("field 'vector' must be 16 positive integers", line)
    epochs = _require_uint(obj, "epochs", line)
    subsets = {}
    for key in ("train_subset", "test_subset"):
        value = _require(obj, key, line)
        if value is not None and (not isinstance(value, int) or isinstance(value, bool) or value < 1):
            raise MalformedMessage(f"field {key!r} must be a positive integer or null", line)
        subsets[key] = value
    for key in ("lr", "momentum"):
        value = _require(obj, key, line)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise MalformedMessage(f"field {key!r} must be a number", line)
    return EvalRequest(
        id=_require_uint(obj, "id", line),
        dataset=dataset,
        vector=tuple(vector),
        epochs=epochs,
        lr=float(obj["lr"]),
        momentum=float(obj["momentum"]),
        train_subset=subsets["train_subset"],
        test_subset=subsets["test_subset"],
        seed=_require_uint(obj, "seed", line),
        optimizer=str(_require(obj, "optimizer", line)),
        activation=str(_require(obj, "activation", line)),
        classifier=str(_require(obj, "classifier", line)),
        loss=str(_require(obj, "loss", line)),
    )


def encode_response(resp: EvalResponse) -> str:
    if resp.ok:
        payload = {
            "id": resp.id,
            "ok": True,
            "accuracy": resp.accuracy,
            "train_time_s": resp.train_time_s,
            "param_count": resp.param_count,
        }
    else:
        payload = {"id": resp.id, "ok": False, "error": resp.error or "unknown error"}
    return json.dumps(payload, separators=(",", ":"))


def decode_response(line: str) -> EvalResponse:
    obj = _parse_json_line(line)
    rid = _require_uint(obj, "id", line)
    ok = _require(obj, "ok", line)
    if not isinstance(ok, bool):
        raise MalformedMessage("field 'ok' must be a boolean", line)
    if not ok:
        error = _require(obj, "error", line)
        if not isinstance(error, str):
            raise MalformedMessage("field 'error' must be a string", line)
        return EvalResponse(id=rid, ok=False, error=error)
    acc = _require(obj, "accuracy", line)
    if not isinstance(acc, (int, float)) or isinstance(acc, bool):
        raise MalformedMessage("field 'accuracy' must be a number", line)
    if not 0.0 <= float(acc) <= 1.0:
        raise MalformedMessage(f"accuracy {acc} outside [0, 1]", line)
    t = _require(obj, "train_time_s", line)
    if not isinstance(t, (int, float)) or isinstance(t, bool) or t < 0:
        raise MalformedMessage("field 'train_time_s' must be a non-negative number", line)
    return EvalResponse(
        id=rid,
        ok=True,
        accuracy=float(acc),
        train_time_s=float(t),
        param_count=_require_uint(obj, "param_count", line),
    )


def encode_ready() -> str:
    return json.dumps({"op": "ready", "protocol": PROTOCOL_VERSION}, separators=(",", ":"))


def decode_ready(line: str) -> int:
    obj = _parse_json_line(line)
    if _require(obj, "op", line) != "ready":
        raise MalformedMessage(f"expected ready message, got op {obj.get('op')!r}", line)
    return _require_uint(obj, "protocol", line)


class ExternalTrainerEvaluator(Evaluator):
    """Client for a trainer worker speaking the JSON-lines protocol.

    The worker is spawned once and fed one request per evaluation.  A timeout
    gets one retry against a freshly spawned worker, then the evaluation fails.
    Responses are matched strictly by request id, and the worker's reported
    parameter count must agree with the local shape calculus.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        spec: TrainSpec,
        *,
        run_seed: int = 0,
        timeout: float = 600.0,
        startup_timeout: float = 120.0,
    ):
        super().__init__()
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.spec = spec
        self.run_seed = run_seed
        self.timeout = timeout
        self.startup_timeout = startup_timeout
        self.id = "external:" + " ".join(self.command)
        self._ordinal = 0
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._spawn()

    def _spawn(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise EvaluatorFailure(f"could not start trainer worker: {exc}") from exc
        self._lines = queue.Queue()
        thread = threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True)
        thread.start()
        try:
            line = self._read_line(self.startup_timeout, "handshake")
            version = decode_ready(line)
        except (_Timeout, MalformedMessage) as exc:
            self.close()
            raise EvaluatorFailure(f"trainer handshake failed: {exc}") from exc
        if version != PROTOCOL_VERSION:
            self.close()
            raise EvaluatorFailure(f"trainer speaks protocol {version}, expected {PROTOCOL_VERSION}")

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)  # EOF marker

    def _read_line(self, timeout: float, what: str) -> str:
        assert self._lines is not None
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise _Timeout(f"trainer did not answer within {timeout:.0f}s ({what})")
        if line is None:
            raise EvaluatorFailure(f"trainer exited while waiting for {what}")
        return line.rstrip("\n")

    def _send(self, line: str) -> None:
        proc = self._proc
        if proc is None or proc.poll() is not None or proc.stdin is None:
            raise EvaluatorFailure("trainer worker is not running")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise EvaluatorFailure(f"could not write to trainer worker: {exc}") from exc

    def evaluate(self, v: HyperparamVector) -> FitnessRecord:
        _require_feasible(v, self.spec.input_shape)
        last_timeout: _Timeout | None = None
        for attempt in range(2):
            self._ordinal += 1
            request = EvalRequest(
                id=self._ordinal,
                dataset=self.spec.dataset,
                vector=v.values(),
                epochs=self.spec.epochs,
                lr=self.spec.learning_rate,
                momentum=self.spec.momentum,
                train_subset=self.spec.train_subset,
                test_subset=self.spec.test_subset,
                seed=derive_trainer_seed(self.run_seed, self._ordinal),
                optimizer=self.spec.optimizer_name,
                activation=self.spec.activation_name,
                classifier=self.spec.classifier_name,
                loss=self.spec.loss_name,
            )
            self.calls += 1
            self._send(encode_request(request))
            try:
                line = self._read_line(self.timeout, f"request {request.id}")
            except _Timeout as exc:
                last_timeout = exc
                self._restart()
                continue
            try:
                response = decode_response(line)
            except MalformedMessage as exc:
                raise EvaluatorFailure(f"malformed trainer response: {exc}") from exc
            if response.id != request.id:
                raise EvaluatorFailure(
                    f"unmatched response id {response.id} (expected {request.id})"
                )
            if not response.ok:
                raise EvaluatorFailure(f"trainer reported failure: {response.error}")
            expected = parameter_count(v, self.spec.input_shape, self.spec.num_classes)
            if response.param_count != expected:
                raise EvaluatorFailure(
                    f"parameter-count mismatch for {v}: trainer says {response.param_count}, "
                    f"shape calculus says {expected}"
                )
            assert response.accuracy is not None and response.train_time_s is not None
            return FitnessRecord(response.accuracy, response.train_time_s, self.id, False, expected)
        raise EvaluatorFailure(f"evaluation timed out twice: {last_timeout}")

    def _restart(self) -> None:
        self.close()
        self._spawn()

    def fingerprint(self) -> str:
        return f"{self.id}@{self.spec.digest()}"

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            return
        self._proc = None
        try:
            if proc.stdin is not None:
                proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait(timeout=5)


class _Timeout(Exception):
    pass


def build_evaluator(
    kind: str,
    spec: TrainSpec,
    *,
    target_params: int | None = None,
    trainer_command: str | Sequence[str] | None = None,
    run_seed: int = 0,
    timeout: float = 600.0,
) -> Evaluator:
    """Construct the evaluator named by ``kind``, wrapped in a cache.

    Kinds: ``surrogate:param_target``, ``surrogate:separable``, ``external``.
    """
    shape = spec.input_shape
    if kind == "surrogate:param_target":
        if target_params is None:
            target_params = parameter_count(baseline_vector(), shape, spec.num_classes)
        inner: Evaluator = SurrogateParamTarget(shape, target_params, spec.num_classes)
    elif kind == "surrogate:separable":
        inner = SurrogateSeparable(shape)
    elif kind == "external":
        if trainer_command is None:
            raise ValueError("external evaluator requires a trainer command")
        inner = ExternalTrainerEvaluator(
            trainer_command, spec, run_seed=run_seed, timeout=timeout
        )
    else:
        raise ValueError(f"unknown evaluator kind {kind!r}")
    return CachedEvaluator(inner)
