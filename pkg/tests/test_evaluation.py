import random
import sys
import threading
import time
from pathlib import Path

import pytest

from swarmtune.evaluation import (
    CachedEvaluator,
    EvalRequest,
    EvalResponse,
    Evaluator,
    EvaluatorFailure,
    ExternalTrainerEvaluator,
    FitnessRecord,
    MalformedMessage,
    SurrogateParamTarget,
    SurrogateSeparable,
    TrainSpec,
    ZeroTestSet,
    accuracy,
    build_evaluator,
    decode_ready,
    decode_request,
    decode_response,
    derive_trainer_seed,
    encode_ready,
    encode_request,
    encode_response,
)
from swarmtune.shapes import ImageShape, parameter_count
from swarmtune.space import HyperparamVector, SearchSpace, baseline_vector

MNIST = ImageShape(28, 28, 1)
FAKE_TRAINER = Path(__file__).parent / "fake_trainer.py"


def fake_trainer_cmd(*extra: str) -> list[str]:
    return [sys.executable, str(FAKE_TRAINER), *extra]


def test_accuracy():
    assert accuracy(10000, 10000) == 1.0
    assert accuracy(0, 10000) == 0.0
    assert accuracy(9923, 10000) == 0.9923
    with pytest.raises(ZeroTestSet):
        accuracy(0, 0)
    with pytest.raises(ValueError):
        accuracy(11, 10)


def test_fitness_record_validates_range():
    with pytest.raises(ValueError):
        FitnessRecord(1.2, 0.0, "x", False, 1)
    with pytest.raises(ValueError):
        FitnessRecord(0.5, -1.0, "x", False, 1)


def test_train_spec_defaults_and_digest():
    spec = TrainSpec()
    assert (spec.epochs, spec.optimizer_name, spec.activation_name) == (10, "sgd", "relu")
    assert (spec.classifier_name, spec.loss_name) == ("softmax", "cross_entropy")
    assert spec.input_shape == MNIST
    assert TrainSpec().digest() == TrainSpec().digest()
    assert TrainSpec(epochs=1).digest() != spec.digest()
    with pytest.raises(ValueError):
        TrainSpec(dataset="imagenet")
    with pytest.raises(ValueError):
        TrainSpec(train_subset=0)


def test_param_target_surrogate():
    ev = SurrogateParamTarget(MNIST, 155606)
    rec = ev.evaluate(baseline_vector())
    assert rec.fitness == 1.0
    assert rec.param_count == 155606
    assert rec.eval_time == 0.0 and not rec.cached
    # a count of exactly twice the target scores 0.5
    half = SurrogateParamTarget(MNIST, 155606 // 2)
    assert half.evaluate(baseline_vector()).fitness == 0.5


def test_surrogates_reject_infeasible_vectors():
    bad = HyperparamVector.from_values((32, 12, 5, 1, 1, 2, 2, 64, 5, 5, 1, 1, 2, 2, 100, 10))
    for ev in (SurrogateParamTarget(MNIST, 155606), SurrogateSeparable(MNIST)):
        with pytest.raises(EvaluatorFailure):
            ev.evaluate(bad)


def test_separable_surrogate_peaks_at_target():
    ev = SurrogateSeparable(MNIST)
    assert ev.evaluate(baseline_vector()).fitness == 1.0
    off = HyperparamVector.from_values(baseline_vector().values()[:15] + (30,))
    assert ev.evaluate(off).fitness < 1.0
    # full-range deviation on one variable is strictly worse than any smaller one
    mid = HyperparamVector.from_values(baseline_vector().values()[:15] + (20,))
    assert ev.evaluate(off).fitness < ev.evaluate(mid).fitness < 1.0


def test_separable_surrogate_slice_argmax_is_target():
    ev = SurrogateSeparable(MNIST)
    base = baseline_vector().values()
    scores = {
        batch: ev.evaluate(HyperparamVector.from_values(base[:15] + (batch,))).fitness
        for batch in range(10, 31)
    }
    assert max(scores, key=scores.get) == baseline_vector().batch_size
    assert len(set(scores.values())) == len(scores)  # strictly single-peaked


def test_separable_surrogate_weights():
    with pytest.raises(ValueError):
        SurrogateSeparable(MNIST, weights=(1.0,) * 15)
    with pytest.raises(ValueError):
        SurrogateSeparable(MNIST, weights=(0.0,) + (1.0,) * 15)
    weighted = SurrogateSeparable(MNIST, weights=(0.01,) * 14 + (9.8, 0.2))
    assert weighted.evaluate(baseline_vector()).fitness == 1.0


def test_surrogates_are_pure():
    for ev in (SurrogateParamTarget(MNIST, 100_000), SurrogateSeparable(MNIST)):
        rng = random.Random(2)
        space = SearchSpace(MNIST)
        for _ in range(20):
            v = space.sample_vector(rng)
            assert ev.evaluate(v).fitness == ev.evaluate(v).fitness


def test_cache_hits_skip_inner_evaluator():
    inner = SurrogateParamTarget(MNIST, 155606)
    cached = CachedEvaluator(inner)
    first = cached.evaluate(baseline_vector())
    second = cached.evaluate(baseline_vector())
    assert inner.calls == 1 and cached.calls == 1
    assert not first.cached and second.cached
    assert first.fitness == second.fitness
    other = SearchSpace(MNIST).sample_vector(random.Random(1))
    cached.evaluate(other)
    assert inner.calls == 2


def test_cache_get_or_insert_is_atomic():
    class SlowEvaluator(Evaluator):
        id = "slow"

        def evaluate(self, v):
            self.calls += 1
            time.sleep(0.05)
            return FitnessRecord(0.5, 0.0, self.id, False, 1)

        def fingerprint(self):
            return "slow"

    cached = CachedEvaluator(SlowEvaluator())
    results = []
    threads = [
        threading.Thread(target=lambda: results.append(cached.evaluate(baseline_vector())))
        for _ in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cached.calls == 1
    assert sum(1 for r in results if not r.cached) == 1
    assert {r.fitness for r in results} == {0.5}


def test_request_codec_round_trip():
    req = EvalRequest(
        id=7,
        dataset="mnist",
        vector=baseline_vector().values(),
        epochs=1,
        lr=0.01,
        momentum=0.0,
        train_subset=2000,
        test_subset=1000,
        seed=42,
    )
    assert decode_request(encode_request(req)) == req
    req_none = EvalRequest(
        id=8, dataset="cifar10", vector=baseline_vector().values(), epochs=0,
        lr=0.01, momentum=0.9, train_subset=None, test_subset=None, seed=0,
    )
    assert decode_request(encode_request(req_none)) == req_none


def test_response_codec_round_trip():
    ok = EvalResponse(id=3, ok=True, accuracy=0.93, train_time_s=1.5, param_count=155606)
    assert decode_response(encode_response(ok)) == ok
    err = EvalResponse(id=4, ok=False, error="no dataset")
    assert decode_response(encode_response(err)) == err


@pytest.mark.parametrize(
    "line,reason_fragment",
    [
        ("not json", "not valid JSON"),
        ("[1,2]", "not a JSON object"),
        ('{"id":1,"ok":true,"train_time_s":1.0,"param_count":5}', "accuracy"),
        ('{"id":1,"ok":true,"accuracy":1.2,"train_time_s":1.0,"param_count":5}', "outside"),
        ('{"id":1,"ok":true,"accuracy":-0.1,"train_time_s":1.0,"param_count":5}', "outside"),
        ('{"id":1,"ok":true,"accuracy":0.5,"train_time_s":-1.0,"param_count":5}', "train_time_s"),
        ('{"id":-1,"ok":true,"accuracy":0.5,"train_time_s":1.0,"param_count":5}', "id"),
        ('{"id":1,"ok":false}', "error"),
        ('{"ok":true,"accuracy":0.5,"train_time_s":1.0,"param_count":5}', "id"),
    ],
)
def test_response_codec_rejects_malformed(line, reason_fragment):
    with pytest.raises(MalformedMessage) as exc:
        decode_response(line)
    assert reason_fragment in exc.value.reason


def test_request_codec_rejects_malformed():
    good = encode_request(
        EvalRequest(1, "mnist", baseline_vector().values(), 1, 0.01, 0.0, None, None, 7)
    )
    import json

    obj = json.loads(good)
    obj["vector"] = obj["vector"][:15]
    with pytest.raises(MalformedMessage):
        decode_request(json.dumps(obj))
    obj2 = json.loads(good)
    obj2["op"] = "train"
    with pytest.raises(MalformedMessage):
        decode_request(json.dumps(obj2))
    obj3 = json.loads(good)
    obj3["dataset"] = "svhn"
    with pytest.raises(MalformedMessage):
        decode_request(json.dumps(obj3))


def test_ready_codec():
    assert decode_ready(encode_ready()) == 1
    with pytest.raises(MalformedMessage):
        decode_ready('{"op":"evaluate"}')


def test_derive_trainer_seed_is_stable_and_spread():
    assert derive_trainer_seed(7, 1) == derive_trainer_seed(7, 1)
    seeds = {derive_trainer_seed(7, n) for n in range(1, 100)}
    assert len(seeds) == 99
    assert all(0 <= s < 2**63 for s in seeds)
    assert derive_trainer_seed(7, 1) != derive_trainer_seed(8, 1)


def test_external_evaluator_round_trip():
    spec = TrainSpec(dataset="mnist", epochs=1, train_subset=2000, test_subset=1000)
    with ExternalTrainerEvaluator(fake_trainer_cmd(), spec, run_seed=3) as ev:
        rec = ev.evaluate(baseline_vector())
        assert rec.fitness == 0.5
        assert rec.param_count == 155606
        assert rec.eval_time == pytest.approx(0.01)
        rec2 = ev.evaluate(baseline_vector())
        assert rec2.fitness == 0.5
        assert ev.calls == 2  # no cache at this layer


def test_external_evaluator_handles_100_sequential_requests():
    spec = TrainSpec(dataset="mnist", epochs=0)
    space = SearchSpace(MNIST)
    rng = random.Random(0)
    with ExternalTrainerEvaluator(fake_trainer_cmd(), spec) as ev:
        for _ in range(100):
            v = space.sample_vector(rng)
            rec = ev.evaluate(v)
            assert rec.param_count == parameter_count(v, MNIST, 10)
    assert ev.calls == 100


def test_external_evaluator_rejects_param_count_mismatch():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "bad-count"), spec) as ev:
        with pytest.raises(EvaluatorFailure, match="parameter-count mismatch"):
            ev.evaluate(baseline_vector())


def test_external_evaluator_propagates_trainer_errors():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "error"), spec) as ev:
        with pytest.raises(EvaluatorFailure, match="synthetic failure"):
            ev.evaluate(baseline_vector())


def test_external_evaluator_rejects_out_of_range_accuracy():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "malformed"), spec) as ev:
        with pytest.raises(EvaluatorFailure, match="malformed trainer response"):
            ev.evaluate(baseline_vector())


def test_external_evaluator_rejects_unmatched_ids():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "wrong-id"), spec) as ev:
        with pytest.raises(EvaluatorFailure, match="unmatched response id"):
            ev.evaluate(baseline_vector())


def test_external_evaluator_rejects_protocol_mismatch():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with pytest.raises(EvaluatorFailure, match="protocol"):
        ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "bad-ready"), spec)


def test_external_evaluator_handshake_timeout():
    spec = TrainSpec(dataset="mnist", epochs=0)
    with pytest.raises(EvaluatorFailure, match="handshake"):
        ExternalTrainerEvaluator(
            fake_trainer_cmd("--mode", "no-ready"), spec, startup_timeout=0.3
        )


def test_external_evaluator_times_out_with_one_retry():
    spec = TrainSpec(dataset="mnist", epochs=0)
    ev = ExternalTrainerEvaluator(fake_trainer_cmd("--mode", "hang"), spec, timeout=0.3)
    try:
        start = time.perf_counter()
        with pytest.raises(EvaluatorFailure, match="timed out twice"):
            ev.evaluate(baseline_vector())
        elapsed = time.perf_counter() - start
        assert elapsed >= 0.6  # two attempts of at least the timeout each
    finally:
        ev.close()


def test_build_evaluator_factory():
    spec = TrainSpec(dataset="mnist")
    ev = build_evaluator("surrogate:param_target", spec)
    assert ev.id == "surrogate:param_target(T=155606)"  # defaults to the reference count
    assert ev.evaluate(baseline_vector()).fitness == 1.0
    ev2 = build_evaluator("surrogate:separable", spec)
    assert ev2.evaluate(baseline_vector()).fitness == 1.0
    with pytest.raises(ValueError):
        build_evaluator("external", spec)
    with pytest.raises(ValueError):
        build_evaluator("surrogate:nope", spec)
