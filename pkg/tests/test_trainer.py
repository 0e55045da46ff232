import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from ctxadapt.cam import init_cam
from ctxadapt.cbpl import CbplConfig, class_histogram
from ctxadapt.classifier import ClassPrototypes, classify
from ctxadapt.errors import DivergenceError, ParameterError
from ctxadapt.numeric import cosine_lr
from ctxadapt.synthetic import SynthConfig, generate_synthetic
from ctxadapt.trainer import (
    TrainConfig,
    adapt,
    adapt_base_to_new,
    infer,
    prepare_data,
    zero_init_loss,
)

REFERENCE = json.loads((Path(__file__).parent / "data" / "benchmark_reference.json").read_text())


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthConfig(num_classes=4, dim=16, n_per_class=40, seed=11))


def test_config_validation():
    with pytest.raises(TypeError):
        TrainConfig()
    with pytest.raises(ParameterError):
        TrainConfig(eta_max=0)
    with pytest.raises(ParameterError):
        TrainConfig(eta_max=1e-3, fusion=(1, -1, 0))
    cfg = TrainConfig(eta_max=1e-3, cbpl={"global_threshold": 0.6})
    assert cfg.cbpl == CbplConfig(0.6)
    assert cfg.to_dict()["fusion"] == [0.1, 0.5, 1.0]


def test_q_one_keeps_all(small):
    ds = prepare_data(small.features, small.prototypes, TrainConfig(eta_max=1e-3, cbpl=CbplConfig(0.75, 1.0)))
    assert len(ds) == len(small.labels)


def test_empty_class_warns():
    protos = ClassPrototypes(["a", "b", "c"], np.eye(3, dtype=np.float32))
    x = np.array([[1, 0.1, 0], [0.9, 0, 0.1], [0, 1, 0.2]], dtype=np.float32)
    with pytest.warns(UserWarning, match="c"):
        ds = prepare_data(x, protos, TrainConfig(eta_max=1e-3))
    assert ds.empty_classes == [2]


def test_benchmark_filter_matches_oracle(benchmark_set):
    ds = prepare_data(benchmark_set.features, benchmark_set.prototypes, TrainConfig(eta_max=2e-4))
    ref = REFERENCE["default_fusion"]
    assert len(ds) == ref["num_retained"]
    assert class_histogram(ds).tolist() == ref["class_histogram"]
    assert ds.thresholds == pytest.approx(ref["thresholds"], abs=1e-7)


def test_zero_epochs_returns_init(small):
    cfg = TrainConfig(eta_max=1e-3, epochs=0, seed=4)
    params, trace, ds = adapt(small.features, small.prototypes, cfg)
    fresh = init_cam(16, np.random.default_rng(4))
    assert len(trace) == 0
    assert all(a.tobytes() == b.tobytes() for a, b in zip(params.params(), fresh.params()))
    # untrained module: alpha * f + 0.5 * gamma * context_mean over the whole input
    x = small.features.astype(np.float64)
    closed = classify(0.1 * x + 0.5 * x.mean(axis=0), small.prototypes).labels
    np.testing.assert_array_equal(infer(params, small.features, small.prototypes, mode="batch").labels, closed)


def test_pure_clip_config_leaves_params_alone(small):
    cfg = TrainConfig(eta_max=1e-2, epochs=3, fusion=(1, 0, 0), weight_decay=0.0)
    params, trace, _ = adapt(small.features, small.prototypes, cfg)
    fresh = init_cam(16, np.random.default_rng(0))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(params.params(), fresh.params()))
    # same loss every epoch, up to the summation order of each shuffle
    assert trace.losses == pytest.approx([trace.losses[0]] * 3, rel=1e-6)


def test_initial_loss_matches_closed_form(small):
    cfg = TrainConfig(eta_max=1e-3, epochs=1, batch_size=10_000)
    ds = prepare_data(small.features, small.prototypes, cfg)
    _, trace, _ = adapt(small.features, small.prototypes, cfg, dataset=ds)
    expected = zero_init_loss(small.features[ds.indices], ds.labels, small.prototypes, 0.1, 1.0, cfg.tau)
    assert trace.initial_loss == pytest.approx(expected, abs=1e-5)


def test_initial_loss_first_batch(small):
    cfg = TrainConfig(eta_max=1e-3, epochs=1, batch_size=16, shuffle=False)
    ds = prepare_data(small.features, small.prototypes, cfg)
    _, trace, _ = adapt(small.features, small.prototypes, cfg, dataset=ds)
    rows = ds.indices[:16]
    expected = zero_init_loss(small.features[rows], ds.labels[:16], small.prototypes, 0.1, 1.0, cfg.tau)
    assert trace.initial_loss == pytest.approx(expected, abs=1e-5)


def test_learning_rate_trace(small):
    cfg = TrainConfig(eta_max=3e-3, epochs=5)
    _, trace, _ = adapt(small.features, small.prototypes, cfg)
    assert trace.learning_rates == [cosine_lr(e, 5, 3e-3) for e in range(5)]
    assert [e.epoch for e in trace.epochs] == [1, 2, 3, 4, 5]


def test_frozen_encoder_and_determinism(small):
    x = small.features.copy()
    emb = small.prototypes.embeddings.copy()
    cfg = TrainConfig(eta_max=1e-3, epochs=3, seed=9)
    a, ta, _ = adapt(small.features, small.prototypes, cfg, truth=small.labels)
    b, tb, _ = adapt(small.features, small.prototypes, cfg, truth=small.labels)
    assert small.features.tobytes() == x.tobytes()
    assert small.prototypes.embeddings.tobytes() == emb.tobytes()
    assert a.same_as(b)
    assert ta.to_dict() == tb.to_dict()
    assert all(e.train_accuracy is not None for e in ta.epochs)
    assert "seconds" not in ta.to_dict()["epochs"][0]
    assert "seconds" in ta.to_dict(timings=True)["epochs"][0]


def test_loss_decreases(small):
    _, trace, _ = adapt(small.features, small.prototypes, TrainConfig(eta_max=2e-4))
    assert trace.losses[-1] < trace.losses[0]


def test_divergence_raises_with_snapshot(small):
    with pytest.raises(DivergenceError) as err, warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        adapt(small.features, small.prototypes, TrainConfig(eta_max=1e38, epochs=3))
    assert err.value.params is not None
    assert all(np.isfinite(p).all() for p in err.value.params.params())


def test_frozen_mode_after_adapt(small):
    cfg = TrainConfig(eta_max=1e-3, epochs=2, infer_mode="frozen-prototype")
    params, _, ds = adapt(small.features, small.prototypes, cfg)
    assert params.mode == "frozen-prototype"
    np.testing.assert_allclose(params.frozen_mean, small.features[ds.indices].mean(axis=0), atol=1e-6)
    whole = infer(params, small.features, small.prototypes).labels
    np.testing.assert_array_equal(infer(params, small.features, small.prototypes, batch_size=7).labels, whole)


def test_float64_build(small):
    params, _, _ = adapt(small.features, small.prototypes, TrainConfig(eta_max=1e-3, epochs=1), dtype=np.float64)
    assert params.dtype == np.float64


@pytest.mark.parametrize("scheme", ["first-half", "swapped-parity", "accuracy-ranked"])
def test_base_to_new(small, scheme):
    res, params = adapt_base_to_new(
        small.features, small.labels, small.prototypes, TrainConfig(eta_max=2e-4, epochs=2), scheme
    )
    assert params.dim == 16
    assert 0 <= res.base_accuracy <= 1 and 0 <= res.new_accuracy <= 1
    a, b = res.base_accuracy, res.new_accuracy
    assert res.harmonic_mean == pytest.approx(0 if a + b == 0 else 2 * a * b / (a + b))


def test_infer_batch_size_one_matches_single_rows(small):
    params, _, _ = adapt(small.features, small.prototypes, TrainConfig(eta_max=1e-3, epochs=1))
    one = infer(params, small.features[:5], small.prototypes, batch_size=1)
    for i in range(5):
        single = infer(params, small.features[i:i + 1], small.prototypes)
        np.testing.assert_array_equal(one.logits[i], single.logits[0])
