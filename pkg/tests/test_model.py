import dataclasses
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlcaps import tensor as T
from dlcaps.errors import ConfigurationError, UsageError
from dlcaps.gradcheck import MODEL_TOLERANCE, run_model_check, tiny_model_config
from dlcaps.model import (
    DecoderConfig,
    ModelConfig,
    OutputCapsules,
    build_model,
    class_probabilities,
    count_params,
    ensemble_predict,
    predict,
)
from dlcaps.nn import Dense
from dlcaps.run import load_run_config
from dlcaps.tensor import Tensor
from oracles import argmax_loop

PROBE = """
import sys, numpy as np
from dlcaps.gradcheck import tiny_model_config
from dlcaps.model import build_model
m = build_model(tiny_model_config())
x = np.random.default_rng(3).uniform(0, 1, (2, 8, 8, 1))
sys.stdout.write(m(x).V.data.tobytes().hex())
"""


@pytest.fixture(scope="module")
def tiny():
    return build_model(tiny_model_config())


def test_same_seed_bit_identical_parameters():
    a, b = build_model(tiny_model_config()), build_model(tiny_model_config())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build_model(dataclasses.replace(tiny_model_config(), seed=99))
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_parameter_names_unique(tiny):
    names = [n for n, _ in tiny.named_parameters()]
    assert len(names) == len(set(names))


def test_cifar_default_builds_inside_window():
    model = build_model(load_run_config("cifar10").model)
    assert 6_500_000 <= count_params(model) <= 7_100_000
    assert load_run_config("cifar10").model == ModelConfig()


def test_fmnist_config_has_fewer_parameters():
    fm = count_params(build_model(load_run_config("fmnist").model))
    cifar = count_params(build_model(load_run_config("cifar10").model))
    assert fm < cifar


def test_param_table_sums_to_total():
    model = build_model(ModelConfig())
    rows = model.param_table()
    assert sum(c for _, c in rows) == count_params(model)
    assert [n for n, _ in rows] == [
        "stem", "cell1", "cell2", "mlce.cell1", "mlce.cell2", "mlce.capssum1", "mlce.capssum2", "routing", "decoder"
    ]


def test_count_params_matches_per_layer_formulas():
    cfg = ModelConfig()
    table = dict(build_model(cfg).param_table())
    assert table["stem"] == 3 * 3 * 3 * 128 + 128

    def convcaps(cin, k, cout):
        return k * k * cin * cout + cout

    # cell1: 32x4 in, convcaps 3x3 trunk, 1x1 skip, all 32x4 out
    assert table["cell1"] == 3 * convcaps(128, 3, 128) + convcaps(128, 1, 128)
    # mlce cells: 3DR skip kernel maps one 8-dim capsule to 32x8
    assert table["mlce.cell1"] == 3 * convcaps(256, 3, 256) + (3 * 3 * 8 * 256 + 256)
    assert table["mlce.capssum1"] == 8 * 8 * (32 * 8 * 32 + 32)
    assert table["mlce.capssum2"] == 4 * 4 * (32 * 8 * 32 + 32)
    assert table["routing"] == 80 * 10 * 16 * 32


def test_count_params_single_dense(rng):
    assert count_params(Dense(10, 5, rng)) == 55


def test_cifar_forward_shapes():
    model = build_model(ModelConfig())
    out = model(np.random.default_rng(0).uniform(0, 1, (2, 64, 64, 3)))
    assert out.V.shape == (2, 10, 16) and out.lengths.shape == (2, 10)
    assert np.allclose(out.lengths.data, np.linalg.norm(out.V.data, axis=-1), atol=1e-6)
    assert np.all(out.lengths.data < 1) and np.all(out.lengths.data >= 0)
    assert model.decode(out, predict(out)).shape == (2, 64, 64, 3)


def test_fmnist_decoder_shape():
    model = build_model(load_run_config("fmnist").model)
    out = model(np.zeros((1, 28, 28, 1)))
    assert model.decode(out, [3]).shape == (1, 28, 28, 1)


def test_zero_input_gives_near_zero_lengths(tiny):
    out = tiny(np.zeros((2, 8, 8, 1)))
    assert np.all(out.lengths.data < 1e-6)


def test_forward_wrong_shape_is_usage_error(tiny):
    with pytest.raises(UsageError, match="8, 8, 1"):
        tiny(np.zeros((2, 9, 9, 1)))


def test_forward_deterministic_across_processes():
    runs = [
        subprocess.run([sys.executable, "-c", PROBE], capture_output=True, text=True, check=True).stdout
        for _ in range(2)
    ]
    assert runs[0] and runs[0] == runs[1]


def test_inter_layer_mismatch_names_both_layers():
    cfg = tiny_model_config()
    cfg.mlce.capssum1.in_types = 7
    with pytest.raises(ConfigurationError, match="cell2.*mlce"):
        build_model(cfg)


def test_decoder_seed_mismatch_names_layers():
    cfg = dataclasses.replace(tiny_model_config(), decoder=DecoderConfig(seed_size=2, seed_channels=2, strides=(2, 2, 2), filters=(2, 2)))
    with pytest.raises(ConfigurationError, match="routing.*decoder"):
        build_model(cfg)


def test_num_classes_must_be_at_least_two():
    with pytest.raises(ConfigurationError):
        dataclasses.replace(tiny_model_config(), num_classes=1)


# ---- decoder ---------------------------------------------------------------------------


def test_decoder_discards_non_selected_capsules(tiny, rng):
    out = tiny(rng.uniform(0, 1, (3, 8, 8, 1)))
    idx = np.array([0, 1, 0])
    base = tiny.decode(out, idx).data
    V = out.V.data.copy()
    V[np.arange(3), 1 - idx] += rng.standard_normal((3, 4)) * 5
    perturbed = OutputCapsules(Tensor(V), out.lengths)
    assert tiny.decode(perturbed, idx).data.tobytes() == base.tobytes()


def test_decoder_weights_shared_across_classes(tiny, rng):
    out = tiny(rng.uniform(0, 1, (1, 8, 8, 1)))
    before = {n for n, _ in tiny.decoder.named_parameters()}
    r0, r1 = tiny.decode(out, 0), tiny.decode(out, 1)
    assert {n for n, _ in tiny.decoder.named_parameters()} == before
    V = out.V.data.copy()
    V[0, 0] = V[0, 1]
    same = OutputCapsules(Tensor(V), out.lengths)
    assert np.array_equal(tiny.decode(same, 0).data, r1.data)
    assert not np.array_equal(r0.data, r1.data)


def test_zero_capsule_linear_decoder_gives_zero_image():
    cfg = tiny_model_config()
    cfg.decoder.output_activation = "linear"
    model = build_model(cfg)
    zero = OutputCapsules(Tensor(np.zeros((2, 2, 4))), Tensor(np.zeros((2, 2))))
    assert np.array_equal(model.decode(zero, [0, 1]).data, np.zeros((2, 8, 8, 1)))


def test_zero_capsule_sigmoid_decoder_gives_half_grey(tiny):
    zero = OutputCapsules(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2))))
    assert np.allclose(tiny.decode(zero, 0).data, 0.5)


def test_decode_invalid_index(tiny):
    out = tiny(np.zeros((1, 8, 8, 1)))
    with pytest.raises(UsageError):
        tiny.decode(out, 2)
    with pytest.raises(UsageError):
        tiny.decode(out, -1)


# ---- predict, ensembles ----------------------------------------------------------------


def test_predict_examples():
    assert predict(np.array([[0.1, 0.9, 0.2]]))[0] == 1
    assert predict(np.full((1, 4), 0.3))[0] == 0


# float32-representable values square exactly in float64, so no new ties appear
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)), elements=st.floats(0, 0.5, width=32)))
def test_predict_matches_loop_and_monotone_transform(lengths):
    ref = [argmax_loop(row) for row in lengths]
    assert list(predict(lengths)) == ref
    assert list(predict(lengths**2)) == ref


def test_ensemble_identical_members_equal_single(rng):
    probs = class_probabilities(rng.uniform(0, 1, (20, 10)))
    assert np.array_equal(ensemble_predict([probs] * 7), predict(probs))


def test_ensemble_tie_goes_to_lowest_index():
    assert ensemble_predict([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])[0] == 0


def test_ensemble_matches_mean_argmax_loop(rng):
    members = [class_probabilities(rng.uniform(0, 1, (15, 6))) for _ in range(7)]
    got = ensemble_predict(members)
    for i in range(15):
        mean = [sum(m[i, k] for m in members) / 7 for k in range(6)]
        assert got[i] == argmax_loop(mean)


def test_ensemble_errors():
    with pytest.raises(UsageError):
        ensemble_predict([])
    with pytest.raises(UsageError):
        ensemble_predict([np.zeros((2, 3)), np.zeros((2, 4))])


def test_class_probabilities_rows_sum_to_one(rng):
    p = class_probabilities(rng.uniform(0, 1, (5, 10)))
    assert np.allclose(p.sum(1), 1.0, atol=1e-6)


# ---- whole-model gradient check -------------------------------------------------------


def test_tiny_model_gradient_check():
    result = run_model_check(coords_per_param=6)
    assert result.error < MODEL_TOLERANCE, result.name


def test_tiny_config_limits():
    cfg = tiny_model_config()
    assert cfg.input_shape == (8, 8, 1) and cfg.num_classes == 2
    widths = [cfg.stem.filters, cfg.final_dim, cfg.mlce.capssum1.out_dim, cfg.mlce.capssum2.out_dim]
    for cell in (cfg.cell1, cfg.cell2, cfg.mlce.cell1, cfg.mlce.cell2):
        for conv in (cell.conv1, cell.conv2, cell.conv3):
            widths += [conv.num_vectors, conv.capsule_dim]
    assert max(widths) <= 4
