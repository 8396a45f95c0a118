"""End-to-end acceptance suite.

Each test is one shipping criterion, checked at its stated tolerance and,
where a budget applies, under its stated wall-clock limit. The suite reuses
the shared fixtures (synthetic corpus, desk-scale training run) plus the
independent oracles from _support, so every claim here is checked against
either a brute-force recomputation or committed reference bytes.
"""

import os
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import backplane as bp
from _support import dense_jacobian, golden_sheets, make_random_net
from backplane.adjoint import EvaluationPoint, jvp, trace
from backplane.adversarial import AdversarialConfig, untargeted_attack
from backplane.cli import main
from backplane.reconstruct import conv_geometry, rm0, rm1, rm2, rm3, rm4, surface_inventory
from backplane.render import render_sheet_to_files
from backplane.tensor import FP32_TINY
from backplane.verify import compare_hyperplanes, verify_layers

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "goldens")


def _normalized_gap(a, b):
    scale = max(float(np.max(np.abs(b))), FP32_TINY)
    return float(np.max(np.abs(a - b))) / scale


def test_01_replay_matches_forward_on_1000_random_nets():
    # criterion: 1000 random small nets, float64, |jvp(x) - logits| within
    # 1e-9 relative on every net, in under a minute
    start = time.perf_counter()
    rng = np.random.default_rng(2026)
    passed = 0
    for _ in range(1000):
        net = make_random_net(rng)
        x = rng.standard_normal(net.input_shape)
        tr = trace(net, x, EvaluationPoint())
        replayed = jvp(tr, net, x, net.fc_index())
        logits, _ = bp.forward(net, x)
        scale = max(1.0, float(np.max(np.abs(logits))))
        if float(np.max(np.abs(replayed - logits))) <= 1e-9 * scale:
            passed += 1
    elapsed = time.perf_counter() - start
    assert passed == 1000
    assert elapsed < 60.0, f"budget exceeded: {elapsed:.1f}s"


def test_02_unit_census_on_both_architectures(vgg7_net, fixup_net):
    # criterion: 100 random inputs per architecture, every tracked layer has
    # at least 99.99% of units within 1e-2 relative error, under ten minutes
    start = time.perf_counter()
    for net in (vgg7_net, fixup_net):
        rng = np.random.default_rng(11)
        inputs = [rng.standard_normal(net.input_shape).astype(np.float32) for _ in range(100)]
        report = verify_layers(net, inputs, EvaluationPoint(), rng=np.random.default_rng(0))
        assert report.inputs == 100
        assert report.worst_fraction(1e-2) >= 0.9999, f"{net.arch}: {report.worst_fraction(1e-2)}"
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"budget exceeded: {elapsed:.1f}s"


def test_03_lattice_sums_collapse_across_modes(vgg7_net, fixup_net):
    # criterion: summing fine surfaces reproduces the coarser mode exactly,
    # to 1e-4 in float32 and 1e-10 in float64, under five minutes
    start = time.perf_counter()
    f64 = []
    for arch, scheme in (("vgg7", "he"), ("fixup_resnet20", "residual")):
        net = bp.ARCHITECTURES[arch][1](dtype=np.float64)
        bp.init_weights(net, np.random.default_rng(0), scheme)
        f64.append(net)
    cases = [(vgg7_net, 4, 1e-4), (fixup_net, 13, 1e-4), (f64[0], 4, 1e-10), (f64[1], 13, 1e-10)]
    for net, ordinal, tol in cases:
        x = np.random.default_rng(5).standard_normal(net.input_shape).astype(net.dtype)
        tr = trace(net, x, EvaluationPoint())
        _, strides, cin, cout = conv_geometry(net, ordinal)
        s_pick, j_pick, i_pick = 12, 3, 7
        fine_over_s = sum(rm4(net, tr, ordinal, s, j_pick, i_pick).values.astype(np.float64) for s in range(strides))
        coarse_j = rm3(net, tr, ordinal, j_pick, i_pick).values.astype(np.float64)
        assert float(np.abs(coarse_j).max()) > 0.0
        assert _normalized_gap(fine_over_s, coarse_j) <= tol

        fine_over_j = sum(rm4(net, tr, ordinal, s_pick, j, i_pick).values.astype(np.float64) for j in range(cin))
        coarse_s = rm2(net, tr, ordinal, s_pick, i_pick).values.astype(np.float64)
        assert _normalized_gap(fine_over_j, coarse_s) <= tol

        js = sum(rm3(net, tr, ordinal, j, i_pick).values.astype(np.float64) for j in range(cin))
        unit = rm1(net, tr, ordinal, i_pick).values.astype(np.float64)
        assert _normalized_gap(js, unit) <= tol
    elapsed = time.perf_counter() - start
    assert elapsed < 300.0, f"budget exceeded: {elapsed:.1f}s"


def test_04_class_surfaces_match_the_dense_jacobian(tiny_net64):
    # criterion: mode rm0 equals the corresponding row of the full Jacobian,
    # built column by column from directional derivatives, to 1e-12 (float64)
    net = tiny_net64
    x = np.random.default_rng(3).standard_normal(net.input_shape)
    tr = trace(net, x, EvaluationPoint())
    jac = dense_jacobian(net, tr, net.fc_index())
    for k in range(net.class_count):
        surface = rm0(net, tr, k).values.reshape(-1)
        scale = max(1.0, float(np.max(np.abs(jac[k]))))
        assert float(np.max(np.abs(surface - jac[k]))) <= 1e-12 * scale


def test_05_gates_and_surfaces_are_scale_invariant(vgg7_net):
    # criterion: tracing at k in {1/8, 1, 3} leaves every recorded gate and
    # every reconstructed surface bit-identical (positive homogeneity)
    net = vgg7_net
    x = np.random.default_rng(28).standard_normal(net.input_shape).astype(np.float32)
    traces = [trace(net, x, EvaluationPoint(k=k)) for k in (0.125, 1.0, 3.0)]
    base = traces[0]
    for other in traces[1:]:
        assert base.gates.keys() == other.gates.keys()
        for idx in base.gates:
            assert_array_equal(base.gates[idx], other.gates[idx])
    for k in range(net.class_count):
        ref = rm0(net, base, k).values
        for other in traces[1:]:
            assert_array_equal(rm0(net, other, k).values, ref)
    ref3 = rm3(net, base, 1, 3, 7).values
    ref4 = rm4(net, base, 1, 100, 3, 7).values
    for other in traces[1:]:
        assert_array_equal(rm3(net, other, 1, 3, 7).values, ref3)
        assert_array_equal(rm4(net, other, 1, 100, 3, 7).values, ref4)


def test_06_fresh_readouts_track_logits_after_an_attack(desk_run, dataset):
    # criterion: on a trained net, attack an input, rebuild the class surfaces
    # at the perturbed point, and the surface readouts match the live logits
    # within 1e-2 per class with the class ranking preserved
    result, _ = desk_run
    net = result.net
    x = dataset.normalize(dataset.test_x[0].astype(net.dtype))
    label = int(np.argmax(bp.forward(net, x)[0]))
    record = untargeted_attack(net, x, label, AdversarialConfig(epsilon=0.04, steps=25))
    assert record.success, "attack failed to flip the prediction"
    comparison = compare_hyperplanes(net, x, x + record.values, EvaluationPoint())
    assert comparison.max_m2_deviation() <= 1e-2
    assert comparison.ranking_preserved()


def test_07_surface_inventory_matches_the_expected_counts(vgg7_net, fixup_net):
    # criterion: per-layer surface counts agree with the architecture tables
    # (stride count, in-channels, out-channels per reconstructed conv), fast
    start = time.perf_counter()
    tables = {
        "vgg7": [
            ("conv1", 1024, 32, 32),
            ("conv2", 256, 32, 64),
            ("conv3", 256, 64, 64),
            ("conv4", 64, 64, 96),
            ("conv5", 64, 96, 96),
        ],
        "fixup_resnet20": [("conv%d" % n, 1024, 32, 32) for n in range(1, 7)]
        + [("conv7", 256, 32, 64)]
        + [("conv%d" % n, 256, 64, 64) for n in range(8, 13)]
        + [("conv13", 64, 64, 96)]
        + [("conv%d" % n, 64, 96, 96) for n in range(14, 19)],
    }
    for net in (vgg7_net, fixup_net):
        shape = tuple(net.input_shape)
        expected = []
        for name, s, cin, cout in tables[net.arch]:
            expected += [
                (name, 4, s * cin * cout, shape),
                (name, 3, cin * cout, shape),
                (name, 2, s * cout, shape),
                (name, 1, cout, shape),
            ]
        expected.append(("fc", 0, 10, shape))
        assert surface_inventory(net) == expected
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"budget exceeded: {elapsed:.3f}s"


def test_08_reference_renders_are_byte_identical(tmp_path):
    # criterion: regenerating the committed sheets reproduces their PNG and
    # PPM bytes exactly on this platform
    for name, sheet in golden_sheets().items():
        png, ppm = render_sheet_to_files(sheet, str(tmp_path / name))
        for fresh, ext in ((png, ".png"), (ppm, ".ppm")):
            with open(os.path.join(GOLDEN_DIR, name + ext), "rb") as fh:
                golden = fh.read()
            with open(fresh, "rb") as fh:
                assert fh.read() == golden, f"{name}{ext} drifted"


def test_09_desk_scale_training_clears_the_accuracy_bar(desk_run):
    # criterion: the small training recipe beats 10% validation accuracy
    # (chance) within at most twenty epochs
    result, config = desk_run
    assert config.epochs <= 20
    assert result.best_val_acc > 0.10, f"best val acc {result.best_val_acc}"


def test_10_cli_reruns_are_byte_identical(tmp_path):
    # criterion: every artifact the command line writes (archives, reports,
    # renders) is reproduced bit for bit by a rerun with the same flags
    net = bp.build_tiny()
    bp.init_weights(net, np.random.default_rng(0))
    model = str(tmp_path / "tiny.abmp")
    bp.save_model(net, model)
    rounds = []
    for n in range(2):
        base = tmp_path / f"round{n}"
        rdir = base / "renders"
        adir = base / "adv"
        base.mkdir()
        assert main(["backmap", "--model", model, "--rm", "3", "--layer", "1",
                     "--out", str(base / "c1.abhs"), "--render-dir", str(rdir)]) == 0
        assert main(["verify", "--model", model, "--num-inputs", "3", "--out", str(base / "report.csv")]) == 0
        assert main(["adversarial", "--model", model, "--experiment", "b1",
                     "--epsilon", "0.1", "--steps", "25", "--out-dir", str(adir)]) == 0
        blobs = {}
        for root, _, files in os.walk(base):
            for f in files:
                path = os.path.join(root, f)
                with open(path, "rb") as fh:
                    blobs[os.path.relpath(path, base)] = fh.read()
        rounds.append(blobs)
    assert rounds[0].keys() == rounds[1].keys()
    for key in rounds[0]:
        assert rounds[0][key] == rounds[1][key], f"{key} differs between reruns"
