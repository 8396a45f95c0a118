"""Command-line front end: train, verify, backmap, adversarial.

Exit codes: 0 on success, 1 when a verification criterion fails, 2 for usage
or I/O errors. Every run is deterministic given its flags: seeds come from
--seed / --input-seed, artifacts carry no timestamps, and floats are written
with repr (shortest round-trip form).

A config file holds `key = value` lines mirroring the long flags (underscores
or dashes); explicit flags override it. The dataset directory falls back to
the BACKPLANE_DATA_DIR environment variable.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import adversarial as adv
from . import archive, render
from .adjoint import EvaluationPoint, trace
from .data import DataError, DatasetConfig, load_cifar10
from .network import ARCHITECTURES, ModelFormatError, build_vgg7, forward, init_weights, load_model, save_model
from .reconstruct import ReconstructionError, ReconstructionRequest, batch_reconstruct, conv_geometry, enumerate_indices, rm0, rm3
from .trainer import TrainConfig, TrainingDivergedError, train
from .verify import compare_hyperplanes, verify_layers

ENV_DATA_DIR = "BACKPLANE_DATA_DIR"
_DTYPES = {"binary32": np.float32, "binary64": np.float64}


def _parse_lr_drops(text: str):
    drops = []
    if text:
        for part in text.split(","):
            epoch, rate = part.split(":")
            drops.append((int(epoch), float(rate)))
    return tuple(drops)


def _parse_int_list(text):
    if text is None:
        return None
    return tuple(int(v) for v in text.split(","))


def _read_config_args(path):
    """key = value lines -> a flat flag list argparse can consume first."""
    args = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                flag = f"--{key.strip().replace('_', '-')}"
                value = value.strip()
                # On/off flags take no argument on the command line, so the
                # words true/false mark them in a file.
                if value.lower() == "true":
                    args.append(flag)
                elif value.lower() != "false":
                    args += [flag, value]
    except OSError as exc:
        raise DataError(f"cannot read config file: {exc}")
    return args


def _dump_config(args: argparse.Namespace, path) -> None:
    """Effective settings, one key = value per line.

    Booleans are written as true/false and unset (None) keys are omitted, so
    reading the file back reproduces this parse exactly.
    """
    skip = {"func", "command", "config", "dump_config"}
    with open(path, "w") as fh:
        for key in sorted(vars(args)):
            if key in skip:
                continue
            value = getattr(args, key)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key} = {value}\n")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--dump-config", help="write the effective settings to this path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="binary32")
    p.add_argument("--workers", type=int, default=1, help="vjp fan-out cap for sweeps")
    p.add_argument("--data", default=None, help=f"dataset directory (default ${ENV_DATA_DIR})")


def _data_dir(args) -> str | None:
    return args.data if args.data is not None else os.environ.get(ENV_DATA_DIR)


def _load_net(args):
    try:
        return load_model(args.model)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {exc}")


def _input_image(args, net):
    """Normalized-space input: a seeded draw or a test-set image."""
    if getattr(args, "input_index", None) is not None:
        data_dir = _data_dir(args)
        if data_dir is None:
            raise DataError("--input-index needs --data or $" + ENV_DATA_DIR)
        ds = load_cifar10(DatasetConfig(data_dir=data_dir, seed=args.seed), strict=False)
        x = ds.normalize(ds.test_x[args.input_index].astype(net.dtype))
        return x, int(ds.test_y[args.input_index])
    rng = np.random.default_rng(args.input_seed)
    x = rng.standard_normal(net.input_shape).astype(net.dtype)
    return x, None


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    dtype = _DTYPES[args.dtype]
    data_dir = _data_dir(args)
    if data_dir is None:
        raise DataError("train needs --data or $" + ENV_DATA_DIR)
    ds_config = DatasetConfig(data_dir=data_dir, val_count=args.val_count, seed=args.seed)
    dataset = load_cifar10(ds_config, strict=args.strict_counts)
    builder = ARCHITECTURES[args.arch][1]
    net = builder(dtype=dtype)
    scheme = "residual" if args.arch == "fixup_resnet20" else "he"
    init_weights(net, np.random.default_rng(args.seed), scheme)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_drops=_parse_lr_drops(args.lr_drops),
        l1=args.l1,
        subset=args.subset,
        val_subset=args.val_subset,
        val_every=args.val_every,
        seed=args.seed,
        augment=not args.no_augment,
    )
    result = train(net, dataset, config, model_path=args.model_out, log_path=args.log)
    print(f"trained {args.arch}: best val acc {result.best_val_acc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    net = _load_net(args)
    rng = np.random.default_rng(args.input_seed)
    if args.input_index is not None:
        inputs = [_input_image(args, net)[0]]
    else:
        inputs = [rng.standard_normal(net.input_shape).astype(net.dtype) for _ in range(args.num_inputs)]
    report = verify_layers(
        net,
        inputs,
        EvaluationPoint(k=args.z_scale),
        spot_units=args.spot_units,
        spot_inputs=args.spot_inputs,
        rng=np.random.default_rng(args.seed),
    )
    if args.out:
        report.to_csv(args.out)
    worst = report.worst_fraction(1e-2)
    spot = report.spot_max_abs_error()
    for name, stats in report.layers.items():
        print(f"{name}: {stats.units} units, frac|e|<=1e-2 {stats.fraction_below(1e-2):.6f}, max {stats.max_abs:.3e}")
    print(f"spot checks: {len(report.spot_checks)}, max |e| {spot:.3e}")
    if worst < args.floor or spot > 1e-2:
        print(f"FAIL: worst fraction {worst:.6f} (floor {args.floor}) spot max {spot:.3e}")
        return 1
    return 0


# ---------------------------------------------------------------------------
# backmap


def cmd_backmap(args) -> int:
    net = _load_net(args)
    x, _ = _input_image(args, net)
    point = EvaluationPoint(k=args.z_scale)
    tr = trace(net, x, point)
    request = ReconstructionRequest(
        mode=args.rm,
        layer=args.layer,
        s=_parse_int_list(args.s),
        j=_parse_int_list(args.j),
        i=_parse_int_list(args.i),
        k=_parse_int_list(args.k),
    )
    index = list(enumerate_indices(net, request))
    if not index:
        raise ReconstructionError("request selects no surfaces")
    header = archive.SurfaceArchiveHeader(
        mode=args.rm,
        layer=-1 if args.rm == 0 else args.layer,
        eval_k=point.k,
        dtype=net.dtype,
        surface_shape=tuple(net.input_shape),
        index=index,
    )
    writer = archive.SurfaceArchiveWriter(args.out, header, resume=args.resume)
    rendered = []
    with writer:
        stream = batch_reconstruct(net, tr, request, workers=args.workers, skip=writer.written)
        for surface in stream:
            writer.append(surface.values)
            if args.render_dir:
                rendered.append(surface)
    if args.render_dir:
        _render_request(net, request, rendered, args.render_dir)
    print(f"wrote {writer.written} surfaces to {args.out}")
    return 0


def _render_request(net, request, surfaces, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    spec = render.RenderSpec()
    layer_name = "fc" if request.mode == 0 else net.layers[net.conv_layer_indices()[request.layer]].name
    for surf in surfaces:
        img = render.quantize(render.normalize_surface(surf.values))
        name = render.surface_filename(net.arch, request.mode, layer_name, surf.s, surf.j, surf.i, surf.k)
        render.write_png(img, os.path.join(out_dir, name))
    values = [s.values for s in surfaces]
    sheet = None
    sheet_name = None
    if request.mode == 0 and request.k is None:
        sheet = render.class_grid(values, render.RenderSpec(border=1))
        sheet_name = render.surface_filename(net.arch, 0, layer_name + "_grid")
    elif request.mode == 3 and request.j is None and request.i is None:
        _, _, cin, cout = conv_geometry(net, request.layer)
        sheet = render.tile_channels(values, cin, cout, spec)
        sheet_name = render.surface_filename(net.arch, 3, layer_name + "_channels")
    elif request.mode == 4 and request.s is None and len(values) == conv_geometry(net, request.layer)[1]:
        sheet = render.tile_strides(values, spec)
        sheet_name = render.surface_filename(net.arch, 4, layer_name + "_strides", j=surfaces[0].j, i=surfaces[0].i)
    if sheet is not None:
        render.write_png(render.quantize(sheet), os.path.join(out_dir, sheet_name))


# ---------------------------------------------------------------------------
# adversarial


def _write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "provenance", "intended", "achieved", "beta", "l2", "success", "degenerate"])
        for n, r in enumerate(records):
            w.writerow([n, r.provenance, r.intended, r.achieved, repr(r.beta), repr(r.l2), int(r.success), int(r.degenerate)])


def _write_pca(path, records, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "provenance", "intended", "beta", "pc1", "pc2"])
        for n, (r, row) in enumerate(zip(records, scores)):
            w.writerow([n, r.provenance, r.intended, repr(r.beta), repr(float(row[0])), repr(float(row[1]))])


def cmd_adversarial(args) -> int:
    net = _load_net(args)
    x, true_label = _input_image(args, net)
    label = args.label if args.label is not None else true_label
    if label is None:
        label = int(np.argmax(forward(net, x)[0]))
    config = adv.AdversarialConfig(
        epsilon=args.epsilon,
        steps=args.steps,
        threshold=args.threshold,
        set_size=args.set_size,
        max_resample=args.max_resample,
        seed=args.seed,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    point = EvaluationPoint(k=args.z_scale)
    out = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    if args.experiment == "a":
        record = adv.untargeted_attack(net, x, label, config)
        if not record.success:
            print(f"untargeted attack did not flip the prediction in {config.steps} steps")
        x_pert = x + record.values
        comparison = compare_hyperplanes(net, x, x_pert, point)
        comparison.to_csv(out("comparison.csv"))
        archive.write_perturbations(out("perturbation.abps"), [record], net.input_shape, net.dtype)
        tr0 = trace(net, x, point)
        tr1 = trace(net, x_pert, point)
        class_diffs = [
            render.difference_image(rm0(net, tr1, k).values, rm0(net, tr0, k).values)
            for k in range(net.class_count)
        ]
        sheet = render.class_grid(class_diffs, render.RenderSpec(border=1))
        render.write_png(render.quantize(sheet), out(f"{net.arch}_rm0_fc_difference.png"))
        ordinal = 1 if len(net.conv_layer_indices()) > 1 else None
        if ordinal is not None:
            _, _, cin, cout = conv_geometry(net, ordinal)
            layer_name = net.layers[net.conv_layer_indices()[ordinal]].name
            diffs = [
                render.difference_image(
                    rm3(net, tr1, ordinal, j, i).values, rm3(net, tr0, ordinal, j, i).values
                )
                for j in range(cin)
                for i in range(cout)
            ]
            sheet = render.tile_channels(diffs, cin, cout)
            render.write_png(render.quantize(sheet), out(f"{net.arch}_rm3_{layer_name}_difference.png"))
        print(f"experiment a: success={record.success} achieved={record.achieved} l2={record.l2:.4f}")
        return 0
    sb1 = adv.build_sb1(net, x, label, config)
    if args.experiment == "b1":
        records = sb1.records
        archive.write_perturbations(out("sb1.abps"), records, net.input_shape, net.dtype)
        _write_manifest(out("sb1_manifest.csv"), records)
        tr_list = [trace(net, x + r.values, point) for r in records]
        surfaces = np.stack([rm0(net, t, label).values for t in tr_list])
        _write_pca(out("sb1_pca.csv"), records, adv.pca2(surfaces))
        print(f"experiment b1: {sum(r.success for r in records)}/{len(records)} targets reached")
        return 0
    sb2 = adv.build_sb2(net, x, label, sb1, config)
    records = sb2.records
    archive.write_perturbations(out("sb2.abps"), records, net.input_shape, net.dtype)
    _write_manifest(out("sb2_manifest.csv"), records)
    tr_list = [trace(net, x + r.values, point) for r in records]
    if tr_list:
        surfaces = np.stack([rm0(net, t, label).values for t in tr_list])
        _write_pca(out("sb2_pca.csv"), records, adv.pca2(surfaces))
    scaled = sum(1 for r in records if r.provenance == "scaled")
    print(
        f"experiment b2: {scaled} scaled (of {sb2.qualified_scaled} qualified), "
        f"{len(records) - scaled} gaussian, {sb2.gaussian_failures} gaussian failures"
    )
    return 0 if scaled == config.set_size and sb2.gaussian_failures == 0 else 1


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backplane",
        description="Reconstruct and probe input-space decision surfaces of bias-free convnets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on CIFAR-format binary data")
    _add_common(p)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="vgg7")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lr-drops", default="", help="epoch:rate[,epoch:rate...]")
    p.add_argument("--l1", type=float, default=1e-4)
    p.add_argument("--subset", type=int, default=5000, help="training examples (0 = all)")
    p.add_argument("--val-subset", type=int, default=0, help="validation examples per eval (0 = all)")
    p.add_argument("--val-every", type=int, default=2)
    p.add_argument("--val-count", type=int, default=5000, help="examples held out of the train files")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--strict-counts", action="store_true", help="require the canonical corpus sizes")
    p.add_argument("--model-out", required=True)
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="check reconstructed surfaces against the live net")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--num-inputs", type=int, default=10)
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--input-index", type=int, default=None, help="use this test-set image instead")
    p.add_argument("--z-scale", type=float, default=0.125)
    p.add_argument("--floor", type=float, default=0.9999, help="minimum fraction of |e| <= 1e-2 per layer")
    p.add_argument("--spot-units", type=int, default=2)
    p.add_argument("--spot-inputs", type=int, default=3)
    p.add_argument("--out", default=None, help="report CSV path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("backmap", help="sweep surfaces into an archive (and render sheets)")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--rm", type=int, choices=(0, 1, 2, 3, 4), required=True)
    p.add_argument("--layer", type=int, default=None, help="conv ordinal (>= 1) for modes 1-4")
    p.add_argument("--s", default=None, help="stride offsets, comma-separated")
    p.add_argument("--j", default=None, help="in-channels, comma-separated")
    p.add_argument("--i", default=None, help="out-channels, comma-separated")
    p.add_argument("--k", default=None, help="classes, comma-separated (mode 0)")
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--input-index", type=int, default=None)
    p.add_argument("--z-scale", type=float, default=0.125)
    p.add_argument("--out", required=True, help="surface archive path")
    p.add_argument("--render-dir", default=None)
    p.add_argument("--resume", action="store_true", help="continue an interrupted sweep")
    p.set_defaults(func=cmd_backmap)

    p = sub.add_parser("adversarial", help="attack an input and compare surface readouts")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--experiment", choices=("a", "b1", "b2"), required=True)
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--input-index", type=int, default=None)
    p.add_argument("--label", type=int, default=None, help="true class (default: dataset label or model prediction)")
    p.add_argument("--epsilon", type=float, default=0.04)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--set-size", type=int, default=50)
    p.add_argument("--max-resample", type=int, default=100)
    p.add_argument("--z-scale", type=float, default=0.125)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_adversarial)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # A config file contributes defaults: parse it first, then let the real
    # argv override. The subcommand must come from the real argv.
    if "--config" in argv:
        at = argv.index("--config")
        try:
            path = argv[at + 1]
        except IndexError:
            parser.error("--config needs a path")
        try:
            injected = _read_config_args(path)
        except (DataError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        argv = argv[:1] + injected + argv[1:]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.dump_config:
            _dump_config(args, args.dump_config)
        return args.func(args)
    except (DataError, ModelFormatError, ReconstructionError, archive.ArchiveError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
