"""Command line entry points: node roles, benchmarks, plotting, training."""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from pathlib import Path

from . import bench, kws, nn
from .filtering import PolicyEngine, load_policy_file
from .nodes import CloudConfig, CloudNode, DeviceConfig, DeviceError, FogConfig, FogNode, run_device


def _hostport(text):
    host, _, port = text.rpartition(":")
    if not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _install_stop_handler(stop_event):
    def handler(signum, frame):
        stop_event.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)


def _load_dataset(spec, classes, per_class, seed):
    if spec == "synth":
        return kws.synth_dataset(n_classes=classes, n_per_class=per_class, seed=seed)
    return kws.load_speech_commands(spec)


def cmd_node(args):
    stop = threading.Event()
    _install_stop_handler(stop)
    if args.role == "device":
        if args.upstream is None:
            print("device role needs --upstream", file=sys.stderr)
            return 2
        payloads = []
        if args.audio_clips:
            import random

            rng = random.Random(args.patient)
            payloads = [rng.randbytes(args.audio_bytes) for _ in range(args.audio_clips)]
        config = DeviceConfig(
            upstream=args.upstream,
            patient=args.patient,
            period_ms=args.period_ms,
            duration_s=args.duration_s,
            chunk_size=args.chunk_size,
            audio_payloads=payloads,
            link_delay_ms=args.link_delay_ms,
        )
        try:
            metrics = run_device(config, stop)
        except DeviceError as exc:
            print(f"device failed: {exc}", file=sys.stderr)
            return 1
        for line in metrics.dump_lines():
            print(line)
        return 0

    if args.role == "fog":
        if args.upstream is None or args.model is None:
            print("fog role needs --upstream and --model", file=sys.stderr)
            return 2
        model, labels = nn.load_model(args.model)
        engine = PolicyEngine(load_policy_file(args.policy)) if args.policy else PolicyEngine()
        host, port = args.listen
        node = FogNode(
            FogConfig(
                host=host,
                port=port,
                upstream=args.upstream,
                service_time_ms=args.service_time_ms,
                device_link_delay_ms=args.link_delay_ms,
                backhaul_delay_ms=args.link_delay_ms,
                policy_engine=engine,
                classifier=(model, labels or [str(i) for i in range(model.n_classes)]),
            )
        ).start()
    else:
        engine = PolicyEngine(load_policy_file(args.policy)) if args.policy else None
        classifier = None
        if args.model:
            model, labels = nn.load_model(args.model)
            classifier = (model, labels or [str(i) for i in range(model.n_classes)])
        host, port = args.listen
        node = CloudNode(
            CloudConfig(
                host=host,
                port=port,
                fog_fronted=args.fog_fronted,
                service_time_ms=args.service_time_ms,
                link_delay_ms=args.link_delay_ms,
                policy_engine=engine,
                classifier=classifier,
            )
        ).start()
    print(f"{args.role} listening on {node.address[0]}:{node.address[1]}", flush=True)
    stop.wait()
    node.stop()
    for line in node.metrics.dump_lines():
        print(line)
    return 0


def _profile_from_args(args, **extra):
    return bench.ExperimentConfig(
        link_delay_ms=args.link_delay_ms,
        fog_hop_delay_ms=args.fog_hop_delay_ms,
        cloud_service_time_ms=args.service_time_ms,
        fog_service_time_ms=args.service_time_ms,
        seed=args.seed,
        **extra,
    )


def cmd_bench_latency(args):
    config = _profile_from_args(args, max_rooms=args.rooms, iterations=args.iterations)
    report = bench.run_latency_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_csv(report, out / "latency.csv")
    bench.emit_plot_svg(report, out / "latency.svg")
    for (topology, rooms), stats in sorted(report.summary().items()):
        print(
            f"{topology} rooms={rooms}: mean={stats['mean']:.3f} ms "
            f"median={stats['median']:.3f} ms stdev={stats['stdev']:.3f}"
        )
    for topology, rooms, message in report.errors:
        print(f"ERROR {topology} rooms={rooms}: {message}", file=sys.stderr)
    verdict = bench.compare_latency(report)
    print(f"fog_lower_latency_everywhere={verdict.fog_better_overall}")
    print(f"wrote {out / 'latency.csv'} and {out / 'latency.svg'}")
    return 0


def cmd_bench_throughput(args):
    config = _profile_from_args(args, packet_sizes=tuple(args.sizes), window_s=args.duration_s, trials=args.trials)
    report = bench.run_throughput_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_csv(report, out / "throughput.csv")
    bench.emit_plot_svg(report, out / "throughput.svg")
    for (topology, size), stats in sorted(report.summary().items()):
        print(f"{topology} size={size}: mean_packets={stats['mean']:.1f}")
    for topology, size, trial, message in report.errors:
        print(f"ERROR {topology} size={size} trial={trial}: {message}", file=sys.stderr)
    verdict = bench.compare_throughput(report)
    print(f"fog_higher_throughput_everywhere={verdict.fog_better_overall}")
    print(f"wrote {out / 'throughput.csv'} and {out / 'throughput.svg'}")
    return 0


def cmd_plot(args):
    report = bench.read_csv(args.infile)
    bench.emit_plot_svg(report, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    clips, vocabulary = _load_dataset(args.dataset, args.classes, args.per_class, args.seed)
    labels = [lc.label for lc in clips]
    train_items, val_items = nn.split_dataset(list(range(len(clips))), args.split, args.seed, labels=labels)
    inputs, label_arr = kws.extract_features(clips)
    config = nn.TrainConfig(epochs=args.epochs, seed=args.seed)
    model = kws.train_on_clips(None, len(vocabulary), config, features=(inputs[train_items], label_arr[train_items]))
    train_acc = nn.evaluate_accuracy(model, inputs[train_items], label_arr[train_items])
    val_acc = nn.evaluate_accuracy(model, inputs[val_items], label_arr[val_items])
    nn.save_model(model, args.out, labels=vocabulary)
    print(f"train_accuracy={train_acc:.6f}")
    print(f"val_accuracy={val_acc:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args):
    clips, _ = _load_dataset(args.dataset, args.classes, args.per_class, args.seed)
    config = nn.TrainConfig(epochs=args.epochs, seed=args.seed)
    result = kws.run_split_sweep(clips, args.splits, config)
    kws.write_sweep_csv(result, args.out)
    for row in result.rows:
        print(f"split={row.train_fraction:g} train_acc={row.train_accuracy:.4f} val_acc={row.validation_accuracy:.4f}")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="rpm", description="Fog/cloud patient-monitoring testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run a device, fog, or cloud node until interrupted")
    node.add_argument("--role", choices=("device", "fog", "cloud"), required=True)
    node.add_argument("--listen", type=_hostport, default=("127.0.0.1", 0))
    node.add_argument("--upstream", type=_hostport, default=None)
    node.add_argument("--patient", type=int, default=1)
    node.add_argument("--period-ms", type=float, default=100.0)
    node.add_argument("--link-delay-ms", type=float, default=0.0)
    node.add_argument("--service-time-ms", type=float, default=0.0)
    node.add_argument("--policy", default=None)
    node.add_argument("--model", default=None)
    node.add_argument("--duration-s", type=float, default=None)
    node.add_argument("--audio-clips", type=int, default=0)
    node.add_argument("--audio-bytes", type=int, default=32000)
    node.add_argument("--chunk-size", type=int, default=8192)
    node.add_argument("--fog-fronted", action="store_true", help="cloud accepts fogs instead of devices")
    node.set_defaults(func=cmd_node)

    bench_parser = sub.add_parser("bench", help="run the latency or throughput comparison")
    bench_sub = bench_parser.add_subparsers(dest="experiment", required=True)

    lat = bench_sub.add_parser("latency")
    lat.add_argument("--rooms", type=int, default=3)
    lat.add_argument("--iterations", type=int, default=30)
    lat.add_argument("--link-delay-ms", type=float, default=10.0)
    lat.add_argument("--fog-hop-delay-ms", type=float, default=2.0)
    lat.add_argument("--service-time-ms", type=float, default=5.0)
    lat.add_argument("--seed", type=int, default=0)
    lat.add_argument("--out", default="bench-out")
    lat.set_defaults(func=cmd_bench_latency)

    thr = bench_sub.add_parser("throughput")
    thr.add_argument("--sizes", type=_int_list, default=[1024, 2048, 4096, 8192, 16384, 32768])
    thr.add_argument("--duration-s", type=float, default=10.0)
    thr.add_argument("--trials", type=int, default=1)
    thr.add_argument("--link-delay-ms", type=float, default=10.0)
    thr.add_argument("--fog-hop-delay-ms", type=float, default=2.0)
    thr.add_argument("--service-time-ms", type=float, default=5.0)
    thr.add_argument("--seed", type=int, default=0)
    thr.add_argument("--out", default="bench-out")
    thr.set_defaults(func=cmd_bench_throughput)

    plot = sub.add_parser("plot", help="render a results CSV as SVG")
    plot.add_argument("--in", dest="infile", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plot)

    train = sub.add_parser("train", help="train the keyword classifier and save a checkpoint")
    train.add_argument("--dataset", default="synth", help="'synth' or a directory of labeled WAV folders")
    train.add_argument("--classes", type=int, default=8)
    train.add_argument("--per-class", type=int, default=200)
    train.add_argument("--epochs", type=int, default=10)
    train.add_argument("--split", type=float, default=0.7)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", default="model.bin")
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="accuracy across dataset splits")
    sweep.add_argument("--splits", type=_float_list, default=[0.5, 0.6, 0.7, 0.8, 0.9])
    sweep.add_argument("--dataset", default="synth")
    sweep.add_argument("--classes", type=int, default=8)
    sweep.add_argument("--per-class", type=int, default=200)
    sweep.add_argument("--epochs", type=int, default=10)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", default="sweep.csv")
    sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
