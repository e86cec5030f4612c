"""Latency and throughput experiments over fog and cloud topologies.

The harness spawns fresh nodes on fresh ports for every (topology, cell)
pair, drives ack-paced device senders, and reduces device-side round trips
into per-cell reports. Emulated delays make the qualitative trends
reproducible on loopback; every parameter lives in ExperimentConfig.
"""

from __future__ import annotations

import random
import statistics
import threading
import time
from dataclasses import dataclass, field, replace

from . import kws, nn
from .domain import DataCategory
from .filtering import PolicyEngine, policy_from_consent
from .nodes import CloudConfig, CloudNode, DeviceClient, FogConfig, FogNode

FOG = "fog"
CLOUD = "cloud"
TOPOLOGIES = (CLOUD, FOG)


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Delay profile and experiment dimensions.

    The default profile: 10 ms on hops that cross the wide-area wireless
    link (device-to-cloud, fog-to-cloud), 2 ms on the in-room hop between
    a device and its fog, 5 ms serialized service at the cloud, 5 ms
    per-fog service, and a 1 MB/s byte rate on device links (fog backhaul
    unconstrained). Device senders are ack-paced.
    """

    link_delay_ms: float = 10.0
    fog_hop_delay_ms: float = 2.0
    cloud_service_time_ms: float = 5.0
    fog_service_time_ms: float = 5.0
    device_link_rate: float | None = 1_000_000.0
    backhaul_rate: float | None = None
    devices_per_room: int = 2
    max_rooms: int = 3
    iterations: int = 30
    probe_payload_size: int = 256
    packet_sizes: tuple = (1024, 2048, 4096, 8192, 16384, 32768)
    window_s: float = 10.0
    trials: int = 1
    seed: int = 0


@dataclass(frozen=True)
class LatencyRow:
    topology: str
    rooms: int
    iteration: int
    rtt_ms: float


@dataclass(frozen=True)
class ThroughputRow:
    topology: str
    packet_size_bytes: int
    trial: int
    packets: int


@dataclass
class LatencyReport:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def cells(self, topology):
        out = {}
        for row in self.rows:
            if row.topology == topology:
                out.setdefault(row.rooms, []).append(row.rtt_ms)
        return out

    def summary(self):
        stats = {}
        for row in self.rows:
            stats.setdefault((row.topology, row.rooms), []).append(row.rtt_ms)
        return {
            key: {
                "mean": statistics.fmean(vals),
                "median": statistics.median(vals),
                "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            }
            for key, vals in stats.items()
        }


@dataclass
class ThroughputReport:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def cells(self, topology):
        out = {}
        for row in self.rows:
            if row.topology == topology:
                out.setdefault(row.packet_size_bytes, []).append(row.packets)
        return out

    def summary(self):
        stats = {}
        for row in self.rows:
            stats.setdefault((row.topology, row.packet_size_bytes), []).append(row.packets)
        return {key: {"mean": statistics.fmean(vals)} for key, vals in stats.items()}


# --- cell orchestration -----------------------------------------------------


def _untrained_classifier():
    # fogs must load a model at startup; bench traffic carries no audio,
    # so an untrained head with the stock vocabulary suffices
    model = nn.build_model(8, seed=0)
    return model, [kws.synth_class_name(k) for k in range(8)]


class _Cell:
    """One running topology: a cloud, optional fogs, and device clients."""

    def __init__(self, topology, rooms, config: ExperimentConfig, allowed=(DataCategory.VITALS,)):
        self.topology = topology
        self.rooms = rooms
        self.config = config
        self.fogs = []
        self.devices = []
        n_devices = rooms * config.devices_per_room
        patients = list(range(1, n_devices + 1))
        fog_fronted = topology == FOG
        self.cloud = CloudNode(
            CloudConfig(
                fog_fronted=fog_fronted,
                service_time_ms=config.cloud_service_time_ms,
                link_delay_ms=config.link_delay_ms,
                link_rate=None if fog_fronted else config.device_link_rate,
                policy_engine=None if fog_fronted else PolicyEngine([policy_from_consent(p, set(allowed)) for p in patients]),
            )
        ).start()
        try:
            classifier = _untrained_classifier() if fog_fronted else None
            for room in range(rooms):
                room_patients = patients[room * config.devices_per_room : (room + 1) * config.devices_per_room]
                upstream = self.cloud.address
                device_hop_delay = config.link_delay_ms
                if fog_fronted:
                    fog = FogNode(
                        FogConfig(
                            upstream=self.cloud.address,
                            service_time_ms=config.fog_service_time_ms,
                            device_link_delay_ms=config.fog_hop_delay_ms,
                            device_link_rate=config.device_link_rate,
                            backhaul_delay_ms=config.link_delay_ms,
                            backhaul_rate=config.backhaul_rate,
                            policy_engine=PolicyEngine([policy_from_consent(p, set(allowed)) for p in room_patients]),
                            classifier=classifier,
                        )
                    ).start()
                    self.fogs.append(fog)
                    upstream = fog.address
                    device_hop_delay = config.fog_hop_delay_ms
                for patient in room_patients:
                    self.devices.append(
                        DeviceClient(
                            upstream,
                            patient,
                            link_delay_ms=device_hop_delay,
                            link_rate=config.device_link_rate,
                        ).connect()
                    )
        except Exception:
            self.close()
            raise

    def close(self):
        for device in self.devices:
            try:
                device.close()
            except Exception:  # noqa: BLE001 - teardown is best effort
                pass
        for fog in self.fogs:
            fog.stop()
        self.cloud.stop()


def run_latency_experiment(config: ExperimentConfig | None = None) -> LatencyReport:
    """Fig-4-style sweep: per topology and room count, record per-iteration
    round trips averaged over the concurrently probing devices."""
    config = config or ExperimentConfig()
    report = LatencyReport()
    for topology in TOPOLOGIES:
        for rooms in range(1, config.max_rooms + 1):
            try:
                rtts = _latency_cell(topology, rooms, config)
            except Exception as exc:  # noqa: BLE001 - error rows, not aborts
                report.errors.append((topology, rooms, str(exc)))
                continue
            for i, rtt in enumerate(rtts):
                report.rows.append(LatencyRow(topology, rooms, i, round(rtt, 3)))
    return report


def _latency_cell(topology, rooms, config: ExperimentConfig):
    cell = _Cell(topology, rooms, config)
    payload = random.Random(f"{config.seed}-{topology}-{rooms}").randbytes(config.probe_payload_size)
    n = len(cell.devices)
    barrier = threading.Barrier(n)
    per_device = [[] for _ in range(n)]
    failures = []

    def worker(idx):
        device = cell.devices[idx]
        try:
            device.probe(payload=payload)  # warmup, not recorded
            for _ in range(config.iterations):
                barrier.wait()
                per_device[idx].append(device.probe(payload=payload))
        except Exception as exc:  # noqa: BLE001
            failures.append(exc)
            barrier.abort()

    try:
        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        cell.close()
    if failures:
        raise failures[0]
    return [statistics.fmean(col) for col in zip(*per_device)]


def run_throughput_experiment(config: ExperimentConfig | None = None) -> ThroughputReport:
    """Fig-5-style sweep on the fixed two-room arrangement: count frames the
    cloud accepts inside the window while ack-paced senders run flat out."""
    config = config or ExperimentConfig()
    report = ThroughputReport()
    for topology in TOPOLOGIES:
        for size in config.packet_sizes:
            for trial in range(config.trials):
                try:
                    packets = _throughput_cell(topology, size, trial, config)
                except Exception as exc:  # noqa: BLE001
                    report.errors.append((topology, size, trial, str(exc)))
                    continue
                report.rows.append(ThroughputRow(topology, size, trial, packets))
    return report


def _throughput_cell(topology, size, trial, config: ExperimentConfig):
    cell = _Cell(topology, rooms=2, config=config)
    payload = random.Random(f"{config.seed}-{topology}-{size}-{trial}").randbytes(size)
    stop = threading.Event()
    failures = []

    def sender(device):
        try:
            while not stop.is_set():
                device.probe(payload=payload, timeout=30.0)
        except Exception as exc:  # noqa: BLE001
            if not stop.is_set():
                failures.append(exc)

    try:
        threads = [threading.Thread(target=sender, args=(d,)) for d in cell.devices]
        for t in threads:
            t.start()
        time.sleep(0.5)  # let queues reach steady state
        before = len(cell.cloud.store)
        time.sleep(config.window_s)
        accepted = len(cell.cloud.store) - before
        stop.set()
        for t in threads:
            t.join(timeout=35.0)
    finally:
        stop.set()
        cell.close()
    if failures:
        raise failures[0]
    return accepted


# --- comparisons -------------------------------------------------------------


@dataclass(frozen=True)
class CellVerdict:
    mean_diff: float
    median_diff: float
    fog_better: bool


@dataclass(frozen=True)
class ComparisonSummary:
    cells: dict
    fog_better_overall: bool


def compare_reports(fog_cells, cloud_cells, higher_is_better=False) -> ComparisonSummary:
    """Per matching cell: mean and median differences (fog minus cloud) and a
    strict fog_better flag; the overall verdict is their conjunction."""
    if set(fog_cells) != set(cloud_cells):
        raise ComparisonError(f"cells differ: {sorted(fog_cells)} vs {sorted(cloud_cells)}")
    if not fog_cells:
        raise ComparisonError("nothing to compare")
    cells = {}
    for key in sorted(fog_cells):
        f, c = fog_cells[key], cloud_cells[key]
        mean_diff = statistics.fmean(f) - statistics.fmean(c)
        median_diff = statistics.median(f) - statistics.median(c)
        better = mean_diff > 0 if higher_is_better else mean_diff < 0
        cells[key] = CellVerdict(mean_diff, median_diff, better)
    return ComparisonSummary(cells=cells, fog_better_overall=all(v.fog_better for v in cells.values()))


def compare_latency(report: LatencyReport) -> ComparisonSummary:
    return compare_reports(report.cells(FOG), report.cells(CLOUD), higher_is_better=False)


def compare_throughput(report: ThroughputReport) -> ComparisonSummary:
    return compare_reports(report.cells(FOG), report.cells(CLOUD), higher_is_better=True)


# --- CSV ----------------------------------------------------------------------

LATENCY_HEADER = "experiment,topology,rooms,iteration,rtt_ms"
THROUGHPUT_HEADER = "experiment,topology,packet_size_bytes,trial,packets"


def write_csv(report, path):
    with open(path, "w") as fh:
        if isinstance(report, LatencyReport):
            fh.write(LATENCY_HEADER + "\n")
            for r in report.rows:
                fh.write(f"latency,{r.topology},{r.rooms},{r.iteration},{r.rtt_ms:.3f}\n")
        elif isinstance(report, ThroughputReport):
            fh.write(THROUGHPUT_HEADER + "\n")
            for r in report.rows:
                fh.write(f"throughput,{r.topology},{r.packet_size_bytes},{r.trial},{r.packets}\n")
        else:
            raise TypeError(f"unsupported report {type(report).__name__}")


def read_csv(path):
    """Load a report back; the kind is recognized from the header."""
    with open(path) as fh:
        header = fh.readline().strip()
        lines = [ln.strip() for ln in fh if ln.strip()]
    if header == LATENCY_HEADER:
        report = LatencyReport()
        for ln in lines:
            _, topology, rooms, iteration, rtt = ln.split(",")
            report.rows.append(LatencyRow(topology, int(rooms), int(iteration), float(rtt)))
        return report
    if header == THROUGHPUT_HEADER:
        report = ThroughputReport()
        for ln in lines:
            _, topology, size, trial, packets = ln.split(",")
            report.rows.append(ThroughputRow(topology, int(size), int(trial), int(packets)))
        return report
    raise ValueError(f"unrecognized report header {header!r}")


# --- SVG plots ------------------------------------------------------------------

_SERIES_COLORS = {FOG: "#2b7bba", CLOUD: "#c0392b"}


def emit_plot_svg(report, path):
    """Render the report as a two-series line chart in plain SVG 1.1."""
    if isinstance(report, LatencyReport):
        if not report.rows:
            raise ValueError("empty latency report")
        summary = report.summary()
        xs = sorted({rooms for _, rooms in summary})
        series = {
            topo: [(x, summary[(topo, x)]["mean"]) for x in xs if (topo, x) in summary]
            for topo in TOPOLOGIES
        }
        _write_svg(path, series, xs, "rooms", "mean round-trip (ms)", "Round-trip latency vs room count")
    elif isinstance(report, ThroughputReport):
        if not report.rows:
            raise ValueError("empty throughput report")
        summary = report.summary()
        xs = sorted({size for _, size in summary})
        series = {
            topo: [(x, summary[(topo, x)]["mean"]) for x in xs if (topo, x) in summary]
            for topo in TOPOLOGIES
        }
        _write_svg(path, series, xs, "packet size (bytes)", "frames accepted per window", "Throughput vs packet size")
    else:
        raise TypeError(f"unsupported report {type(report).__name__}")


def _write_svg(path, series, xs, xlabel, ylabel, title):
    width, height = 640, 400
    left, right, top, bottom = 80, 30, 50, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    x_pos = {x: left + (plot_w * i / max(1, len(xs) - 1) if len(xs) > 1 else plot_w / 2) for i, x in enumerate(xs)}
    all_y = [y for pts in series.values() for _, y in pts]
    y_max = max(all_y) * 1.1 or 1.0
    y_min = 0.0

    def ypix(y):
        return top + plot_h * (1 - (y - y_min) / (y_max - y_min))

    parts = [
        f'<svg version="1.1" xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {top + plot_h / 2:.1f})">{ylabel}</text>',
    ]
    for x in xs:
        px = x_pos[x]
        parts.append(f'<line x1="{px:.1f}" y1="{top + plot_h}" x2="{px:.1f}" y2="{top + plot_h + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.1f}" y="{top + plot_h + 20}" text-anchor="middle" font-size="11">{x}</text>')
    for i in range(5):
        y = y_min + (y_max - y_min) * i / 4
        parts.append(f'<line x1="{left - 5}" y1="{ypix(y):.1f}" x2="{left}" y2="{ypix(y):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 9}" y="{ypix(y) + 4:.1f}" text-anchor="end" font-size="11">{y:.1f}</text>')
    legend_y = top + 8
    for topo, pts in series.items():
        if not pts:
            continue
        color = _SERIES_COLORS.get(topo, "#444444")
        coords = " ".join(f"{x_pos[x]:.1f},{ypix(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{x_pos[x]:.1f}" cy="{ypix(y):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{left + plot_w - 6}" y="{legend_y}" text-anchor="end" font-size="12" fill="{color}">{topo}</text>')
        legend_y += 16
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def quick_profile(**overrides) -> ExperimentConfig:
    """Scaled-down profile for smoke runs; keyword overrides go on top."""
    base = ExperimentConfig(
        link_delay_ms=2.0,
        fog_hop_delay_ms=0.5,
        cloud_service_time_ms=1.0,
        fog_service_time_ms=1.0,
        iterations=5,
        max_rooms=2,
        packet_sizes=(1024, 4096),
        window_s=1.5,
    )
    return replace(base, **overrides)
