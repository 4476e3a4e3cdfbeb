"""Ground-truth destination labels and the block-and-probe consensus loop.

Physical device control is replaced by :class:`SimulatedDevice`: a probe of
function ``f`` succeeds when none of the destinations ``f`` depends on is
currently blocked, subject to probe noise.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .core import DestinationKey, Label
from .features import FeatureTable

logger = logging.getLogger(__name__)

CONSENSUS_THRESHOLD = 0.8
MIN_ITERATIONS = 30
MAX_ITERATIONS = 200


class Phase(str, enum.Enum):
    POWER_ON = "power_on"
    ACTIVITY = "activity"


class DefaultPolicy(str, enum.Enum):
    DROP = "drop"
    NON_ESSENTIAL = "non_essential"


class ProbeNoise(str, enum.Enum):
    # each round of function checks spuriously reports a failure with probability p
    SPURIOUS_FAILURE = "spurious_failure"
    # every individual function probe is flipped with probability p
    PER_FUNCTION = "per_function"


class ConsensusError(RuntimeError):
    def __init__(self, device_id: str, unresolved: list[DestinationKey], iterations: int):
        self.unresolved = unresolved
        names = ", ".join(d.value for d in unresolved)
        super().__init__(
            f"device {device_id}: no {CONSENSUS_THRESHOLD:.0%} consensus after "
            f"{iterations} iterations for: {names}"
        )


@dataclass(frozen=True, order=True)
class DestinationLabel:
    device_id: str
    destination: DestinationKey
    label: Label
    phase: Phase = Phase.ACTIVITY


@dataclass(frozen=True)
class SimulatedDevice:
    device_id: str
    requires: Mapping[str, frozenset[DestinationKey]]
    all_destinations: frozenset[DestinationKey]
    probe_flakiness: float = 0.0
    power_on: frozenset[DestinationKey] = frozenset()

    def __post_init__(self):
        if not 0.0 <= self.probe_flakiness < 0.2:
            raise ValueError("probe_flakiness must lie in [0, 0.2)")
        for f, deps in self.requires.items():
            if not set(deps) <= set(self.all_destinations):
                raise ValueError(f"function {f} requires unknown destinations")

    @property
    def functions(self) -> list[str]:
        return sorted(self.requires)

    def essential_set(self) -> set[DestinationKey]:
        return set().union(*self.requires.values()) if self.requires else set()

    def phase_of(self, dest: DestinationKey) -> Phase:
        return Phase.POWER_ON if dest in self.power_on else Phase.ACTIVITY


@dataclass
class ConsensusRun:
    device_id: str
    iterations: int = 0
    tallies: dict[DestinationKey, list[int]] = field(default_factory=dict)
    consensus_threshold: float = CONSENSUS_THRESHOLD
    blocked_at_end: list[frozenset[DestinationKey]] = field(default_factory=list)
    non_essential_voted: list[frozenset[DestinationKey]] = field(default_factory=list)

    def majority(self, dest: DestinationKey) -> Label:
        e, ne = self.tallies[dest]
        return Label.ESSENTIAL if e >= ne else Label.NON_ESSENTIAL

    def unresolved(self) -> list[DestinationKey]:
        need = self.consensus_threshold * self.iterations
        return [d for d, (e, ne) in sorted(self.tallies.items()) if max(e, ne) < need - 1e-9]

    def labels(self, dev: SimulatedDevice) -> set[DestinationLabel]:
        return {
            DestinationLabel(self.device_id, d, self.majority(d), dev.phase_of(d))
            for d in self.tallies
        }


def _probe_round(
    dev: SimulatedDevice, blocked: set, rng: Optional[np.random.Generator], noise: ProbeNoise
) -> bool:
    p = dev.probe_flakiness
    if noise is ProbeNoise.PER_FUNCTION:
        ok = True
        for f in dev.functions:
            works = not (dev.requires[f] & blocked)
            if p and rng.random() < p:
                works = not works
            ok = ok and works
        return ok
    ok = all(not (dev.requires[f] & blocked) for f in dev.functions)
    if ok and p and rng.random() < p:
        return False
    return ok


def run_consensus(
    dev: SimulatedDevice,
    seed: int = 0,
    min_iterations: int = MIN_ITERATIONS,
    max_iterations: int = MAX_ITERATIONS,
    threshold: float = CONSENSUS_THRESHOLD,
    noise: ProbeNoise | str = ProbeNoise.SPURIOUS_FAILURE,
) -> ConsensusRun:
    """Repeat the block-and-probe sweep until every destination reaches consensus.

    Within one sweep destinations are visited in sorted order.  A candidate
    is added to the block set; if every function still works the candidate
    gets a non-essential vote and stays blocked, otherwise an essential vote
    and it is unblocked again.  Each sweep starts from an empty block set.
    """
    if not dev.all_destinations:
        raise ValueError(f"device {dev.device_id} has no destinations")
    noise = ProbeNoise(noise)
    rng = np.random.default_rng(seed)
    order = sorted(dev.all_destinations)
    run = ConsensusRun(dev.device_id, consensus_threshold=threshold)
    run.tallies = {d: [0, 0] for d in order}
    while True:
        blocked: set[DestinationKey] = set()
        voted_ne = set()
        for d in order:
            blocked.add(d)
            if _probe_round(dev, blocked, rng, noise):
                run.tallies[d][1] += 1
                voted_ne.add(d)
            else:
                run.tallies[d][0] += 1
                blocked.discard(d)
        run.iterations += 1
        run.blocked_at_end.append(frozenset(blocked))
        run.non_essential_voted.append(frozenset(voted_ne))
        if run.iterations >= min_iterations and not run.unresolved():
            return run
        if run.iterations >= max_iterations:
            raise ConsensusError(dev.device_id, run.unresolved(), run.iterations)


def run_consensus_labeling(dev: SimulatedDevice, seed: int = 0, **kwargs) -> set[DestinationLabel]:
    return run_consensus(dev, seed, **kwargs).labels(dev)


# --------------------------------------------------------------------------
# joining labels onto feature rows


def assign_labels(
    table: FeatureTable,
    labels: Iterable[DestinationLabel],
    default: DefaultPolicy | str = DefaultPolicy.DROP,
) -> FeatureTable:
    """Attach ground truth by (device, destination).

    Rows without a label are dropped or marked non-essential according to
    ``default``; the counts land in ``meta``.
    """
    default = DefaultPolicy(default)
    lookup = {(l.device_id, l.destination.value): l.label.target for l in labels}
    targets = np.array(
        [lookup.get((d, dst), -1) for d, dst in zip(table.device, table.destination)],
        dtype=np.int8,
    )
    unknown = targets < 0
    if default is DefaultPolicy.DROP:
        out = table.subset(~unknown)
        out.label = targets[~unknown]
    else:
        out = table.subset(np.arange(len(table)))
        targets[unknown] = Label.NON_ESSENTIAL.target
        out.label = targets
    out.meta.update(
        policy=default.value,
        dropped=int(unknown.sum()) if default is DefaultPolicy.DROP else 0,
        unknown=int(unknown.sum()),
    )
    return out


def label_summary(labels: Iterable[DestinationLabel]) -> dict[str, tuple[int, int]]:
    """Per device ``(essential, non_essential)`` destination counts."""
    counts: dict[str, list[int]] = {}
    for l in labels:
        c = counts.setdefault(l.device_id, [0, 0])
        c[0 if l.label is Label.ESSENTIAL else 1] += 1
    return {d: (c[0], c[1]) for d, c in sorted(counts.items())}


# --------------------------------------------------------------------------
# files


def write_labels(path: str | os.PathLike, labels: Iterable[DestinationLabel]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["device", "destination", "label", "phase"])
        for l in sorted(labels):
            w.writerow([l.device_id, l.destination.value, l.label.value, l.phase.value])


def read_labels(path: str | os.PathLike) -> set[DestinationLabel]:
    with open(path, newline="") as fp:
        return {
            DestinationLabel(
                r["device"],
                DestinationKey.from_string(r["destination"]),
                Label.parse(r["label"]),
                Phase(r.get("phase") or Phase.ACTIVITY.value),
            )
            for r in csv.DictReader(fp)
        }


def write_consensus_report(path: str | os.PathLike, runs: Iterable[ConsensusRun]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["device", "destination", "essential_votes", "non_essential_votes", "iterations"])
        for run in sorted(runs, key=lambda r: r.device_id):
            for d, (e, ne) in sorted(run.tallies.items()):
                w.writerow([run.device_id, d.value, e, ne, run.iterations])


def load_devices(path: str | os.PathLike) -> list[SimulatedDevice]:
    """Read simulated devices from JSON.

    Format: a list of objects with ``device_id``, ``destinations`` (list),
    ``requires`` (function -> list of destinations), optional ``power_on``
    and ``probe_flakiness``.
    """
    with open(path) as fp:
        raw = json.load(fp)
    devices = []
    for d in raw:
        key = DestinationKey.from_string
        devices.append(
            SimulatedDevice(
                device_id=d["device_id"],
                requires={f: frozenset(map(key, deps)) for f, deps in d.get("requires", {}).items()},
                all_destinations=frozenset(map(key, d["destinations"])),
                probe_flakiness=float(d.get("probe_flakiness", 0.0)),
                power_on=frozenset(map(key, d.get("power_on", []))),
            )
        )
    return devices


def dump_devices(path: str | os.PathLike, devices: Iterable[SimulatedDevice]) -> None:
    out = [
        {
            "device_id": dev.device_id,
            "destinations": sorted(d.value for d in dev.all_destinations),
            "requires": {f: sorted(x.value for x in dev.requires[f]) for f in dev.functions},
            "power_on": sorted(d.value for d in dev.power_on),
            "probe_flakiness": dev.probe_flakiness,
        }
        for dev in devices
    ]
    with open(path, "w") as fp:
        json.dump(out, fp, indent=2, sort_keys=True)
