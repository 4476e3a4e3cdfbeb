import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mliotrim.core import DestinationKey, Label
from mliotrim.features import FeatureTable
from mliotrim.labeling import (
    ConsensusError,
    DestinationLabel,
    Phase,
    ProbeNoise,
    SimulatedDevice,
    assign_labels,
    dump_devices,
    label_summary,
    load_devices,
    read_labels,
    run_consensus,
    run_consensus_labeling,
    write_consensus_report,
    write_labels,
)
from mliotrim.synthetic import random_simulated_device

A, B = DestinationKey.domain("a.example"), DestinationKey.domain("b.example")


def labels_of(result):
    return {l.destination.value: l.label for l in result}


def test_two_destination_example():
    dev = SimulatedDevice("d", {"f1": frozenset({A})}, frozenset({A, B}))
    run = run_consensus(dev, seed=0)
    assert run.iterations == 30
    assert run.tallies[A] == [30, 0] and run.tallies[B] == [0, 30]
    assert labels_of(run.labels(dev)) == {"a.example": Label.ESSENTIAL, "b.example": Label.NON_ESSENTIAL}


def test_no_requirements_means_all_non_essential():
    dev = SimulatedDevice("d", {"f1": frozenset(), "f2": frozenset()}, frozenset({A, B}))
    assert set(labels_of(run_consensus_labeling(dev)).values()) == {Label.NON_ESSENTIAL}


def test_flaky_run_matches_clean_labels():
    rng = np.random.default_rng(11)
    for i in range(5):
        clean = random_simulated_device(rng, i, 0.0)
        flaky = SimulatedDevice(clean.device_id, clean.requires, clean.all_destinations, 0.1, clean.power_on)
        assert run_consensus_labeling(flaky, seed=42) == run_consensus_labeling(clean, seed=0)
        assert run_consensus_labeling(flaky, seed=42) == run_consensus_labeling(flaky, seed=42)


def test_per_function_noise_can_fail():
    # every function probe flipped independently: consensus is often out of reach
    dev = random_simulated_device(np.random.default_rng(0), 0, 0.1)
    with pytest.raises(ConsensusError) as err:
        run_consensus(dev, seed=0, noise=ProbeNoise.PER_FUNCTION)
    assert err.value.unresolved
    assert "no 80% consensus after 200 iterations" in str(err.value)


devices = st.builds(
    lambda seed, idx: random_simulated_device(np.random.default_rng(seed), idx),
    st.integers(0, 2**32 - 1),
    st.integers(0, 99),
)


@given(devices, st.integers(0, 1000))
def test_clean_consensus_properties(dev, seed):
    run = run_consensus(dev, seed)
    essential = dev.essential_set()
    for l in run.labels(dev):
        assert (l.label is Label.ESSENTIAL) == (l.destination in essential)
    # independent of the seed at zero flakiness
    assert run.labels(dev) == run_consensus(dev, seed + 1).labels(dev)
    assert run.iterations >= 30
    for e, ne in run.tallies.values():
        assert e + ne == run.iterations
    assert run.blocked_at_end == run.non_essential_voted


@given(devices)
def test_flaky_persistent_block_invariant(dev):
    flaky = SimulatedDevice(dev.device_id, dev.requires, dev.all_destinations, 0.1, dev.power_on)
    run = run_consensus(flaky, seed=3)
    assert run.blocked_at_end == run.non_essential_voted
    assert not run.unresolved()


def test_device_validation():
    with pytest.raises(ValueError):
        SimulatedDevice("d", {}, frozenset({A}), probe_flakiness=0.2)
    with pytest.raises(ValueError):
        SimulatedDevice("d", {"f": frozenset({B})}, frozenset({A}))
    with pytest.raises(ValueError):
        run_consensus(SimulatedDevice("d", {}, frozenset()))


def test_phase_recorded():
    dev = SimulatedDevice("d", {"f": frozenset({A})}, frozenset({A, B}), power_on=frozenset({B}))
    phases = {l.destination: l.phase for l in run_consensus_labeling(dev)}
    assert phases == {A: Phase.ACTIVITY, B: Phase.POWER_ON}


# --------------------------------------------------------------------------
# joining labels


def table(rows):
    n = len(rows)
    return FeatureTable([r[0] for r in rows], [r[1] for r in rows], list(range(0, 60 * n, 60)), [60] * n, np.zeros((n, 204)))


def test_assign_labels_examples():
    t = table([("echo3", "a.example"), ("echo3", "zz.example"), ("echo3", "b.example")])
    labels = {
        DestinationLabel("echo3", DestinationKey.domain("a.example"), Label.ESSENTIAL),
        DestinationLabel("echo3", DestinationKey.domain("b.example"), Label.NON_ESSENTIAL),
    }
    out = assign_labels(t, labels, "drop")
    assert list(out.destination) == ["a.example", "b.example"]
    assert list(out.label) == [Label.ESSENTIAL.target, Label.NON_ESSENTIAL.target]
    assert out.meta["dropped"] == 1 and out.meta["policy"] == "drop"
    assert len(out) + out.meta["dropped"] == len(t)

    kept = assign_labels(t, labels, "non_essential")
    assert len(kept) == 3 and kept.meta["unknown"] == 1
    assert kept.label[1] == Label.NON_ESSENTIAL.target


def test_labels_match_on_device_too():
    t = table([("echo3", "a.example"), ("echo4", "a.example")])
    labels = {DestinationLabel("echo3", DestinationKey.domain("a.example"), Label.ESSENTIAL)}
    out = assign_labels(t, labels)
    assert list(out.device) == ["echo3"]


def echo_dot_3_labels():
    ess = [DestinationLabel("echo3", DestinationKey.domain(f"e{i}.amazon.example"), Label.ESSENTIAL) for i in range(2)]
    ne = [DestinationLabel("echo3", DestinationKey.domain(f"n{i:02d}.example"), Label.NON_ESSENTIAL) for i in range(48)]
    return set(ess + ne)


def test_echo_dot_3_label_summary(tmp_path):
    labels = echo_dot_3_labels()
    assert label_summary(labels) == {"echo3": (2, 48)}
    path = tmp_path / "labels.csv"
    write_labels(path, labels)
    assert path.read_text().splitlines()[0] == "device,destination,label,phase"
    assert read_labels(path) == labels


def test_ip_destinations_roundtrip(tmp_path):
    labels = {DestinationLabel("plug", DestinationKey.ip("52.1.2.3"), Label.NON_ESSENTIAL, Phase.POWER_ON)}
    path = tmp_path / "l.csv"
    write_labels(path, labels)
    assert read_labels(path) == labels


def test_consensus_report_and_device_files(tmp_path):
    dev = SimulatedDevice("d", {"f1": frozenset({A})}, frozenset({A, B}), 0.05, frozenset({B}))
    run = run_consensus(dev, seed=1)
    report = tmp_path / "r.csv"
    write_consensus_report(report, [run])
    lines = report.read_text().splitlines()
    assert lines[0] == "device,destination,essential_votes,non_essential_votes,iterations"
    device, dest, e, ne, it = lines[1].split(",")
    assert (device, dest) == ("d", "a.example") and int(e) + int(ne) == int(it) == run.iterations

    path = tmp_path / "devs.json"
    dump_devices(path, [dev])
    assert load_devices(path) == [dev]
