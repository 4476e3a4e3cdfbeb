"""
Running the gateway over rotated captures
=========================================

Train a forest, write an hour of rotated captures for the roster, and
let the gateway vote and emit its rule files.
"""

import tempfile
from pathlib import Path

from mliotrim.evaluation import train_model
from mliotrim.models import ForestConfig
from mliotrim.runtime import Gateway, RotationConfig
from mliotrim.synthetic import EPOCH_START, DAY, default_roster, make_corpus, write_device_capture

# a busier roster than the default so that every 10-minute rotation has traffic
roster = default_roster(seed=1, windows_per_day=72)
corpus = make_corpus(days=5, seed=1, devices=roster)
model = train_model(corpus.table, "rf", forest_config=ForestConfig(n_trees=50, seed=1))

work = Path(tempfile.mkdtemp())
caps, out = work / "captures", work / "rules"
caps.mkdir()
rotation, cycles = 600, 6

# the first hour of day 7 in 10-minute rotations; each device resolves its
# destinations shortly before first contact, so DNS state builds up over cycles
start = EPOCH_START + 7 * DAY
for i, dev in enumerate(roster):
    for cycle in range(cycles):
        write_device_capture(caps / f"{dev.device_id}-{cycle}.pcap", dev, i, start + cycle * rotation, rotation, seed=1)

config = RotationConfig(
    rotation=rotation,
    window=60,
    capture_dir=caps,
    roster={d.device_id: d.addr for d in roster},
    out_dir=out,
    workers=2,
)
gw = Gateway(config, model=model)
decisions = gw.replay()

# %%
# Every (device, destination) seen in a rotation gets one decision: the
# window votes and whether a block was enforced.

for d in decisions:
    mark = "BLOCK" if d.enforced else "keep "
    print(f"cycle {d.cycle_index} {mark} {d.device_id:<10} {d.destination.value:<28} votes E/NE={d.window_votes}")

print(f"\n{len(decisions)} decisions, {sum(d.enforced for d in decisions)} enforced")
print((out / "ipblock.rules").read_text())
print((out / "dns_override.conf").read_text())
