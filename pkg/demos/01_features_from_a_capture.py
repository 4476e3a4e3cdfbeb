"""
From a pcap to feature vectors
==============================

Write a short synthetic capture for one device, parse it back, and look at
the per-destination feature vectors the classifier sees.
"""

import tempfile
from pathlib import Path

import numpy as np

from mliotrim.capture import extract_dns_table, parse_capture
from mliotrim.features import FEATURE_NAMES, extract_features
from mliotrim.synthetic import EPOCH_START, default_roster, write_device_capture

roster = default_roster(seed=0)
speaker = roster[0]
tmp = Path(tempfile.mkdtemp())
path = tmp / f"{speaker.device_id}-0.pcap"

# one hour of traffic, starting at midnight of the first synthetic day
write_device_capture(path, speaker, 0, EPOCH_START, 3600, w=60)

cap = parse_capture(path, speaker.device_id, speaker.addr)
dns = extract_dns_table(cap, speaker.device_id)
print(f"{len(cap.records)} packets, {len(dns)} DNS answers")

# %%
# Windows are keyed by (device, destination, window start).  A destination
# is the domain the device resolved, or the bare IP if it never asked.

table = extract_features(cap.records, dns, 60, speaker.device_id)
print(f"{len(table)} windows over {len(set(table.destination))} destinations")
for dest in sorted(set(table.destination)):
    print("  ", dest)

# %%
# Each row has 204 values: 12 blocks (protocol x direction) of 16 statistics,
# then 12 scalar ratios and counts.

row = table.X[0]
nonzero = np.flatnonzero(row)
print(f"first window: {len(nonzero)} nonzero features")
for i in nonzero[:12]:
    print(f"  {FEATURE_NAMES[i]:<24} {row[i]:.3f}")
