# The full inspection mission over a local socket
#
# Same default mission the acceptance suite flies, with the topside running
# in a separate process behind a TCP link. Writes the mission log, summary,
# range table and annotated snapshots to demos/out/mission/. Takes about a
# minute on one core.

import dataclasses
import json
import os

from netpen.config import load_config
from netpen.runner import export_artifacts, run_mission

here = os.path.dirname(__file__)
cfg = load_config(os.path.join(here, "..", "configs", "default.ini"))
cfg = dataclasses.replace(cfg, link=dataclasses.replace(cfg.link, mode="tcp"))

if __name__ == "__main__":   # the topside process is spawned
    rep = run_mission(cfg)
    files = export_artifacts(rep, os.path.join(here, "out", "mission"))
    print(json.dumps(rep.summary, indent=1, sort_keys=True))
    print(len(files), "files written")
