# A short closed-loop dive
#
# The vehicle starts 3 m off the net and is servoed to 2 m, then descends
# to 2 m depth while holding range. Prints a coarse trace every second.

from netpen.runner import MissionConfig, MissionSettings, run_mission

cfg = MissionConfig(mission=MissionSettings(bottom_depth=2.0, max_duration=60.0))
rep = run_mission(cfg)

print("   t   phase     depth   range   est")
for r in rep.records[::10]:
    est = "   -  " if r["est_distance"] is None else "%6.3f" % r["est_distance"]
    print("%5.1f  %-8s %6.2f  %6.3f %s" % (r["t"], r["phase"], r["depth"], r["true_distance"], est))

s = rep.summary
print("\nfinal", s["final_phase"], "settled at", s["settling_time"], "s, max error after", s["max_error_after_settling"])
