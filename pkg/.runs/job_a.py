import sys, time, dataclasses
sys.path.insert(0, "/root/pkg/tests")
from _runs import ensure_run, ensure_probe, ensure_invariance
from msn.config import desk_preset
from msn.train import build_dataset

def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)

desk = desk_preset()
ds = build_dataset(desk)
log("dataset built")
for seed in (0, 1, 2):
    cfg = dataclasses.replace(desk, seed=seed)
    t0 = time.monotonic()
    ensure_run(cfg, dataset=ds)
    log(f"seed {seed}: trained in {time.monotonic()-t0:.0f}s")
    log(f"seed {seed}: probe5 {ensure_probe(cfg, 5, (0,1,2), dataset=ds)}")
    log(f"seed {seed}: init probe5 {ensure_probe(cfg, 5, (0,1,2), init=True, dataset=ds)}")
    log(f"seed {seed}: inv {ensure_invariance(cfg, 0.7, 256, dataset=ds):.4f} "
        f"init {ensure_invariance(cfg, 0.7, 256, init=True, dataset=ds):.4f}")
log("job A done")
