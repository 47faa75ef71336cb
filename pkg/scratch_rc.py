import sys
import tempfile
import threading
import time
from pathlib import Path

sys.path.insert(0, "/root/pkg/src")

from deltaforge.resultcache import CacheKey, ResultCache


def check(name, ok):
    print(("PASS" if ok else "FAIL"), name)
    if not ok:
        sys.exit(1)


wh = Path(tempfile.mkdtemp(prefix="dfrc"))
rc = ResultCache(wh, wait_timeout=5.0)

k1 = CacheKey("SELECT 1", (("default.t", 3, "abc"),))
r = rc.lookup(k1)
check("cold miss owns", r.status == "miss" and r.owner)
rc.admit(k1, [(1,), (2,)])
r = rc.lookup(k1)
check("warm hit", r.status == "hit" and r.rows == [(1,), (2,)])

# new snapshot -> different key -> miss
k2 = CacheKey("SELECT 1", (("default.t", 4, "abc"),))
r = rc.lookup(k2)
check("fingerprint change misses", r.status == "miss" and r.owner)
rc.fail(k2)

# volatile never caches and never waits
kv = CacheKey("SELECT rand()", (), volatile=True)
r = rc.lookup(kv)
check("volatile miss no owner", r.status == "miss" and not r.owner)
check("volatile admit rejected", rc.admit(kv, [(0.5,)]) is False)

# size cap
small = ResultCache(wh, entry_cap_bytes=64)
ks = CacheKey("SELECT big", (("default.t", 1, "x"),))
small.lookup(ks)
check("oversize rejected", small.admit(ks, [("y" * 1000,)]) is False)
check("oversize stays miss", small.lookup(ks).status == "miss")
small.fail(ks)

# single flight: 8 concurrent identical queries -> 1 execution
rc2 = ResultCache(wh, wait_timeout=10.0)
kk = CacheKey("SELECT heavy", (("default.t", 9, "z"),))
executions = []
results = []
lock = threading.Lock()


def worker():
    r = rc2.lookup(kk)
    if r.status == "miss":
        with lock:
            executions.append(1)
        time.sleep(0.2)  # simulate work
        rc2.admit(kk, [(42,)])
        results.append([(42,)])
    else:
        results.append(r.rows)


threads = [threading.Thread(target=worker) for _ in range(8)]
for t in threads:
    t.start()
for t in threads:
    t.join()
check("single flight one execution", len(executions) == 1)
check("all eight got rows", len(results) == 8 and all(r == [(42,)] for r in results))
check("seven waited", rc2.counters.wait_hits == 7)

# failed owner releases waiters to their own execution
rc3 = ResultCache(wh, wait_timeout=10.0)
kf = CacheKey("SELECT doomed", (("default.t", 9, "z"),))
outcomes = []


def owner():
    r = rc3.lookup(kf)
    time.sleep(0.2)
    rc3.fail(kf)
    outcomes.append(("owner", r.owner))


def waiter():
    time.sleep(0.05)
    r = rc3.lookup(kf)
    outcomes.append(("waiter", r.status, r.waited))


ts = [threading.Thread(target=owner)] + [threading.Thread(target=waiter) for _ in range(3)]
for t in ts:
    t.start()
for t in ts:
    t.join()
waiters = [o for o in outcomes if o[0] == "waiter"]
check("failed owner wakes waiters to miss",
      all(o[1] == "miss" and o[2] for o in waiters) and rc3.counters.wait_fallbacks == 3)

# expunge: mismatched fingerprints and LRU eviction
rc4 = ResultCache(wh, total_cap_bytes=250)
ka = CacheKey("SELECT a", (("default.t", 1, "d1"),))
kb = CacheKey("SELECT b", (("default.t", 1, "d1"),))
rc4.lookup(ka)
rc4.admit(ka, [("a" * 90,)])
rc4.lookup(kb)
rc4.admit(kb, [("b" * 90,)])
check("both resident", rc4.stats()["entries"] == 2)
rc4.lookup(ka)  # touch a so b is the LRU victim
kc = CacheKey("SELECT c", (("default.t", 1, "d1"),))
rc4.lookup(kc)
rc4.admit(kc, [("c" * 90,)])
check("lru evicts least-recently-hit", rc4.counters.evicted >= 1
      and rc4.lookup(ka).status == "hit")
n = rc4.expunge(lambda q: (2, "d2"))
check("expunge drops mismatched", rc4.stats()["entries"] == 0 or n >= 1)

print("all result-cache checks passed")
