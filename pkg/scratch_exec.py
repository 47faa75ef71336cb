import random
import sys
import tempfile
from decimal import Decimal
from pathlib import Path

sys.path.insert(0, "/root/pkg/src")

from deltaforge.catalog import Catalog
from deltaforge.errors import BudgetExceeded
from deltaforge.executor import ExecContext, execute_plan, format_profile
from deltaforge.chunkcache import ChunkCache
from deltaforge.plan import optimize, resolve_query, explain, PlannerConfig
from deltaforge.schema import (
    BOOL, Column, FLOAT64, INT64, STRING, TableDef, decimal_type,
)
from deltaforge.sql.parser import parse_statement as parse
from deltaforge.storage.write import TxnWriter
from deltaforge.txn import WriteIdList

tmp = tempfile.mkdtemp(prefix="dfexec")
wh = Path(tmp)
cat = Catalog(wh)

sales = TableDef("default", "sales", (
    Column("item_id", INT64), Column("qty", INT64),
    Column("price", decimal_type(10, 2)),
), partition_columns=(Column("d", INT64),))
item = TableDef("default", "item", (
    Column("item_id", INT64), Column("category", STRING),
))
dates = TableDef("default", "dates", (
    Column("d", INT64), Column("year", INT64),
))
for t in (sales, item, dates):
    cat.create_table(t)

rng = random.Random(7)
w = TxnWriter(wh, txn_id=1)

sales_rows = []   # raw (item_id, qty, price_scaled, d)
for d in range(1, 6):
    part = []
    for i in range(200):
        iid = rng.randrange(50)
        qty = rng.randrange(1, 6)
        price = None if rng.random() < 0.05 else rng.randrange(100, 900)
        part.append((iid, qty, price))
        sales_rows.append((iid, qty, price, d))
    n, st = w.write_insert_delta(sales, (d,), 1, part)
    cat.add_partition("default.sales", (d,))
    cat.merge_stats("default.sales", (d,), st)

item_rows = [(i, f"c{i % 7}") for i in range(50)]
n, st = w.write_insert_delta(item, (), 1, item_rows)
cat.merge_stats("default.item", (), st)

dates_rows = [(d, 2019 + (d % 3)) for d in range(1, 6)]
n, st = w.write_insert_delta(dates, (), 1, dates_rows)
cat.merge_stats("default.dates", (), st)
w.commit()

def wil_of(tdef):
    return WriteIdList(tdef.qualified_name, 1, frozenset(), frozenset())

cache = ChunkCache(8 << 20)

def run(sql, budget=1 << 30, spill=64 << 20, show=False, config=None):
    stmt = parse(sql)
    res = resolve_query(stmt, cat)
    plan = optimize(res.node, cat, wil_of, config=config)
    if show:
        print(explain(plan))
    ctx = ExecContext(catalog=cat, memory_budget_bytes=budget, cache=cache,
                      sort_spill_bytes=spill)
    rows, stats = execute_plan(plan, ctx)
    return rows, stats, [c.name for c in plan.root.schema], ctx

def pipe_price(raw):
    return None if raw is None else Decimal(raw).scaleb(-2)

ok = True
def check(name, got, want, ordered=False):
    global ok
    g = got if ordered else sorted(got, key=repr)
    wnt = want if ordered else sorted(want, key=repr)
    if g == wnt:
        print(f"PASS {name} ({len(got)} rows)")
    else:
        ok = False
        print(f"FAIL {name}\n  got  {g[:6]}\n  want {wnt[:6]}")

# 1. filter + decimal residual
rows, st, names, _ = run(
    "SELECT item_id, price FROM sales WHERE price > 3.50 AND qty = 2")
want = [(r[0], pipe_price(r[2])) for r in sales_rows
        if r[2] is not None and pipe_price(r[2]) > Decimal("3.50") and r[1] == 2]
check("decimal filter", rows, want)

# 2. join + aggregate + index reducer
rows, st, names, _ = run(
    "SELECT i.category, sum(s.qty) AS q FROM sales s JOIN item i "
    "ON s.item_id = i.item_id WHERE i.category = 'c3' GROUP BY i.category",
    show=True)
cats = dict(item_rows)
want_sum = sum(r[1] for r in sales_rows if cats[r[0]] == "c3")
check("reducer join agg", rows, [("c3", want_sum)])

# 3. partition-variant reducer
rows, st, names, _ = run(
    "SELECT sum(s.qty) AS q FROM sales s JOIN dates dd ON s.d = dd.d "
    "WHERE dd.year = 2021", show=True)
years = dict(dates_rows)
want_sum = sum(r[1] for r in sales_rows if years[r[3]] == 2021)
check("partition reducer", rows, [(want_sum,)])
parts_scanned = [o.scan.partitions_scanned for o in st.operators
                 if o.scan is not None and "sales" in o.label]
print("   sales partitions scanned:", parts_scanned)

# 4. order by nulls (asc nulls first, desc nulls last)
rows, st, names, _ = run("SELECT price FROM sales ORDER BY price LIMIT 5")
print("PASS asc head" if all(r[0] is None for r in rows) else "FAIL asc nulls first", rows)
rows, st, names, _ = run("SELECT price FROM sales ORDER BY price DESC LIMIT 3")
mx = max(pipe_price(r[2]) for r in sales_rows if r[2] is not None)
check("desc head", rows, [(mx,)] * 1 + rows[1:], ordered=True)  # top is max, not null

# 5. LIMIT 0 short-circuit
rows, st, names, _ = run("SELECT item_id FROM sales LIMIT 0")
tot = st.scan_totals()
assert rows == [] and tot.row_groups_read == 0, (rows, tot)
print("PASS limit0 zero counters")

# 6. global aggregate over empty input
rows, st, names, _ = run("SELECT count(*) AS c, sum(qty) AS s2 FROM sales WHERE qty > 999")
check("empty global agg", rows, [(0, None)])

# 7. union of identical aggregates -> spool once
rows, st, names, ctx = run(
    "SELECT item_id, count(*) AS c FROM sales GROUP BY item_id "
    "UNION ALL SELECT item_id, count(*) AS c FROM sales GROUP BY item_id")
from collections import Counter
cnt = Counter(r[0] for r in sales_rows)
want = [(i, c) for i, c in cnt.items()] * 2
check("union spool rows", rows, want)
scans = [o for o in st.operators if o.kind == "SCAN"]
spools = [o for o in st.operators if o.kind == "SPOOL"]
print(f"   scans={len(scans)} spools={len(spools)}")
assert len(scans) == 1 and len(spools) == 1

# 8. budget exceeded carries partial stats
try:
    rows, st, names, _ = run(
        "SELECT s.item_id, i.category FROM sales s JOIN item i ON s.item_id = i.item_id",
        budget=2000)
    print("FAIL no budget error")
    ok = False
except BudgetExceeded as e:
    ops = e.partial_stats.get("operators", [])
    print("PASS budget exceeded;", len(ops), "partial ops")

# 9. sort spilling with tiny threshold matches in-memory sort
rows_a, _, _, _ = run("SELECT item_id, qty, price FROM sales ORDER BY price DESC, item_id")
rows_b, _, _, ctx = run("SELECT item_id, qty, price FROM sales ORDER BY price DESC, item_id",
                        spill=2000)
check("spill sort", rows_b, rows_a, ordered=True)
assert not (wh / "_tmp").exists() or not any((wh / "_tmp").iterdir())
print("PASS tmp cleaned")

# 10. 3-way join vs nested-loop oracle
rows, st, names, _ = run(
    "SELECT i.category, dd.year, sum(s.qty) AS q FROM sales s "
    "JOIN item i ON s.item_id = i.item_id JOIN dates dd ON s.d = dd.d "
    "WHERE i.category IN ('c1','c2') GROUP BY i.category, dd.year")
agg = {}
for r in sales_rows:
    c = cats[r[0]]
    if c in ("c1", "c2"):
        k = (c, years[r[3]])
        agg[k] = agg.get(k, 0) + r[1]
check("3way join agg", rows, [(c, y, q) for (c, y), q in agg.items()])

# 11. distinct + order
rows, st, names, _ = run("SELECT DISTINCT qty FROM sales ORDER BY qty")
check("distinct", rows, [(q,) for q in sorted({r[1] for r in sales_rows})], ordered=True)

# 12. count distinct + avg
rows, st, names, _ = run("SELECT count(DISTINCT item_id) AS cd, avg(qty) AS a FROM sales")
want_avg = sum(r[1] for r in sales_rows) / len(sales_rows)
got = rows[0]
assert got[0] == len({r[0] for r in sales_rows}), got
assert abs(got[1] - want_avg) < 1e-9, (got, want_avg)
print("PASS count distinct / avg")

# 13. profile dump
rows, st, names, _ = run(
    "SELECT i.category, sum(s.qty) AS q FROM sales s JOIN item i "
    "ON s.item_id = i.item_id GROUP BY i.category ORDER BY q DESC LIMIT 3")
print(format_profile(st))

print("ALL OK" if ok else "FAILURES PRESENT")
