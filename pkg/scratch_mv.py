import random
import sys
import tempfile
from decimal import Decimal
from pathlib import Path

sys.path.insert(0, "/root/pkg/src")

from deltaforge import matview
from deltaforge.catalog import Catalog
from deltaforge.errors import RebuildInProgress
from deltaforge.executor import ExecContext, execute_plan
from deltaforge.plan import optimize, resolve_query, PlannerConfig
from deltaforge.plan.nodes import ScanNode
from deltaforge.plan.optimizer import wil_binder
from deltaforge.schema import Column, INT64, STRING, TableDef, decimal_type
from deltaforge.sql.parser import parse_statement
from deltaforge.storage.read import ScanRequest, snapshot_read, DirectIO
from deltaforge.storage.write import TxnWriter
from deltaforge.txn import TxnManager

tmp = tempfile.mkdtemp(prefix="dfmv")
wh = Path(tmp)
cat = Catalog(wh)
tm = TxnManager(wh)

ss = TableDef("default", "store_sales", (
    Column("ss_item", INT64), Column("ss_qty", INT64),
    Column("ss_price", decimal_type(10, 2)),
), partition_columns=(Column("ss_year", INT64),))
item = TableDef("default", "item", (
    Column("i_item", INT64), Column("i_cat", STRING),
))
cat.create_table(ss)
cat.create_table(item)


def insert(table, pkey, rows):
    t = tm.open_txn()
    wid = tm.allocate_write_id(t, table.qualified_name)
    w = TxnWriter(wh, t)
    n, st = w.write_insert_delta(table, pkey, wid, rows)
    w.commit()
    tm.commit_txn(t)
    if table.is_partitioned:
        cat.add_partition(table.qualified_name, pkey)
    cat.merge_stats(table.qualified_name, pkey, st)


rng = random.Random(11)
for year in (2014, 2015, 2016, 2017):
    rows = []
    for _ in range(120):
        qty = None if rng.random() < 0.04 else rng.randrange(1, 10)
        price = None if rng.random() < 0.04 else rng.randrange(100, 5000)
        rows.append((rng.randrange(20), qty, price))
    insert(ss, (year,), rows)
insert(item, (), [(i, f"c{i % 6}") for i in range(20)])


def wil_now():
    return wil_binder(tm, tm.get_snapshot())


def run(sql, with_mv=True, show_scans=False):
    stmt = parse_statement(sql)
    res = resolve_query(stmt, cat)
    wil_of = wil_now()
    config = PlannerConfig()
    if with_mv:
        config.mv_candidates = matview.candidate_source(cat, wil_of)
    else:
        config.mv_rewrite_enabled = False
    plan = optimize(res.node, cat, wil_of, config=config)
    scans = sorted({n.table.qualified_name for n in plan.walk()
                    if isinstance(n, ScanNode)})
    sparts = {n.table.qualified_name: n.partitions for n in plan.walk()
              if isinstance(n, ScanNode)}
    ctx = ExecContext(catalog=cat)
    rows, _ = execute_plan(plan, ctx)
    if show_scans:
        print("   scans:", scans)
    return rows, scans, sparts


def canon(rows):
    return sorted(rows, key=repr)


def check(name, ok):
    print(("PASS" if ok else "FAIL"), name)
    if not ok:
        sys.exit(1)


MV_SQL = (
    "CREATE MATERIALIZED VIEW mv_sales AS "
    "SELECT ss_year, i_cat, sum(ss_qty) AS qty_sum, count(ss_qty) AS qty_cnt, "
    "count(*) AS cnt, sum(ss_price) AS price_sum, count(ss_price) AS price_cnt "
    "FROM store_sales, item WHERE ss_item = i_item AND ss_year <= 2016 "
    "GROUP BY ss_year, i_cat"
)

# 1. create + initial full rebuild
stmt = parse_statement(MV_SQL)
rec = matview.create_materialized_view(cat, stmt)
rep = matview.rebuild(cat, tm, "default.mv_sales")
check("initial rebuild is full", rep.mode == "full" and rep.rows_written > 0)

defn = ("SELECT ss_year, i_cat, sum(ss_qty), count(ss_qty), count(*), "
        "sum(ss_price), count(ss_price) FROM store_sales, item "
        "WHERE ss_item = i_item AND ss_year <= 2016 GROUP BY ss_year, i_cat")
oracle, _, _ = run(defn, with_mv=False)
got, _, _ = run("SELECT * FROM mv_sales", with_mv=False)
check("mv rows equal definition output", canon(got) == canon(oracle))

# 2. FULL containment and rewrite
q1 = ("SELECT i_cat, sum(ss_qty) AS s, count(*) AS n FROM store_sales, item "
      "WHERE ss_item = i_item AND ss_year <= 2016 GROUP BY i_cat")
view = matview.load_view(cat, rec)
qf = matview.extract_spja(resolve_query(parse_statement(q1), cat).node)
cr = matview.check_containment(qf, view)
check("q1 containment FULL", cr.kind == "FULL" and not cr.compensation_cols)
rows_mv, scans, _ = run(q1)
rows_direct, scans_direct, _ = run(q1, with_mv=False)
check("q1 rewrite fires", scans == ["default.mv_sales"])
check("q1 rows equal", canon(rows_mv) == canon(rows_direct))

# 3. tighter filter needs compensation
q_comp = ("SELECT i_cat, count(*) AS n FROM store_sales, item "
          "WHERE ss_item = i_item AND ss_year <= 2016 AND i_cat = 'c3' "
          "GROUP BY i_cat")
qf = matview.extract_spja(resolve_query(parse_statement(q_comp), cat).node)
cr = matview.check_containment(qf, view)
check("compensation detected", cr.kind == "FULL" and cr.compensation_cols == ("default.item.i_cat",))
a, scans, _ = run(q_comp)
b, _, _ = run(q_comp, with_mv=False)
check("compensated rows equal", scans == ["default.mv_sales"] and canon(a) == canon(b))

# 4. PARTIAL: wider range on the partition column
q2 = ("SELECT i_cat, sum(ss_qty) AS s, count(*) AS n FROM store_sales, item "
      "WHERE ss_item = i_item AND ss_year <= 2017 GROUP BY i_cat")
qf = matview.extract_spja(resolve_query(parse_statement(q2), cat).node)
cr = matview.check_containment(qf, view)
check("q2 containment PARTIAL", cr.kind == "PARTIAL"
      and cr.residual_col == "default.store_sales.ss_year"
      and cr.residual.lo == 2016 and cr.residual.lo_strict
      and cr.residual.hi == 2017 and not cr.residual.hi_strict)
a, scans, sparts = run(q2)
b, _, _ = run(q2, with_mv=False)
check("q2 rewrite fires", "default.mv_sales" in scans and "default.store_sales" in scans)
check("q2 residual prunes partitions",
      sparts["default.store_sales"] is not None
      and len(sparts["default.store_sales"]) == 1)
check("q2 rows equal", canon(a) == canon(b))

# 5. avg derived from sum and count
q_avg = ("SELECT i_cat, avg(ss_qty) AS a FROM store_sales, item "
         "WHERE ss_item = i_item AND ss_year <= 2016 GROUP BY i_cat")
a, scans, _ = run(q_avg)
b, _, _ = run(q_avg, with_mv=False)
check("avg rollup equal", scans == ["default.mv_sales"] and canon(a) == canon(b))

q_avg2 = ("SELECT i_cat, avg(ss_qty) AS a FROM store_sales, item "
          "WHERE ss_item = i_item AND ss_year <= 2017 GROUP BY i_cat")
a, scans, _ = run(q_avg2)
b, _, _ = run(q_avg2, with_mv=False)
check("avg partial rollup equal", "default.mv_sales" in scans and canon(a) == canon(b))

# 6. global count, incl. an empty compensated slice
q_cnt = ("SELECT count(*) AS n FROM store_sales, item "
         "WHERE ss_item = i_item AND ss_year <= 2016")
a, scans, _ = run(q_cnt)
b, _, _ = run(q_cnt, with_mv=False)
check("global count equal", scans == ["default.mv_sales"] and a == b)

q_cnt0 = ("SELECT count(*) AS n FROM store_sales, item "
          "WHERE ss_item = i_item AND ss_year <= 2016 AND i_cat = 'nope'")
a, scans, _ = run(q_cnt0)
b, _, _ = run(q_cnt0, with_mv=False)
check("empty global count equal", scans == ["default.mv_sales"] and a == b == [(0,)])

# 7. staleness: source change with window 0 disables rewriting
new_2015 = [(rng.randrange(25), rng.randrange(1, 10), rng.randrange(100, 5000))
            for _ in range(40)]
insert(ss, (2015,), new_2015)
insert(ss, (2017,), [(1, 2, 300)])
check("stale view detected", not matview.is_fresh(rec, cat, wil_now()))
a, scans, _ = run(q1)
b, _, _ = run(q1, with_mv=False)
check("stale view not used", scans != ["default.mv_sales"] and canon(a) == canon(b))

# 8. incremental rebuild after insert-only changes
rep = matview.rebuild(cat, tm, "default.mv_sales")
check("insert-only rebuild incremental", rep.mode == "incremental")
oracle, _, _ = run(defn, with_mv=False)
got, _, _ = run("SELECT * FROM mv_sales", with_mv=False)
check("incremental equals recompute", canon(got) == canon(oracle))
a, scans, _ = run(q1)
check("rewrite back after rebuild", scans == ["default.mv_sales"])

rep = matview.rebuild(cat, tm, "default.mv_sales")
check("unchanged rebuild noop", rep.mode == "noop")

# 9. a delete forces the full path
req = ScanRequest(table=ss, wil=wil_now()(ss), partitions=[(2015,)],
                  include_record_ids=True)
recs = list(snapshot_read(wh, req, io=DirectIO()))
victims = [r[0] for r in recs[:5]]
t = tm.open_txn()
wid = tm.allocate_write_id(t, ss.qualified_name)
w = TxnWriter(wh, t)
w.write_delete_delta(ss, (2015,), wid, victims)
w.commit()
tm.record_write_set(t, ss.qualified_name, victims)
tm.commit_txn(t)
rep = matview.rebuild(cat, tm, "default.mv_sales")
check("delete forces full rebuild", rep.mode == "full")
oracle, _, _ = run(defn, with_mv=False)
got, _, _ = run("SELECT * FROM mv_sales", with_mv=False)
check("full rebuild equals recompute", canon(got) == canon(oracle))

# 10. rebuild mutual exclusion
lock = matview._rebuild_lock(cat, "default.mv_sales")
lock.acquire()
try:
    try:
        matview.rebuild(cat, tm, "default.mv_sales")
        check("concurrent rebuild rejected", False)
    except RebuildInProgress:
        check("concurrent rebuild rejected", True)
finally:
    lock.release()

# 11. projection (no aggregate) view
MVP_SQL = ("CREATE MATERIALIZED VIEW mv_big AS "
           "SELECT ss_item, ss_qty, ss_price FROM store_sales WHERE ss_qty >= 5")
rec2 = matview.create_materialized_view(cat, parse_statement(MVP_SQL))
matview.rebuild(cat, tm, "default.mv_big")
qp = "SELECT sum(ss_qty) AS s, count(*) AS n FROM store_sales WHERE ss_qty >= 5"
a, scans, _ = run(qp)
b, _, _ = run(qp, with_mv=False)
check("projection view FULL", scans == ["default.mv_big"] and a == b)

qp2 = ("SELECT ss_item, sum(ss_qty) AS s FROM store_sales WHERE ss_qty >= 7 "
       "GROUP BY ss_item")
a, scans, _ = run(qp2)
b, _, _ = run(qp2, with_mv=False)
check("projection view compensated", scans == ["default.mv_big"] and canon(a) == canon(b))

qp3 = ("SELECT ss_item, sum(ss_qty) AS s, count(*) AS n FROM store_sales "
       "WHERE ss_qty >= 3 GROUP BY ss_item")
qf = matview.extract_spja(resolve_query(parse_statement(qp3), cat).node)
view2 = matview.load_view(cat, rec2)
cr = matview.check_containment(qf, view2)
check("projection view PARTIAL", cr.kind == "PARTIAL")
a, scans, _ = run(qp3)
b, _, _ = run(qp3, with_mv=False)
check("projection partial rows equal", canon(a) == canon(b))

insert(ss, (2016,), [(3, 8, 999), (4, 2, 100)])
rep = matview.rebuild(cat, tm, "default.mv_big")
check("projection incremental append", rep.mode == "incremental"
      and rep.rows_written == 1 and rep.rows_deleted == 0)
oracle, _, _ = run("SELECT ss_item, ss_qty, ss_price FROM store_sales "
                   "WHERE ss_qty >= 5", with_mv=False)
got, _, _ = run("SELECT * FROM mv_big", with_mv=False)
check("projection rows equal", canon(got) == canon(oracle))

# 12. raw-row query never uses an aggregated view
qraw = ("SELECT ss_year, ss_qty FROM store_sales, item "
        "WHERE ss_item = i_item AND ss_year <= 2016")
qf = matview.extract_spja(resolve_query(parse_statement(qraw), cat).node)
cr = matview.check_containment(qf, view)
check("raw rows over SPJA view rejected", cr.kind == "NONE")

print("all mv checks passed")
