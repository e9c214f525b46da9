"""Serve six tenants with each deployment strategy and compare how many
parameter bytes stay resident, and how many expert invocations each needed.

Everything runs in this process on the simulated platform, so the numbers
are exact and repeatable. Use the CLI (`serverless-moe run --strategy all`)
for the same experiment across real processes."""
from serverless_moe.harness import StrategyConfig, run_strategy

rows = []
for kind in ("baseline", "local", "shared", "private"):
    report = run_strategy(StrategyConfig(kind, tenants=6, requests=5))
    rows.append((kind, report))
    assert not report.degraded

baseline = rows[0][1].per_tenant_bytes
print(f"{'strategy':<9} {'expert bytes':>12} {'trunk bytes':>12} {'per tenant':>11} {'vs baseline':>11} {'invocations':>11}")
for kind, r in rows:
    print(f"{kind:<9} {r.expert_bytes:>12} {r.trunk_bytes:>12} {r.per_tenant_bytes:>11.0f} "
          f"{r.per_tenant_bytes / baseline:>11.3f} {r.invocations:>11}")

texts = {kind: r.texts() for kind, r in rows}
print("identical outputs across strategies:", len({tuple(sorted(t.items())) for t in texts.values()}) == 1)
