"""Time softmax and agent attention as the token count doubles and fit log-log slopes."""

from agentattn import bench

Ns = [512, 1024, 2048, 4096]
for kernel in ("softmax", "agent"):
    rows = bench.run_scaling(kernel, Ns, n=49, d=64, repeats=5, threads=1)
    for r in rows:
        print(f"{kernel:8s} N={r.N:5d} {r.wall_ns / 1e6:9.2f} ms  {r.mac_count:>13,d} MACs")
    print(f"{kernel:8s} slope {bench.fit_loglog_slope(Ns, [r.wall_ns for r in rows]):.2f}\n")
