"""Check analytic gradients against finite differences.

Every differentiable op has a named test case; this runs each of them over
a few seeds and prints the worst relative error. Anything above 1e-4 is a
bug in the backward pass.
"""
from vmcr.verification import CASES, run_suite

entries = run_suite(seeds=3)
print(f"{'op':<16} {'worst rel err':>14}  status")
for e in entries:
    status = "ok" if e.passed else "FAIL"
    print(f"{e.op:<16} {e.max_rel_error:>14.3e}  {status}")

assert all(e.passed for e in entries)
print(f"\nall {len(CASES)} ops pass at 3 seeds each")
