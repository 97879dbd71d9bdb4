"""The ten acceptance criteria at their stated tolerances, one PASS/FAIL line each."""
import pytest

from conftest import ACCEPTANCE_LINES

from afreeym.acceptance import CRITERIA


def _checks(k, r):
    """Per-criterion assertions re-derived from the raw numbers, not from the ``passed`` flag."""
    if k == 1:
        return r["max_error"] <= 1e-8 and r["max_seconds"] < 1.0
    if k == 2:
        return r["max_error"] <= 1e-8
    if k == 3:
        d = r["details"]
        return (d["div2"]["exact"] and d["curl2-vec"]["exact"] and len(d["diag2"]["witnesses"]) > 0
                and r["seconds"] < 5.0)
    if k == 4:
        return r["ratio_rel_error"] <= 0.02 and max(r["pairing_drift"].values()) <= 1e-2
    if k == 5:
        return r["max_rel_error"] <= 0.02
    if k == 6:
        return (r["convex_max_error"] <= 1e-6 and r["oracle_max_rel_error"] <= 0.05
                and r["midpoint_value"] <= 0.05 and r["eps_sup_rel_change"] <= 0.02 and r["seconds"] <= 120)
    if k == 7:
        return r["min_slack_generated"] >= -1e-3 and r["fixture_gap"] >= 0.05
    if k == 8:
        return r["convex_max_error"] <= 1e-3 and r["cone_max_error"] <= 1e-3 and r["strengthened_le_weak"]
    if k == 9:
        e = r["errors"]
        return (e[-1] <= 0.15 and all(b < a for a, b in zip(e, e[1:]))
                and all(b0 < 0.1 and b1 < 0.1 for b0, b1 in r["budgets"]) and r["seconds"] <= 300)
    if k == 10:
        d = r["distances"]
        return len(d) == 3 and all(b <= a + 1e-12 for a, b in zip(d, d[1:]))
    raise KeyError(k)


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k):
    r = CRITERIA[k]()
    ok = bool(_checks(k, r))
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok == bool(r["passed"])
    assert ok, r
