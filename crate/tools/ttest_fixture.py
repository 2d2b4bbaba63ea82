"""Regenerates the paired t-test fixture with scipy.stats.ttest_rel.

Run from the repository root:  python3 tools/ttest_fixture.py
"""
import json

import numpy as np
from scipy import stats

rng = np.random.default_rng(7)
n = 10
baseline = np.round(rng.uniform(0.3, 0.7, size=n), 6)
e = rng.normal(size=n)
e = (e - e.mean()) / e.std(ddof=1)
target_t = 2.2622
diff = e * 0.05 + target_t * 0.05 / np.sqrt(n)
treatment = np.round(baseline + diff, 6)
res = stats.ttest_rel(treatment, baseline)
out = {
    "oracle": f"scipy {__import__('scipy').__version__} stats.ttest_rel(treatment, baseline)",
    "baseline": baseline.tolist(),
    "treatment": treatment.tolist(),
    "t_statistic": float(res.statistic),
    "p_value": float(res.pvalue),
    "mean_diff": float(np.mean(treatment - baseline)),
}
print(out)
with open("crates/core/tests/fixtures/paired_t_test.json", "w") as fh:
    json.dump(out, fh, indent=2)
    fh.write("\n")
