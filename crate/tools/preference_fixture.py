"""Writes a 50-pair x 5-vote preference fixture with its tally.

Run from the repository root:  python3 tools/preference_fixture.py
"""
import json
import random
from collections import Counter

rng = random.Random(31)
votes = []
for i in range(50):
    lean = rng.random()
    for _ in range(5):
        votes.append({"pair_id": f"p{i:02d}", "winner": "pipeline" if rng.random() < lean else "baseline"})
rng.shuffle(votes)

tally = Counter()
for v in votes:
    tally[(v["pair_id"], v["winner"])] += 1
pairs = sorted({v["pair_id"] for v in votes})
pipeline_wins = sum(tally[(p, "pipeline")] >= 3 for p in pairs)
baseline_wins = len(pairs) - pipeline_wins
qc_empty = 4

out = {
    "model_tag": "fixture",
    "qc_empty": qc_empty,
    "votes": votes,
    "pipeline_wins": pipeline_wins,
    "baseline_wins": baseline_wins,
    "preference_rate": pipeline_wins / (pipeline_wins + baseline_wins + qc_empty),
}
with open("crates/core/tests/fixtures/preference_votes.json", "w") as f:
    json.dump(out, f, indent=1)
print(pipeline_wins, baseline_wins, out["preference_rate"])
