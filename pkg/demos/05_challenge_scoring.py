"""
Challenge scoring: confusion matrix to SE/SP/AS/HS/Score, plus the report formats
=================================================================================
"""

import numpy as np

from lungsound.evaluation import (
    TaskId, challenge_scores, check_scores, confusion, report, task_class_names,
)

# 2000 binary decisions: row = truth, column = prediction
truth = np.array([0] * 1000 + [1] * 1000)
pred = truth.copy()
rng = np.random.default_rng(1)
pred[rng.choice(1000, 86, replace=False)] = 1          # false alarms
pred[1000 + rng.choice(1000, 109, replace=False)] = 0  # misses
matrix = confusion(pred, truth, 2, task_class_names(TaskId.Task1_1))
print("confusion matrix:")
print(matrix.counts)

# sensitivity pools every non-normal class; specificity is the normal recall
scores = challenge_scores(matrix, TaskId.Task1_1)
print(f"SE {scores.se:.4f}  SP {scores.sp:.4f}  AS {scores.as_:.4f}  "
      f"HS {scores.hs:.4f}  Score {scores.score:.4f}")

# the same row serialized both ways
print(report([scores], fmt="csv"))
print(report([scores], fmt="json"))

# sanity-check any published-style row against the score identities
problems = check_scores(se=0.590, sp=0.843, as_=0.730, hs=0.710, score=0.720)
for message in problems:
    print(f"inconsistent row: {message}")
