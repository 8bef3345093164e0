"""
Train the toy classifier on a small synthetic corpus and score it
=================================================================

Takes a couple of minutes on one CPU core; everything lands in a
temporary directory.
"""

import os
import tempfile

from lungsound.evaluation import TaskId
from lungsound.model import ModelConfig
from lungsound.synth import synthesize_corpus
from lungsound.ingest import EventLabel
from lungsound.trainer import TrainConfig, evaluate, train_task

base = tempfile.mkdtemp(prefix="toy_train_")
cache = os.path.join(base, "cache")

# 24 normal + 24 wheeze event recordings, fixed seed
corpus = synthesize_corpus(os.path.join(base, "corpus"), level="event",
                           n_per_class=24, seed=0,
                           classes=[EventLabel.Normal, EventLabel.Wheeze])
print(f"corpus of {len(corpus)} recordings under {base}")

# binary normal-vs-adventitious task, class-weighted focal loss
config = TrainConfig(task=TaskId.Task1_1, epochs=30, batch_size=16,
                     learning_rate=0.001, seed=0)
model, history = train_task(corpus, corpus, config,
                            model_config=ModelConfig.toy(2), cache_dir=cache)
for ep in history.epochs[::6]:
    print(f"  epoch {ep.epoch:2d}: train loss {ep.train_loss:.3f}, "
          f"val score {ep.val_score:.3f}")

# challenge-style scoring of the trained model
report = evaluate(model, corpus, TaskId.Task1_1, cache)
print(f"SE {report.se:.3f}  SP {report.sp:.3f}  AS {report.as_:.3f}  "
      f"HS {report.hs:.3f}  Score {report.score:.3f}")
