"""Classifier-derived reward for contact skills.

A small convolutional classifier scores top-down RGB frames for goal
attainment (nu in [0, 1]). The reward collapses that score to a shaped
scalar with a success threshold kappa, and is gated to zero whenever the
view is occluded, so the policy is never paid on frames it cannot verify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import load_tensors, save_tensors

KAPPA = 0.8


@dataclass
class RewardConfig:
    kappa: float = KAPPA


class GoalClassifier:
    """64x64 RGB -> goal score nu in [0, 1]."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.net = nn.LayerStack(
            [
                nn.Conv2d(3, 8, 3, stride=2, pad=1, rng=rng, name="conv0"),
                nn.Relu(),
                nn.Conv2d(8, 16, 3, stride=2, pad=1, rng=rng, name="conv1"),
                nn.Relu(),
                nn.Conv2d(16, 16, 3, stride=2, pad=1, rng=rng, name="conv2"),
                nn.Relu(),
                nn.MaxPool(2),
                nn.Flatten(),
                nn.Dense(16 * 4 * 4, 64, rng, name="fc0"),
                nn.Relu(),
                nn.Dense(64, 1, rng, name="fc1"),
            ],
            name="goal",
        )

    @staticmethod
    def _prep(rgb):
        x = np.asarray(rgb, dtype=np.float32) / 255.0 - 0.5
        if x.ndim == 3:
            x = x[None]
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def logits(self, rgb):
        return self.net.forward(self._prep(rgb))

    def score(self, rgb):
        """nu for a single frame or a batch; in [0, 1]."""
        s = nn.sigmoid(self.logits(rgb))[:, 0]
        return float(s[0]) if np.asarray(rgb).ndim == 3 else s

    def save(self, path):
        save_tensors(path, self.net.state_dict())

    @classmethod
    def load(cls, path, seed=0):
        model = cls(seed=seed)
        model.net.load_state_dict(load_tensors(path))
        return model


def reward(nu, occluded, config=RewardConfig()):
    """Shaped reward: 0 when occluded, 1 at/above kappa, nu - 1 otherwise."""
    if occluded:
        return 0.0
    nu = float(nu)
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu={nu} outside [0, 1]")
    if nu >= config.kappa:
        return 1.0
    return nu - 1.0


def frame_reward(classifier, frame_rgb, occluded, config=RewardConfig()):
    if occluded:
        return 0.0, 0.0
    nu = classifier.score(frame_rgb)
    return reward(nu, False, config), nu


def train_goal_classifier(dataset, seed=0, epochs=40, batch_size=32, lr=1e-3,
                          patience=6, verbose=False):
    """Fit the classifier on a labelled goal dataset; returns (model, report).

    The positive class is rare (goal frames vs a 10x pool of early frames),
    so positives are upweighted to balance the loss.
    """
    train = dataset.subset("train")
    held = dataset.subset("heldout")
    if len(train) == 0 or train.labels.min() == train.labels.max():
        raise ValueError("goal dataset needs both classes in the training split")
    pos_frac = float(train.labels.mean())
    w_pos = 0.5 / pos_frac
    w_neg = 0.5 / (1.0 - pos_frac)

    model = GoalClassifier(seed=seed)
    opt = nn.Adam(model.net.params(), lr=lr)
    rng = np.random.default_rng(seed)
    best = -1.0
    best_state = None
    stall = 0
    history = []
    for epoch in range(epochs):
        idx = rng.permutation(len(train))
        for s in range(0, len(idx), batch_size):
            sel = idx[s : s + batch_size]
            y = train.labels[sel].astype(np.float32)[:, None]
            logits = model.logits(train.images[sel])
            w = np.where(y > 0.5, w_pos, w_neg).astype(np.float32)
            p = nn.sigmoid(logits)
            dlogits = w * (p - y) / len(sel)
            model.net.backward(dlogits)
            opt.step()
            opt.zero_grad()
        acc = _balanced_accuracy(model, held)
        history.append(dict(epoch=epoch, heldout_balanced_acc=acc))
        if verbose:
            print(f"goal epoch {epoch}: balanced acc {acc:.3f}")
        if acc > best + 1e-4:
            best = acc
            best_state = model.net.state_dict()
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    if best_state is not None:
        model.net.load_state_dict(best_state)
    report = dict(heldout_balanced_acc=best, epochs=len(history), history=history,
                  positive_fraction=pos_frac)
    return model, report


def _balanced_accuracy(model, split, batch=128):
    hits = np.zeros(2)
    totals = np.zeros(2)
    for s in range(0, len(split), batch):
        sl = slice(s, s + batch)
        pred = nn.sigmoid(model.logits(split.images[sl]))[:, 0] >= 0.5
        y = split.labels[sl].astype(bool)
        for cls in (0, 1):
            m = y == bool(cls)
            totals[cls] += m.sum()
            hits[cls] += (pred[m] == bool(cls)).sum()
    with np.errstate(invalid="ignore"):
        per_class = hits / np.maximum(totals, 1)
    return float(per_class[totals > 0].mean())
