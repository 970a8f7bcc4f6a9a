"""Multi-modal state fusion: five sensor inputs -> four contact/occlusion bits.

Trained self-supervised: frames are gathered by a random policy and a
contact-seeking heuristic policy, and every frame is labelled by the
simulator's ground-truth bits, never by hand or by the model itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import control, nn
from .checkpoint import load_tensors, save_tensors
from .env import DF_BOUND, DX_BOUND, SkillEnv
from .sim import CAMERA_DEPTH_SURFACE

RGB_FEATURES = 64
DEPTH_FEATURES = 32
LOWDIM_FEATURES = 12
HEAD_WIDTH = RGB_FEATURES + DEPTH_FEATURES + LOWDIM_FEATURES  # 108
LOWDIM_WIDTH = 6 + 96 + 4  # wrench + flattened tactile + joints

BIT_NAMES = ("contact", "contact_type", "tactile", "occluded")


class ImbalanceWarning(UserWarning):
    pass


@dataclass
class StateBits:
    probs: np.ndarray  # (4,) in [0, 1]
    bits: np.ndarray  # (4,) in {0, 1}

    @classmethod
    def from_probs(cls, probs, threshold=0.5):
        probs = np.asarray(probs, dtype=np.float32)
        return cls(probs=probs, bits=(probs >= threshold).astype(np.uint8))


def _norm_rgb(rgb):
    x = rgb.astype(np.float32) / 255.0 - 0.5
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _norm_depth(depth):
    x = (depth.astype(np.float32) - (CAMERA_DEPTH_SURFACE - 0.025)) / 0.05
    return x[:, None]


_WRENCH_SCALE = np.array([1.0, 1.0, 0.2, 2.0, 2.0, 2.0], dtype=np.float32)


def _norm_lowdim(wrench, tactile, joints):
    # friction components stay near unit scale so the tangential-to-normal
    # force ratio (the line-contact cue) survives the shared encoder
    return np.concatenate(
        [
            wrench.astype(np.float32) * _WRENCH_SCALE,
            tactile.reshape(len(tactile), -1).astype(np.float32) * 2.0,
            joints.astype(np.float32) / 2.0,
        ],
        axis=1,
    )


class FusionModel:
    """RGB (64) + depth (32) + low-dim (12) features -> 4 binary heads."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.rgb_encoder = nn.LayerStack(
            [
                nn.Conv2d(3, 8, 3, stride=2, pad=1, rng=rng, name="conv0"),
                nn.Relu(),
                nn.Conv2d(8, 16, 3, stride=2, pad=1, rng=rng, name="conv1"),
                nn.Relu(),
                nn.Conv2d(16, 16, 3, stride=2, pad=1, rng=rng, name="conv2"),
                nn.Relu(),
                nn.Conv2d(16, 16, 3, stride=2, pad=1, rng=rng, name="conv3"),
                nn.Relu(),
                nn.Flatten(),
                nn.Dense(16 * 4 * 4, RGB_FEATURES, rng, name="fc"),
            ],
            name="fusion/rgb",
        )
        self.depth_encoder = nn.LayerStack(
            [
                nn.Conv2d(1, 8, 3, stride=1, pad=1, rng=rng, name="conv0"),
                nn.Relu(),
                nn.MaxPool(2),
                nn.Conv2d(8, 8, 3, stride=1, pad=1, rng=rng, name="conv1"),
                nn.Relu(),
                nn.MaxPool(2),
                nn.Conv2d(8, 8, 3, stride=1, pad=1, rng=rng, name="conv2"),
                nn.Relu(),
                nn.MaxPool(4),
                nn.Flatten(),
                nn.Dense(8 * 4 * 4, 64, rng, name="fc0"),
                nn.Relu(),
                nn.Dense(64, 48, rng, name="fc1"),
                nn.Relu(),
                nn.Dense(48, DEPTH_FEATURES, rng, name="fc2"),
            ],
            name="fusion/depth",
        )
        self.lowdim_encoder = nn.mlp(
            [LOWDIM_WIDTH, 128, 64, LOWDIM_FEATURES], rng, name="fusion/lowdim"
        )
        self.head = nn.mlp([HEAD_WIDTH, 64, 4], rng, name="fusion/head")

    def stacks(self):
        return [self.rgb_encoder, self.depth_encoder, self.lowdim_encoder, self.head]

    def params(self):
        return [p for s in self.stacks() for p in s.params()]

    def forward(self, rgb, depth, lowdim):
        feats = np.concatenate(
            [
                self.rgb_encoder.forward(rgb),
                self.depth_encoder.forward(depth),
                self.lowdim_encoder.forward(lowdim),
            ],
            axis=1,
        )
        assert feats.shape[1] == HEAD_WIDTH
        return self.head.forward(feats)

    def backward(self, dlogits):
        dfeat = self.head.backward(dlogits)
        self.rgb_encoder.backward(dfeat[:, :RGB_FEATURES])
        self.depth_encoder.backward(
            dfeat[:, RGB_FEATURES : RGB_FEATURES + DEPTH_FEATURES]
        )
        self.lowdim_encoder.backward(dfeat[:, RGB_FEATURES + DEPTH_FEATURES :])

    def zero_grad(self):
        for s in self.stacks():
            s.zero_grad()

    def predict_probs(self, rgb, depth, wrench, tactile, joints):
        logits = self.forward(
            _norm_rgb(rgb), _norm_depth(depth), _norm_lowdim(wrench, tactile, joints)
        )
        return nn.sigmoid(logits)

    def encode(self, frame, threshold=0.5):
        """Deterministic StateBits for one SensorFrame; never mutates weights."""
        probs = self.predict_probs(
            frame.rgb[None],
            np.asarray(frame.depth, dtype=np.float32)[None],
            frame.wrench[None, :6],
            frame.tactile[None],
            frame.joints[None],
        )[0]
        return StateBits.from_probs(probs, threshold)

    def state_dict(self):
        d = {}
        for s in self.stacks():
            d.update(s.state_dict())
        return d

    def save(self, path):
        save_tensors(path, self.state_dict())

    @classmethod
    def load(cls, path, seed=0):
        model = cls(seed=seed)
        d = load_tensors(path)
        for s in model.stacks():
            s.load_state_dict(d)
        return model


# ---------------------------------------------------------------------------
# self-supervised collection
# ---------------------------------------------------------------------------

@dataclass
class FrameSet:
    rgb: np.ndarray  # (N, 64, 64, 3) uint8
    depth: np.ndarray  # (N, 64, 64) float16
    wrench: np.ndarray  # (N, 6) float32
    tactile: np.ndarray  # (N, 4, 24) float32
    joints: np.ndarray  # (N, 4) float32
    labels: np.ndarray  # (N, 4) uint8 ground-truth bits
    split: np.ndarray  # (N,) "train" | "heldout"

    def __len__(self):
        return len(self.labels)

    def subset(self, tag):
        m = self.split == tag
        return FrameSet(self.rgb[m], self.depth[m], self.wrench[m], self.tactile[m],
                        self.joints[m], self.labels[m], self.split[m])


def _random_episode(env, rng, steps, rows):
    """Uniform random offsets, started from a random joint configuration."""
    q0 = np.array(
        [rng.uniform(-1.2, 1.2), rng.uniform(-2.6, 2.6), rng.uniform(-2.6, 2.6),
         rng.uniform(0.0, 0.08)]
    )
    env.reset(seed=int(rng.integers(1 << 30)))
    env.state.q = q0
    tip = control.forward_kinematics(q0, env.sim.arm.links)
    env.setpoint.X_d[0] = np.clip(tip[0], 0.16, 0.54)
    env.setpoint.X_d[1] = np.clip(tip[1], -0.19, 0.19)
    for _ in range(steps):
        dx = rng.uniform(-DX_BOUND, DX_BOUND, size=2)
        dF = rng.uniform(-DF_BOUND, DF_BOUND)
        env.step(dx, dF)
        _snap(env, rows)


def _heuristic_episode(env, rng, steps, rows, force_band):
    """Approach along the contact axis, press to an in-band force, sweep."""
    env.reset(seed=int(rng.integers(1 << 30)))
    env.setpoint.X_d[0] = rng.uniform(0.22, 0.48)
    env.setpoint.X_d[1] = rng.uniform(-0.13, 0.13)
    target = rng.uniform(*force_band)
    heading = rng.uniform(0, 2 * np.pi)
    for t in range(steps):
        dF = np.clip(target - env.setpoint.F_des, -DF_BOUND, DF_BOUND)
        if rng.random() < 0.1:
            heading = rng.uniform(0, 2 * np.pi)
        dx = 0.008 * np.array([np.cos(heading), np.sin(heading)])
        env.step(dx if t > 4 else (0.0, 0.0), dF)
        _snap(env, rows)


def _snap(env, rows):
    frame = env.sense()
    rows.append(
        (
            frame.rgb,
            frame.depth.astype(np.float16),
            frame.wrench,
            frame.tactile,
            frame.joints,
            env.labels().as_array().astype(np.uint8),
        )
    )


def collect_selfsup(task="writing", n_frames=5000, seed=0, env=None,
                    episode_len=25, warn=True):
    """Labelled frame set: 50% random policy, 50% contact heuristic."""
    rng = np.random.default_rng(seed)
    env = env or SkillEnv(task, seed=seed)
    band = env.surface().force_band
    band = (band[0], min(band[1], env.f_max))
    rows = []
    toggle = True
    while len(rows) < n_frames:
        steps = min(episode_len, n_frames - len(rows))
        if toggle:
            _random_episode(env, rng, steps, rows)
        else:
            _heuristic_episode(env, rng, steps, rows, band)
        toggle = not toggle
    rows = rows[:n_frames]
    order = rng.permutation(n_frames)
    n_train = int(round(0.8 * n_frames))
    split = np.empty(n_frames, dtype="<U8")
    split[order[:n_train]] = "train"
    split[order[n_train:]] = "heldout"
    fs = FrameSet(
        rgb=np.stack([r[0] for r in rows]),
        depth=np.stack([r[1] for r in rows]),
        wrench=np.stack([r[2] for r in rows]),
        tactile=np.stack([r[3] for r in rows]),
        joints=np.stack([r[4] for r in rows]),
        labels=np.stack([r[5] for r in rows]),
        split=split,
    )
    if warn:
        for i, name in enumerate(BIT_NAMES):
            minority = min(fs.labels[:, i].mean(), 1 - fs.labels[:, i].mean())
            if minority < 0.05:
                warnings.warn(
                    f"bit '{name}' minority class at {minority:.1%} (<5%)",
                    ImbalanceWarning,
                )
    return fs


def class_balance(frames):
    return {name: float(frames.labels[:, i].mean())
            for i, name in enumerate(BIT_NAMES)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class DivergedError(RuntimeError):
    pass


def _eval_bits(model, fs, batch=256):
    """Per-bit accuracy and the tactile=>contact implication rate."""
    correct = np.zeros(4)
    implied = 0
    tact = 0
    for s in range(0, len(fs), batch):
        sl = slice(s, s + batch)
        probs = model.predict_probs(
            fs.rgb[sl], fs.depth[sl].astype(np.float32), fs.wrench[sl],
            fs.tactile[sl], fs.joints[sl]
        )
        bits = (probs >= 0.5).astype(np.uint8)
        correct += (bits == fs.labels[sl]).sum(axis=0)
        t = bits[:, 2] == 1
        tact += int(t.sum())
        implied += int((bits[t, 0] == 1).sum())
    acc = correct / len(fs)
    implication = implied / tact if tact else 1.0
    return acc, implication


def train_fusion(frames, seed=0, epochs=30, batch_size=64, lr=1e-3, patience=5,
                 verbose=False):
    """Train the fusion model; returns (model, report).

    Stops when the held-out mean accuracy has not improved for `patience`
    epochs. Raises on single-class bits or divergence.
    """
    train = frames.subset("train")
    held = frames.subset("heldout")
    for i, name in enumerate(BIT_NAMES):
        vals = train.labels[:, i]
        if vals.min() == vals.max():
            warnings.warn(f"bit '{name}' single-class in training split",
                          ImbalanceWarning)
    model = FusionModel(seed=seed)
    opt = nn.Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    best = -1.0
    best_state = None
    stall = 0
    history = []
    for epoch in range(epochs):
        idx = rng.permutation(len(train))
        for s in range(0, len(idx), batch_size):
            sel = idx[s : s + batch_size]
            logits = model.forward(
                _norm_rgb(train.rgb[sel]),
                _norm_depth(train.depth[sel].astype(np.float32)),
                _norm_lowdim(train.wrench[sel], train.tactile[sel],
                             train.joints[sel]),
            )
            loss, dlogits = nn.sigmoid_bce(logits, train.labels[sel])
            if not np.isfinite(loss):
                raise DivergedError(f"fusion loss diverged at epoch {epoch}")
            model.backward(dlogits)
            opt.step()
            opt.zero_grad()
        acc, implication = _eval_bits(model, held)
        history.append(dict(epoch=epoch, heldout_acc=[float(a) for a in acc],
                            implication=float(implication)))
        if verbose:
            print(f"fusion epoch {epoch}: " +
                  " ".join(f"{n}={a:.3f}" for n, a in zip(BIT_NAMES, acc)))
        mean_acc = float(acc.mean())
        if mean_acc > best + 1e-4:
            best = mean_acc
            best_state = model.state_dict()
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    if best_state is not None:
        for s in model.stacks():
            s.load_state_dict(best_state)
    acc, implication = _eval_bits(model, held)
    report = dict(
        heldout_acc={n: float(a) for n, a in zip(BIT_NAMES, acc)},
        implication_rate=float(implication),
        epochs=len(history),
        history=history,
        balance=class_balance(frames),
    )
    return model, report
