"""Demonstration generation, segmentation, and goal extraction.

Scripted experts stand in for human teachers: they drive the simulated tool
through task-typical strokes while every frame is recorded at 10 Hz. The
pipeline then finds the frames where the tool-object interaction switches
(interaction keypoints), infers which Cartesian axes were position- vs
force-controlled, and harvests positive/negative goal frames for the reward
classifier.
"""

from __future__ import annotations

import base64
import gzip
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import DF_BOUND, DX_BOUND, SkillEnv
from .sim import GRID, ROI, PEEL_RECT

MASK_RES = 128
DEMO_FORMAT_VERSION = 1
MIN_FRAMES = 20
OBJECT_CLASSES = {"writing": 0, "cleaning": 1, "peeling": 2}
DEFAULT_DEMO_COUNTS = {"writing": 20, "cleaning": 40, "peeling": 30}

MEDIAN_WINDOW = 5  # frames, interaction-bit smoothing before switch detection
ACTION_WINDOW = 10  # frames per action-space voting window
FORCE_AXIS_MIN_N = 0.5  # sustained force for a force-axis vote
POSITION_AXIS_MIN_M = 0.002  # net displacement for a position-axis vote
NEGATIVE_RATIO = 10
NEGATIVE_POOL_FRACTION = 0.30  # of the frames before the second keypoint


class DemoError(ValueError):
    pass


class NoInteractionError(DemoError):
    """A demonstration contains no interaction switches."""


class AmbiguousActionSpaceError(DemoError):
    def __init__(self, votes):
        self.votes = votes
        super().__init__(f"no >=60% majority for axis roles; votes: {votes}")


class TrainingDataError(ValueError):
    pass


@dataclass
class Demonstration:
    """Time-ordered recording of one teaching episode."""

    task: str
    timestamps: np.ndarray  # (T,)
    rgb: np.ndarray  # (T, 64, 64, 3) uint8
    depth: np.ndarray  # (T, 64, 64) float16
    pose: np.ndarray  # (T, 6) float32: x, y, z, yaw, 0, 0
    wrench: np.ndarray  # (T, 6) float32
    interaction: np.ndarray  # (T,) uint8, sim ground truth
    tool_masks: np.ndarray  # (T, MASK_RES*MASK_RES//8) uint8 packed bits
    object_mask: np.ndarray  # (MASK_RES, MASK_RES) uint8

    def __len__(self):
        return len(self.timestamps)

    def tool_mask(self, i):
        return np.unpackbits(self.tool_masks[i]).reshape(MASK_RES, MASK_RES)


@dataclass
class PIK:
    """Frame where the interaction condition switches."""

    frame: int
    interacting: bool  # state after the switch
    object_id: int | None = None


@dataclass
class ActionSpec:
    """Partition of Cartesian axes into position- and force-controlled sets."""

    position_axes: tuple
    force_axes: tuple
    dx_bound: float = DX_BOUND
    df_bound: float = DF_BOUND

    def __post_init__(self):
        if set(self.position_axes) & set(self.force_axes):
            raise ValueError("position and force axes must be disjoint")
        if set(self.position_axes) | set(self.force_axes) != {"x", "y", "z"}:
            raise ValueError("axes must cover exactly {x, y, z}")


@dataclass
class GoalDataset:
    images: np.ndarray  # (N, 64, 64, 3) uint8
    labels: np.ndarray  # (N,) uint8, 1 = positive goal
    split: np.ndarray  # (N,) "<U8", "train" | "heldout"

    def subset(self, tag):
        m = self.split == tag
        return GoalDataset(self.images[m], self.labels[m], self.split[m])

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# scripted demonstrations
# ---------------------------------------------------------------------------

def s_curve_points(center=(0.35, 0.0), radius=0.05, spacing=0.008, offset=(0.0, 0.0)):
    """Polyline of an 'S' stroke: two stacked arcs traced top to bottom."""
    cx, cy = center[0] + offset[0], center[1] + offset[1]
    pts = []
    top = np.linspace(np.deg2rad(60), np.deg2rad(270), 80)
    for a in top:
        pts.append((cx + radius * np.cos(a), cy + radius + radius * np.sin(a)))
    bot = np.linspace(np.deg2rad(90), np.deg2rad(-120), 80)
    for a in bot:
        pts.append((cx + radius * np.cos(a), cy - radius + radius * np.sin(a)))
    path = [pts[0]]
    for p in pts[1:]:
        if np.hypot(p[0] - path[-1][0], p[1] - path[-1][1]) >= spacing:
            path.append(p)
    path.append(pts[-1])
    return np.asarray(path)


def raster_points(x_lo=0.17, x_hi=0.53, y_lo=-0.17, y_hi=0.17, pitch=0.065,
                  offset=(0.0, 0.0)):
    """Boustrophedon sweep covering the region of interest."""
    ys = np.arange(y_lo, y_hi + 1e-9, pitch)
    pts = []
    for i, y in enumerate(ys):
        xs = (x_lo, x_hi) if i % 2 == 0 else (x_hi, x_lo)
        pts.append((xs[0] + offset[0], y + offset[1]))
        pts.append((xs[1] + offset[0], y + offset[1]))
    # finishing perimeter lap: the arm tracks the row ends poorly at the
    # workspace fringes, so the border gets a dedicated full-speed sweep
    ex_lo, ex_hi, ey = x_lo - 0.005, x_hi + 0.005, y_hi + 0.015
    lap = [(ex_hi, ey), (ex_lo, ey), (ex_lo, -ey), (ex_hi, -ey), (ex_hi, ey)]
    if abs(pts[-1][0] - x_lo) < 1e-9:
        lap = [(ex_lo, ey), (ex_hi, ey), (ex_hi, -ey), (ex_lo, -ey), (ex_lo, ey)]
    pts += lap
    return np.asarray(pts)


def peel_points(offset=(0.0, 0.0)):
    """Two joined strokes along the long (x) axis of the skin patch."""
    x0, x1 = PEEL_RECT[0] + 0.008, PEEL_RECT[1] - 0.008
    rows = (-0.013, 0.013)
    pts = [
        (x0, rows[0]), (x1, rows[0]),  # first pass
        (x1, rows[1]), (x0, rows[1]),  # cross over, second pass back
    ]
    return np.asarray(pts) + np.asarray(offset)


TASK_PRESS_N = {"writing": 2.5, "cleaning": 3.0, "peeling": 2.5}


class _Recorder:
    def __init__(self, env):
        self.env = env
        self.rows = []

    def snap(self):
        env = self.env
        frame = env.sense()
        labels = env.labels()
        pose4 = env.tip_pose()
        masks = env.sim.instance_masks(env.state, res=MASK_RES)
        self.rows.append(
            dict(
                t=env.state.t,
                rgb=frame.rgb,
                depth=frame.depth.astype(np.float16),
                pose=np.array([pose4[0], pose4[1], pose4[2], pose4[3], 0.0, 0.0],
                              dtype=np.float32),
                wrench=frame.wrench,
                interaction=int(labels.contact),
                tool_mask=np.packbits(masks["tool"].astype(bool)),
                object_mask=masks["object"],
            )
        )

    def build(self, task):
        r = self.rows
        return Demonstration(
            task=task,
            timestamps=np.array([w["t"] for w in r]),
            rgb=np.stack([w["rgb"] for w in r]),
            depth=np.stack([w["depth"] for w in r]),
            pose=np.stack([w["pose"] for w in r]),
            wrench=np.stack([w["wrench"] for w in r]),
            interaction=np.array([w["interaction"] for w in r], dtype=np.uint8),
            tool_masks=np.stack([w["tool_mask"] for w in r]),
            object_mask=r[0]["object_mask"],
        )


def _drive_to(env, rec, target_xy, max_steps=200, tol=1e-4):
    """Step the setpoint toward target_xy at the per-step offset bound.

    A tolerance larger than one step blends waypoints so the tip keeps
    moving through direction changes instead of stopping at each corner.
    """
    for _ in range(max_steps):
        delta = np.asarray(target_xy) - env.setpoint.X_d[:2]
        if np.linalg.norm(delta) < tol:
            return
        env.step(np.clip(delta, -DX_BOUND, DX_BOUND), 0.0)
        rec.snap()


def _ramp_force(env, rec, target, settle=4):
    while abs(env.setpoint.F_des - target) > 1e-9:
        dF = np.clip(target - env.setpoint.F_des, -DF_BOUND, DF_BOUND)
        env.step((0.0, 0.0), dF)
        rec.snap()
    for _ in range(settle):
        env.step((0.0, 0.0), 0.0)
        rec.snap()


def scripted_demonstrate(task, seed=0, count=None, env=None):
    """Generate `count` perturbed expert demonstrations for a task."""
    count = count if count is not None else DEFAULT_DEMO_COUNTS[task]
    rng = np.random.default_rng(seed)
    env = env or SkillEnv(task, seed=seed)
    out = []
    for k in range(count):
        env.reset(seed=1000 + k)
        rec = _Recorder(env)
        offset = rng.uniform(-0.01, 0.01, size=2)
        press = TASK_PRESS_N[task] + rng.uniform(-0.5, 0.5)
        if task == "writing":
            path = s_curve_points(offset=offset)
        elif task == "cleaning":
            path = raster_points(offset=0.25 * offset)
        else:
            path = peel_points(offset=0.3 * offset)
        for _ in range(3):  # free-space frames before any contact
            env.step((0.0, 0.0), 0.0)
            rec.snap()
        _drive_to(env, rec, path[0])
        _ramp_force(env, rec, press)
        blend = 0.02 if task == "cleaning" else 0.004
        for wp in path[1:-1]:
            _drive_to(env, rec, wp, tol=blend)
        _drive_to(env, rec, path[-1])
        _ramp_force(env, rec, 0.0, settle=0)
        for _ in range(6):  # retreat frames so the off-switch is recorded
            env.step((0.0, 0.0), 0.0)
            rec.snap()
        out.append(rec.build(task))
    return out


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def median_filter_bits(bits, window=MEDIAN_WINDOW):
    bits = np.asarray(bits, dtype=np.uint8)
    half = window // 2
    padded = np.pad(bits, half, mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    return (view.sum(axis=1) > half).astype(np.uint8)


def detect_piks(demo_or_bits, bits=None, object_id=None):
    """Interaction keypoints: switch frames of the (smoothed) interaction bit.

    Accepts either a Demonstration (its recorded bits are used) or a raw bit
    sequence. Goal frames are the keypoints after the first.
    """
    if bits is None:
        if isinstance(demo_or_bits, Demonstration):
            bits = demo_or_bits.interaction
            object_id = OBJECT_CLASSES[demo_or_bits.task]
        else:
            bits = demo_or_bits
    smoothed = median_filter_bits(bits)
    switches = np.nonzero(np.diff(smoothed.astype(np.int8)) != 0)[0] + 1
    if len(switches) == 0:
        raise NoInteractionError("no interaction detected in demonstration")
    return [
        PIK(frame=int(i), interacting=bool(smoothed[i]),
            object_id=object_id if smoothed[i] else None)
        for i in switches
    ]


def goal_frames(piks):
    return [p.frame for p in piks[1:]]


def infer_action_space(demo):
    """Vote per Cartesian axis over 10-frame interaction windows."""
    bits = median_filter_bits(demo.interaction)
    idx = np.nonzero(bits)[0]
    if len(idx) < ACTION_WINDOW:
        return ActionSpec(position_axes=("x", "y", "z"), force_axes=())
    votes = {ax: {"force": 0, "position": 0} for ax in "xyz"}
    for start in range(0, len(idx) - ACTION_WINDOW + 1, ACTION_WINDOW):
        w = idx[start : start + ACTION_WINDOW]
        if w[-1] - w[0] != ACTION_WINDOW - 1:
            continue  # window must be contiguous interaction
        pose = demo.pose[w]
        force = demo.wrench[w]
        for ax_i, ax in enumerate("xyz"):
            disp = abs(float(pose[-1, ax_i] - pose[0, ax_i]))
            mean_f = float(np.abs(force[:, ax_i]).mean())
            if mean_f >= FORCE_AXIS_MIN_N and disp < POSITION_AXIS_MIN_M:
                votes[ax]["force"] += 1
            else:
                votes[ax]["position"] += 1
    pos, frc = [], []
    for ax in "xyz":
        total = votes[ax]["force"] + votes[ax]["position"]
        if total == 0:
            pos.append(ax)
            continue
        if votes[ax]["force"] / total >= 0.6:
            frc.append(ax)
        elif votes[ax]["position"] / total >= 0.6:
            pos.append(ax)
        else:
            raise AmbiguousActionSpaceError(votes)
    return ActionSpec(position_axes=tuple(pos), force_axes=tuple(frc))


def infer_action_space_corpus(demos):
    """Majority action spec across a demo corpus (must agree)."""
    specs = [infer_action_space(d) for d in demos]
    first = specs[0]
    for s in specs[1:]:
        if s.position_axes != first.position_axes or s.force_axes != first.force_axes:
            raise AmbiguousActionSpaceError(
                {"corpus": [(s.position_axes, s.force_axes) for s in specs]}
            )
    return first


def extract_goal_dataset(demos, piks_per_demo=None, seed=0):
    """Positive frames at later keypoints; negatives sampled from the start.

    Negatives come only from the first 30% of the frames preceding each
    demo's second keypoint, oversampled 10:1 against positives.
    """
    rng = np.random.default_rng(seed)
    if piks_per_demo is None:
        piks_per_demo = [detect_piks(d) for d in demos]
    pos_imgs, neg_pool = [], []
    usable = 0
    for demo, piks in zip(demos, piks_per_demo):
        if len(piks) < 2:
            continue
        usable += 1
        for f in goal_frames(piks):
            pos_imgs.append(demo.rgb[f])
        t2 = piks[1].frame
        hi = int(np.floor(NEGATIVE_POOL_FRACTION * t2))
        for f in range(hi):
            neg_pool.append(demo.rgb[f])
    if usable == 0:
        raise DemoError("no demonstration carries at least two keypoints")
    n_neg = NEGATIVE_RATIO * len(pos_imgs)
    choice = rng.choice(len(neg_pool), size=n_neg, replace=len(neg_pool) < n_neg)
    images = np.stack(pos_imgs + [neg_pool[i] for i in choice])
    labels = np.array([1] * len(pos_imgs) + [0] * n_neg, dtype=np.uint8)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = int(round(0.8 * len(labels)))
    split = np.array(["train"] * n_train + ["heldout"] * (len(labels) - n_train))
    return GoalDataset(images=images, labels=labels, split=split)


# ---------------------------------------------------------------------------
# interaction network
# ---------------------------------------------------------------------------

class InteractionNet:
    """Mask + pose features -> interaction bits and interacting-object class."""

    FEATURES = 24  # from the mask encoder
    POSE_WIDTH = 12  # two stacked 6-D poses

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.mask_encoder = nn.LayerStack(
            [
                nn.Conv2d(1, 4, 3, stride=2, pad=1, rng=rng, name="conv0"),
                nn.Relu(),
                nn.Conv2d(4, 8, 3, stride=2, pad=1, rng=rng, name="conv1"),
                nn.Relu(),
                nn.Conv2d(8, 8, 3, stride=2, pad=1, rng=rng, name="conv2"),
                nn.Relu(),
                nn.Conv2d(8, 8, 3, stride=2, pad=1, rng=rng, name="conv3"),
                nn.Relu(),
                nn.Flatten(),
                nn.Dense(8 * 8 * 8, 64, rng, name="fc0"),
                nn.Relu(),
                nn.Dense(64, 32, rng, name="fc1"),
                nn.Relu(),
                nn.Dense(32, self.FEATURES, rng, name="fc2"),
            ],
            name="interaction/mask",
        )
        width = self.FEATURES + self.POSE_WIDTH
        self.head = nn.mlp([width, 32, 2], rng, name="interaction/head")
        self.class_head = nn.mlp(
            [width, 32, len(OBJECT_CLASSES)], rng, name="interaction/class"
        )

    def features(self, masks, poses):
        feats = self.mask_encoder.forward(masks)
        both_hands = np.concatenate([poses, poses], axis=1)  # one tool, two slots
        return np.concatenate([feats, both_hands], axis=1)

    def predict_bits(self, masks, poses):
        logits = self.head.forward(self.features(masks, poses))
        return (nn.sigmoid(logits) > 0.5).astype(np.uint8)  # (N, 2) left/right


def _demo_net_inputs(demo, idx):
    masks = np.stack([demo.tool_mask(i) for i in idx]).astype(np.float32)[:, None]
    poses = demo.pose[idx]
    labels = demo.interaction[idx]
    return masks, poses, labels


def train_interaction_net(demos, seed=0, max_frames=1500, epochs=25,
                          batch_size=64, target_acc=0.97, verbose=False):
    """Fit the interaction detector on sim-labelled demo frames.

    Returns (net, heldout_accuracy).
    """
    rng = np.random.default_rng(seed)
    frames = [(d, i) for d in demos for i in range(len(d))]
    if len(frames) > max_frames:
        keep = rng.choice(len(frames), size=max_frames, replace=False)
        frames = [frames[i] for i in keep]
    labels_all = np.array([d.interaction[i] for d, i in frames])
    if labels_all.min() == labels_all.max():
        raise TrainingDataError("interaction labels are single-class")
    order = rng.permutation(len(frames))
    n_train = int(round(0.8 * len(frames)))
    train_idx, held_idx = order[:n_train], order[n_train:]

    def batch_inputs(sel):
        masks = np.stack(
            [frames[i][0].tool_mask(frames[i][1]) for i in sel]
        ).astype(np.float32)[:, None]
        poses = np.stack([frames[i][0].pose[frames[i][1]] for i in sel])
        y = labels_all[sel]
        cls = np.array([OBJECT_CLASSES[frames[i][0].task] for i in sel])
        return masks, poses, y, cls

    net = InteractionNet(seed=seed)
    params = (net.mask_encoder.params() + net.head.params()
              + net.class_head.params())
    opt = nn.Adam(params, lr=1e-3)
    best_acc = 0.0
    for epoch in range(epochs):
        rng.shuffle(train_idx)
        for s in range(0, len(train_idx), batch_size):
            sel = train_idx[s : s + batch_size]
            masks, poses, y, cls = batch_inputs(sel)
            feats = net.features(masks, poses)
            logits = net.head.forward(feats)
            targets = np.stack([np.zeros_like(y), y], axis=1).astype(np.float32)
            loss, dlogits = nn.sigmoid_bce(logits, targets)
            dfeat = net.head.backward(dlogits)
            clogits = net.class_head.forward(feats)
            closs, dclogits = nn.softmax_cross_entropy(clogits, cls)
            dfeat = dfeat + net.class_head.backward(dclogits)
            net.mask_encoder.backward(dfeat[:, : net.FEATURES])
            opt.step()
            opt.zero_grad()
        # held-out accuracy of the right-hand interaction bit
        correct = 0
        for s in range(0, len(held_idx), 256):
            sel = held_idx[s : s + 256]
            masks, poses, y, _ = batch_inputs(sel)
            pred = net.predict_bits(masks, poses)[:, 1]
            correct += int((pred == y).sum())
        acc = correct / len(held_idx)
        best_acc = max(best_acc, acc)
        if verbose:
            print(f"interaction epoch {epoch}: heldout acc {acc:.3f}")
        if acc >= target_acc:
            break
    return net, best_acc


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")


def _unb64(s, dtype, shape):
    return np.frombuffer(base64.b64decode(s), dtype=dtype).reshape(shape).copy()


def write_demo(path, demo):
    """Versioned line-delimited records: one header line, one line per frame."""
    with gzip.open(path, "wt", encoding="utf-8") as f:
        header = dict(
            version=DEMO_FORMAT_VERSION,
            task=demo.task,
            control_hz=100,
            record_hz=10,
            grid=[GRID, GRID],
            mask_res=MASK_RES,
            frames=len(demo),
            object_mask=_b64(np.packbits(demo.object_mask.astype(bool))),
        )
        f.write(json.dumps(header) + "\n")
        for i in range(len(demo)):
            rec = dict(
                t=float(demo.timestamps[i]),
                rgb=_b64(demo.rgb[i]),
                depth=_b64(demo.depth[i].astype(np.float16)),
                pose=[float(v) for v in demo.pose[i]],
                wrench=[float(v) for v in demo.wrench[i]],
                interaction=int(demo.interaction[i]),
                tool_mask=_b64(demo.tool_masks[i]),
            )
            f.write(json.dumps(rec) + "\n")


def read_demo(path):
    with gzip.open(path, "rt", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("version") != DEMO_FORMAT_VERSION:
            raise DemoError(f"unsupported demo format version {header.get('version')}")
        res = header["mask_res"]
        rows = [json.loads(line) for line in f if line.strip()]
    return Demonstration(
        task=header["task"],
        timestamps=np.array([r["t"] for r in rows]),
        rgb=np.stack([_unb64(r["rgb"], np.uint8, (GRID, GRID, 3)) for r in rows]),
        depth=np.stack([_unb64(r["depth"], np.float16, (GRID, GRID)) for r in rows]),
        pose=np.stack([np.array(r["pose"], dtype=np.float32) for r in rows]),
        wrench=np.stack([np.array(r["wrench"], dtype=np.float32) for r in rows]),
        interaction=np.array([r["interaction"] for r in rows], dtype=np.uint8),
        tool_masks=np.stack([_unb64(r["tool_mask"], np.uint8, (res * res // 8,))
                             for r in rows]),
        object_mask=np.unpackbits(
            _unb64(header["object_mask"], np.uint8, (res * res // 8,))
        ).reshape(res, res),
    )


def validate_demo(demo):
    """Check invariants; returns a report dict, raises DemoError on violation."""
    if len(demo) < MIN_FRAMES:
        raise DemoError(f"demo too short: {len(demo)} < {MIN_FRAMES} frames")
    if not np.all(np.diff(demo.timestamps) > 0):
        raise DemoError("timestamps not strictly increasing")
    if demo.object_mask.max() > 1:
        raise DemoError("object mask not binary")
    piks = detect_piks(demo)
    return dict(
        task=demo.task,
        frames=len(demo),
        piks=[(p.frame, p.interacting) for p in piks],
        goal_frames=goal_frames(piks),
        first_contact=int(np.argmax(demo.interaction > 0)),
    )
