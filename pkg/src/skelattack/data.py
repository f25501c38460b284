"""Two-person skeleton interaction data: parsing, synthesis, pair building.

A skeleton frame is N joints of (x, y, depth) coordinates.  Real capture
files store x and y normalized to [0, 1] and depth in [0, 7.8125]; the
synthetic generator stays inside the same ranges so both sources pass
the same validation.  All functions here are pure and safe to call
concurrently.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_JOINTS = 15
X_RANGE = (0.0, 1.0)
Y_RANGE = (0.0, 1.0)
DEPTH_RANGE = (0.0, 7.8125)

CATEGORIES = (
    "approaching",
    "departing",
    "kicking",
    "punching",
    "pushing",
    "hugging",
    "handshaking",
    "exchanging",
)

DEFAULT_HELD_OUT_SETS = frozenset({"s01s02", "s03s04", "s05s02", "s06s04"})

# participant-pair ids assigned round-robin to synthetic records
_SET_ID_POOL = ("s01s02", "s02s03", "s03s04", "s04s05", "s05s02", "s06s04", "s07s01")

_SET_ID_RE = re.compile(r"^s\d{2}s\d{2}$")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


@dataclass
class SkeletonSequence:
    """T ordered frames of N joints, each (x, y, depth)."""

    joints: np.ndarray  # (T, N, 3)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise DataError(f"sequence must be (T, N, 3), got {self.joints.shape}")
        if self.joints.shape[0] < 1:
            raise DataError("sequence must have at least one frame")

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    def flat(self) -> np.ndarray:
        """Frames flattened joint-major to (T, 3N); order is (x, y, depth)."""
        t, n, _ = self.joints.shape
        return self.joints.reshape(t, 3 * n)

    @classmethod
    def from_flat(cls, arr: np.ndarray) -> "SkeletonSequence":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] % 3 != 0:
            raise DataError(f"flat sequence must be (T, 3N), got {arr.shape}")
        return cls(arr.reshape(arr.shape[0], arr.shape[1] // 3, 3))

    def copy(self) -> "SkeletonSequence":
        return SkeletonSequence(self.joints.copy())

    def validate_ranges(self) -> None:
        x, y, d = self.joints[..., 0], self.joints[..., 1], self.joints[..., 2]
        for name, vals, (lo, hi) in (("x", x, X_RANGE), ("y", y, Y_RANGE),
                                     ("depth", d, DEPTH_RANGE)):
            if vals.size and (vals.min() < lo or vals.max() > hi):
                bad = vals.min() if vals.min() < lo else vals.max()
                raise ValidationError(
                    f"{name} coordinate {bad} outside [{lo}, {hi}]")


@dataclass
class InteractionRecord:
    """Paired actor/reactor sequences with a category label and set id."""

    actor: SkeletonSequence
    reactor: SkeletonSequence
    category: str
    set_id: str

    def __post_init__(self):
        if self.actor.num_frames != self.reactor.num_frames:
            raise DataError(
                f"actor has {self.actor.num_frames} frames, "
                f"reactor has {self.reactor.num_frames}")


@dataclass
class DatasetSplit:
    train: list[tuple[SkeletonSequence, SkeletonSequence]] = field(default_factory=list)
    test: list[tuple[SkeletonSequence, SkeletonSequence]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# capture-file parsing

def _infer_from_path(path: Path) -> tuple[str | None, str | None]:
    """Pick category/set id out of directory names like .../s01s02/03/... ."""
    set_id = None
    category = None
    for part in path.parts:
        if _SET_ID_RE.match(part):
            set_id = part
        # category folders are two digits; take folders use three
        elif len(part) == 2 and part.isdigit() and 1 <= int(part) <= len(CATEGORIES):
            category = CATEGORIES[int(part) - 1]
    return category, set_id


def parse_sbu_file(path, category: str | None = None, set_id: str | None = None,
                   strict: bool = True) -> InteractionRecord:
    """Parse a two-person capture file into an InteractionRecord.

    Each line is a frame index followed by 90 comma-separated reals
    (2 persons x 15 joints x 3 coordinates).  In strict mode every value
    is range-checked; the lenient mode also tolerates trailing separators.
    """
    path = Path(path)
    per_person = NUM_JOINTS * 3
    expected = 1 + 2 * per_person
    frames_a: list[np.ndarray] = []
    frames_b: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if not strict:
                while fields and fields[-1].strip() == "":
                    fields.pop()
            if len(fields) != expected:
                raise ParseError(
                    f"expected {expected} fields, got {len(fields)}", line=lineno)
            try:
                values = np.array([float(f) for f in fields[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", line=lineno) from None
            frames_a.append(values[:per_person].reshape(NUM_JOINTS, 3))
            frames_b.append(values[per_person:].reshape(NUM_JOINTS, 3))
    if not frames_a:
        raise ParseError("file contains no frames")
    actor = SkeletonSequence(np.stack(frames_a))
    reactor = SkeletonSequence(np.stack(frames_b))
    if strict:
        actor.validate_ranges()
        reactor.validate_ranges()
    inferred_cat, inferred_set = _infer_from_path(path)
    return InteractionRecord(
        actor=actor,
        reactor=reactor,
        category=category or inferred_cat or "unknown",
        set_id=set_id or inferred_set or "unknown",
    )


def serialize_sbu(record: InteractionRecord) -> str:
    """Render a record back into the capture text layout."""
    lines = []
    flat_a = record.actor.flat()
    flat_b = record.reactor.flat()
    for t in range(record.actor.num_frames):
        fields = [str(t + 1)]
        fields.extend(repr(float(v)) for v in flat_a[t])
        fields.extend(repr(float(v)) for v in flat_b[t])
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON interchange

def record_to_dict(record: InteractionRecord) -> dict:
    return {
        "category": record.category,
        "set_id": record.set_id,
        "actor": record.actor.flat().tolist(),
        "reactor": record.reactor.flat().tolist(),
    }


def record_from_dict(payload: dict) -> InteractionRecord:
    try:
        return InteractionRecord(
            actor=SkeletonSequence.from_flat(np.array(payload["actor"], dtype=np.float64)),
            reactor=SkeletonSequence.from_flat(np.array(payload["reactor"], dtype=np.float64)),
            category=str(payload["category"]),
            set_id=str(payload["set_id"]),
        )
    except KeyError as exc:
        raise ParseError(f"record missing field {exc}") from None


def write_dataset(records: list[InteractionRecord], path) -> None:
    payload = {"records": [record_to_dict(r) for r in records]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_dataset(path) -> list[InteractionRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not a valid dataset file: {exc}") from None
    if not isinstance(payload, dict) or "records" not in payload:
        raise ParseError("dataset file has no 'records' field")
    return [record_from_dict(r) for r in payload["records"]]


# ---------------------------------------------------------------------------
# training pairs

def make_pairs(record: InteractionRecord) -> list[tuple[SkeletonSequence, SkeletonSequence]]:
    """Each record supplies both directions: (actor, reactor) and (reactor, actor)."""
    return [(record.actor, record.reactor), (record.reactor, record.actor)]


def split_by_sets(records: list[InteractionRecord],
                  held_out_ids=DEFAULT_HELD_OUT_SETS) -> DatasetSplit:
    held = set(held_out_ids)
    split = DatasetSplit()
    for record in records:
        bucket = split.test if record.set_id in held else split.train
        bucket.extend(make_pairs(record))
    if not split.train:
        raise DataError("held-out ids leave the training partition empty")
    if not split.test:
        raise DataError("held-out ids leave the test partition empty")
    return split


def held_out_records(records: list[InteractionRecord],
                     held_out_ids=DEFAULT_HELD_OUT_SETS) -> list[InteractionRecord]:
    held = set(held_out_ids)
    return [r for r in records if r.set_id in held]


# ---------------------------------------------------------------------------
# synthetic interactions
#
# Parametric desk-scale stand-in for captured data.  Every (category, role)
# gets a distinct linear-plus-sinusoidal trajectory, with depth carrying a
# clear per-category signature, so tiny regressors can separate the classes
# from either side of the interaction.

def _base_pose(n_joints: int, x_center: float, depth_center: float) -> np.ndarray:
    pose = np.zeros((n_joints, 3))
    idx = np.arange(n_joints)
    pose[:, 0] = x_center + 0.02 * ((idx % 3) - 1)
    pose[:, 1] = np.linspace(0.72, 0.22, n_joints)
    pose[:, 2] = depth_center + 0.04 * ((idx % 4) - 1.5)
    return pose


def _joint_groups(n_joints: int) -> dict[str, list[int]]:
    arm1 = 1 if n_joints > 1 else 0
    arm2 = 2 if n_joints > 2 else arm1
    leg1 = n_joints - 1
    leg2 = n_joints - 2 if n_joints > 1 else leg1
    return {"root": [0], "arm1": [arm1], "arm2": [arm2],
            "arms": sorted({arm1, arm2}), "legs": sorted({leg1, leg2}),
            "leg1": [leg1], "all": list(range(n_joints))}


def _motion(frames: np.ndarray, groups: dict[str, list[int]],
            moves: list[tuple[str, int, np.ndarray]]) -> None:
    """Apply (group, coordinate, per-frame offset) moves in place."""
    for group, coord, offset in moves:
        for j in groups[group]:
            frames[:, j, coord] += offset


def synth_generate(seed: int, n_per_category: int = 2, frames: int = 40,
                   joints: int = NUM_JOINTS) -> list[InteractionRecord]:
    """Deterministic synthetic two-person dataset, one rng stream per seed."""
    if frames < 2:
        raise DataError("synthetic sequences need at least 2 frames")
    if n_per_category < 1:
        raise DataError("n_per_category must be >= 1")
    rng = np.random.default_rng(seed)
    groups = _joint_groups(joints)
    t = np.linspace(0.0, 1.0, frames)
    s = np.sin(np.pi * t)          # single swing
    shake = np.sin(3 * np.pi * t) * t
    records: list[InteractionRecord] = []
    for ci, category in enumerate(CATEGORIES):
        for copy in range(n_per_category):
            a = rng.uniform(0.85, 1.15)
            actor = np.repeat(_base_pose(joints, 0.35, 2.2)[None], frames, axis=0)
            reactor = np.repeat(_base_pose(joints, 0.62, 2.0)[None], frames, axis=0)
            if category == "approaching":
                _motion(actor, groups, [("all", 2, -0.35 * a * t), ("all", 0, 0.06 * a * t)])
                _motion(reactor, groups, [("all", 0, -0.04 * a * t), ("arm1", 1, 0.08 * a * s)])
            elif category == "departing":
                _motion(actor, groups, [("all", 2, 0.35 * a * t), ("all", 0, -0.05 * a * t)])
                _motion(reactor, groups, [("arm2", 1, 0.07 * a * shake), ("all", 2, -0.05 * a * t)])
            elif category == "kicking":
                _motion(actor, groups, [("leg1", 0, 0.22 * a * s), ("leg1", 1, -0.10 * a * s),
                                        ("root", 2, -0.08 * a * s)])
                _motion(reactor, groups, [("all", 0, 0.10 * a * t), ("all", 2, 0.15 * a * s),
                                          ("root", 1, -0.05 * a * s)])
            elif category == "punching":
                _motion(actor, groups, [("arm1", 0, 0.26 * a * s), ("arm1", 2, -0.12 * a * s)])
                _motion(reactor, groups, [("all", 0, 0.08 * a * s), ("arms", 1, 0.06 * a * s),
                                          ("all", 2, 0.10 * a * t)])
            elif category == "pushing":
                _motion(actor, groups, [("arms", 0, 0.18 * a * t), ("arms", 2, -0.10 * a * t)])
                _motion(reactor, groups, [("all", 0, 0.14 * a * t * t), ("all", 2, 0.18 * a * t)])
            elif category == "hugging":
                _motion(actor, groups, [("all", 0, 0.10 * a * t), ("arms", 1, 0.10 * a * t),
                                        ("all", 2, -0.15 * a * t)])
                _motion(reactor, groups, [("all", 0, -0.08 * a * t), ("arms", 1, 0.09 * a * t),
                                          ("all", 2, -0.12 * a * t)])
            elif category == "handshaking":
                _motion(actor, groups, [("arm1", 0, 0.16 * a * t), ("arm1", 1, 0.04 * a * shake),
                                        ("all", 2, -0.05 * a * t)])
                _motion(reactor, groups, [("arm1", 0, -0.15 * a * t), ("arm1", 1, 0.04 * a * shake),
                                          ("all", 2, -0.04 * a * t)])
            else:  # exchanging
                _motion(actor, groups, [("arm2", 0, 0.18 * a * s), ("arm2", 1, 0.05 * a * s),
                                        ("all", 2, -0.06 * a * s)])
                _motion(reactor, groups, [("arm2", 0, -0.16 * a * t * s), ("all", 2, -0.05 * a * t * s)])
            actor += rng.uniform(-1e-3, 1e-3, size=actor.shape)
            reactor += rng.uniform(-1e-3, 1e-3, size=reactor.shape)
            for seq in (actor, reactor):
                np.clip(seq[..., 0], *X_RANGE, out=seq[..., 0])
                np.clip(seq[..., 1], *Y_RANGE, out=seq[..., 1])
                np.clip(seq[..., 2], *DEPTH_RANGE, out=seq[..., 2])
            set_id = _SET_ID_POOL[(ci * n_per_category + copy) % len(_SET_ID_POOL)]
            records.append(InteractionRecord(
                actor=SkeletonSequence(actor),
                reactor=SkeletonSequence(reactor),
                category=category,
                set_id=set_id,
            ))
    return records
