"""Fixed two-level merging of the 24 dense-semantics body parts.

Part indices follow the DensePose chart:

    1 torso back        2 torso front
    3 right hand        4 left hand
    5 left foot         6 right foot
    7/8   upper leg right/left back     9/10  upper leg right/left front
    11/12 lower leg right/left back     13/14 lower leg right/left front
    15/16 upper arm left/right front    17/18 upper arm left/right back
    19/20 lower arm left/right front    21/22 lower arm left/right back
    23/24 head right/left

Level 1 adds left/right counterparts (24 -> 13), level 2 adds front/back
counterparts (13 -> 8).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import torch

NUM_PARTS = 24

PART_LABELS = {
    1: "torso_back", 2: "torso_front",
    3: "hand_right", 4: "hand_left",
    5: "foot_left", 6: "foot_right",
    7: "upper_leg_right_back", 8: "upper_leg_left_back",
    9: "upper_leg_right_front", 10: "upper_leg_left_front",
    11: "lower_leg_right_back", 12: "lower_leg_left_back",
    13: "lower_leg_right_front", 14: "lower_leg_left_front",
    15: "upper_arm_left_front", 16: "upper_arm_right_front",
    17: "upper_arm_left_back", 18: "upper_arm_right_back",
    19: "lower_arm_left_front", 20: "lower_arm_right_front",
    21: "lower_arm_left_back", 22: "lower_arm_right_back",
    23: "head_right", 24: "head_left",
}

# left/right counterparts; torso halves have none
LR_PAIRS = ((3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14),
            (15, 16), (17, 18), (19, 20), (21, 22), (23, 24))

FRONT_PARTS = frozenset({2, 9, 10, 13, 14, 15, 16, 19, 20})
BACK_PARTS = frozenset({1, 7, 8, 11, 12, 17, 18, 21, 22})

PART_NAMES = ("torso", "hand", "foot", "upper_leg", "lower_leg",
              "upper_arm", "lower_arm", "head")

_LEVEL1 = (
    (1,), (2,), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14),
    (15, 16), (17, 18), (19, 20), (21, 22), (23, 24),
)
# indices into _LEVEL1, ordered by PART_NAMES
_LEVEL2 = ((0, 1), (2,), (3,), (4, 5), (6, 7), (8, 9), (10, 11), (12,))


def level1_groups() -> tuple[tuple[int, ...], ...]:
    """13 groups of part indices (1-based): left/right pairs plus the torso halves."""
    return _LEVEL1


def level2_groups() -> tuple[tuple[int, ...], ...]:
    """8 groups of level-1 group indices (0-based), in ``PART_NAMES`` order."""
    return _LEVEL2


def composed_groups() -> tuple[tuple[int, ...], ...]:
    """The 8 final groups expressed directly as part indices."""
    return tuple(
        tuple(p for g in grp for p in _LEVEL1[g]) for grp in _LEVEL2
    )


def lr_swap_table() -> list[int]:
    """Lookup table mapping each part index 0..24 to its mirror counterpart."""
    table = list(range(NUM_PARTS + 1))
    for a, b in LR_PAIRS:
        table[a], table[b] = b, a
    return table


@dataclass(frozen=True)
class MergeMap:
    level1: tuple[tuple[int, ...], ...]
    level2: tuple[tuple[int, ...], ...]
    part_names: tuple[str, ...]

    def to_json(self) -> str:
        doc = {
            "level1": [list(g) for g in self.level1],
            "level2": [list(g) for g in self.level2],
            "part_names": list(self.part_names),
            "composed": {name: list(g) for name, g in zip(self.part_names, composed_groups())},
            "part_labels": {str(k): v for k, v in PART_LABELS.items()},
        }
        return json.dumps(doc, indent=2)


def merge_map() -> MergeMap:
    return MergeMap(level1_groups(), level2_groups(), PART_NAMES)


def _group_index(groups, zero_based: bool) -> list[int]:
    flat = [i for g in groups for i in g]
    n = len(flat)
    expected = list(range(n)) if zero_based else list(range(1, n + 1))
    if sorted(flat) != expected:
        raise ValueError(f"groups do not partition {n} items: {groups}")
    return flat


def merge_features(maps, groups, zero_based: bool = True):
    """Element-wise sum of feature maps within each group.

    ``maps`` is a sequence of equal-shape tensors (or arrays); ``groups`` holds
    indices into it. Set ``zero_based=False`` for 1-based part indices.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("no feature maps to merge")
    shape = tuple(maps[0].shape)
    for m in maps:
        if tuple(m.shape) != shape:
            raise ValueError(f"feature map shape mismatch: {tuple(m.shape)} vs {shape}")
    off = 0 if zero_based else 1
    out = []
    for g in groups:
        for i in g:
            if not 0 <= i - off < len(maps):
                raise ValueError(f"group index {i} out of range for {len(maps)} maps")
        acc = maps[g[0] - off]
        for i in g[1:]:
            acc = acc + maps[i - off]
        out.append(acc)
    return out


def merge_channel_groups(x: torch.Tensor, groups, channels: int) -> torch.Tensor:
    """Merge branch-stacked features ``(B, n*channels, H, W)`` group-wise.

    Branch ``k`` occupies channels ``[k*channels, (k+1)*channels)``; output
    stacks the merged branches the same way.
    """
    b, c, h, w = x.shape
    n = c // channels
    if n * channels != c:
        raise ValueError(f"{c} channels not divisible into branches of {channels}")
    _group_index(groups, zero_based=True)
    xs = x.view(b, n, channels, h, w)
    merged = [xs[:, list(g)].sum(dim=1) for g in groups]
    return torch.stack(merged, dim=1).reshape(b, len(groups) * channels, h, w)
