import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dsareid.merge_topology import (BACK_PARTS, FRONT_PARTS, LR_PAIRS, NUM_PARTS, PART_LABELS,
                                    PART_NAMES, composed_groups, level1_groups, level2_groups,
                                    lr_swap_table, merge_channel_groups, merge_features, merge_map)


def test_level1_partitions_all_parts():
    groups = level1_groups()
    assert len(groups) == 13
    flat = [p for g in groups for p in g]
    assert sorted(flat) == list(range(1, 25))
    assert all(len(g) in (1, 2) for g in groups)
    assert {g for g in groups if len(g) == 1} == {(1,), (2,)}


def test_level1_pairs_are_left_right_mirrors():
    for g in level1_groups():
        if len(g) == 2:
            a, b = (PART_LABELS[p] for p in g)
            assert a.replace("left", "X").replace("right", "X") == b.replace("left", "X").replace("right", "X")
            assert a != b


def test_level2_partitions_level1():
    groups = level2_groups()
    assert len(groups) == 8
    assert sorted(i for g in groups for i in g) == list(range(13))
    assert all(len(g) in (1, 2) for g in groups)


def test_singletons_are_hand_foot_head_from_the_chart():
    # after left/right merging, a group has a front/back counterpart iff its parts
    # carry a front or back tag in the chart
    l1 = level1_groups()
    no_counterpart = set()
    for k, g in enumerate(l1):
        tags = {"front" if p in FRONT_PARTS else "back" if p in BACK_PARTS else None for p in g}
        if tags == {None}:
            no_counterpart.add(k)
    singles = {g[0] for g in level2_groups() if len(g) == 1}
    assert singles == no_counterpart
    names = {PART_NAMES[i] for i, g in enumerate(level2_groups()) if len(g) == 1}
    assert names == {"hand", "foot", "head"}


def test_level2_pairs_are_front_back():
    l1 = level1_groups()
    for g in level2_groups():
        if len(g) == 2:
            a, b = (set(l1[i]) for i in g)
            assert (a <= FRONT_PARTS and b <= BACK_PARTS) or (a <= BACK_PARTS and b <= FRONT_PARTS)


def test_composition_has_eight_groups_covering_all():
    comp = composed_groups()
    assert len(comp) == 8
    assert sorted(p for g in comp for p in g) == list(range(1, 25))
    mult = np.zeros(25, int)
    for g in comp:
        mult[list(g)] += 1
    assert np.all(mult[1:] == 1)


def test_names_follow_labels():
    comp = dict(zip(PART_NAMES, composed_groups()))
    for name, parts in comp.items():
        for p in parts:
            assert PART_LABELS[p].startswith(name)


def test_swap_table_is_an_involution():
    t = lr_swap_table()
    assert t[0] == 0 and t[1] == 1 and t[2] == 2
    assert all(t[t[i]] == i for i in range(NUM_PARTS + 1))
    for a, b in LR_PAIRS:
        assert t[a] == b


def test_json_export():
    doc = json.loads(merge_map().to_json())
    assert len(doc["level1"]) == 13 and len(doc["level2"]) == 8
    assert doc["composed"]["head"] == [23, 24]
    assert doc["composed"]["torso"] == [1, 2]


class TestMergeFeatures:
    def test_singleton_identity(self):
        m = [torch.randn(2, 3) for _ in range(3)]
        out = merge_features(m, [(0,), (1, 2)])
        assert torch.equal(out[0], m[0])

    def test_zero_partner(self):
        a = torch.randn(4, 4)
        out = merge_features([a, torch.zeros(4, 4)], [(0, 1)])
        assert torch.equal(out[0], a)

    def test_pair_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))
        out = merge_features([a, b], [(0, 1)])[0]
        for i in range(2):
            for j in range(2):
                for c in range(3):
                    assert out[i, j, c] == a[i, j, c] + b[i, j, c]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            merge_features([torch.zeros(2, 2), torch.zeros(2, 3)], [(0, 1)])

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            merge_features([torch.zeros(2)], [(0, 1)])

    def test_one_based(self):
        m = [torch.full((1,), float(i)) for i in range(24)]
        out = merge_features(m, level1_groups(), zero_based=False)
        assert len(out) == 13 and out[2].item() == 2 + 3

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25)
    def test_commutative_and_conservative(self, seed):
        rng = np.random.default_rng(seed)
        maps = [rng.integers(-50, 50, size=(2, 3, 2)) for _ in range(24)]
        groups = [tuple(p - 1 for p in g) for g in level1_groups()]
        out = merge_features(maps, groups)
        rev = merge_features(maps, [g[::-1] for g in groups])
        assert all(np.array_equal(x, y) for x, y in zip(out, rev))
        assert sum(o.sum() for o in out) == sum(m.sum() for m in maps)


def test_channel_merge_matches_list_merge():
    x = torch.randn(2, 24 * 3, 4, 4)
    groups = [tuple(p - 1 for p in g) for g in level1_groups()]
    merged = merge_channel_groups(x, groups, 3)
    ref = merge_features(list(x.split(3, dim=1)), groups)
    assert merged.shape == (2, 13 * 3, 4, 4)
    assert torch.allclose(merged, torch.cat(ref, dim=1))
