"""Randomized valid op sequences against a pure-python mirror of the cache.

Drives append / gather / quantize in random (but protocol-legal) orders and
checks the layer's bookkeeping invariants after every operation.
"""

import numpy as np
import pytest

from xkv.cache import KVCacheLayer, PruneSelection
from xkv.numerics import top_k_indices

HEADS, D_HEAD = 2, 8


def check_invariants(layer, mirror_map):
    assert layer.total_tokens == len(mirror_map)
    assert layer.token_frame_map.tolist() == mirror_map
    K, V = layer.read_full_precision()
    assert K.shape == V.shape == (HEADS, len(mirror_map), D_HEAD)
    if mirror_map:
        # first frame occupies a contiguous leading prefix of length t_first
        first = mirror_map[0]
        assert mirror_map[: layer.t_first] == [first] * layer.t_first
        assert all(f != first for f in mirror_map[layer.t_first:])
        # frame indices never decrease
        assert all(a <= b for a, b in zip(mirror_map, mirror_map[1:]))


@pytest.mark.parametrize("seed", range(8))
def test_random_protocol_sequences(seed):
    rng = np.random.default_rng(seed)
    layer = KVCacheLayer(heads=HEADS, d_head=D_HEAD, budget=64)
    mirror_map = []
    next_frame = 1
    for _ in range(40):
        op = rng.choice(["append", "gather", "quantize"])
        # gather is only protocol-legal once a current frame exists that is
        # not the first frame (pruning implies at least two distinct frames)
        if op == "gather" and len(set(mirror_map)) < 2:
            op = "append"
        if op == "append" or not mirror_map:
            n = int(rng.integers(1, 7))
            K = rng.standard_normal((HEADS, n, D_HEAD))
            V = rng.standard_normal((HEADS, n, D_HEAD))
            layer.append(K, V, next_frame)
            mirror_map.extend([next_frame] * n)
            next_frame += 1
        elif op == "gather":
            T = len(mirror_map)
            t_first = layer.t_first
            current = mirror_map[-1]
            current_start = mirror_map.index(current)
            middle = np.arange(t_first, current_start)
            if middle.size:
                k = int(rng.integers(0, middle.size + 1))
                keep_middle = np.sort(rng.choice(middle, size=k, replace=False))
            else:
                keep_middle = middle
            keep = np.concatenate([
                np.arange(t_first), keep_middle, np.arange(current_start, T),
            ]).astype(np.int64)
            layer.gather(PruneSelection(keep, t_first, current_start, T))
            mirror_map = [mirror_map[i] for i in keep]
        else:
            layer.quantize_cache(bits=4, group_size=8)
        check_invariants(layer, mirror_map)


def test_scores_survive_quantize_gather_cycles():
    # ranking by top_k over scores stays consistent with what gather retains
    rng = np.random.default_rng(99)
    layer = KVCacheLayer(heads=HEADS, d_head=D_HEAD, budget=64)
    for frame in (1, 2, 3):
        K = rng.standard_normal((HEADS, 6, D_HEAD))
        layer.append(K, K.copy(), frame)
    layer.quantize_cache(bits=8, group_size=4)
    K, _ = layer.read_full_precision()
    scores = K.mean(axis=0)[6:12] @ rng.standard_normal(D_HEAD)
    keep_middle = top_k_indices(scores, 3) + 6
    keep = np.concatenate([np.arange(6), keep_middle, np.arange(12, 18)])
    layer.gather(PruneSelection(keep, 6, 12, 18))
    assert layer.total_tokens == 15
    K2, V2 = layer.read_full_precision()
    assert np.array_equal(K2, K[:, keep, :])
