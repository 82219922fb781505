"""Smoke test for the terralabel Python module.

Build and place the module next to this script first:

    cargo build -p terralabel-py --release --features extension-module
    cp target/release/libterralabel_py.so python/terralabel.so
"""

import itertools
import math
import random

import terralabel as tl


def check_hungarian():
    rng = random.Random(1)
    cost = [[rng.randint(0, 9) for _ in range(4)] for _ in range(4)]
    pairs, total = tl.hungarian(cost)
    best = min(sum(cost[r][p[r]] for r in range(4)) for p in itertools.permutations(range(4)))
    assert total == best, (total, best)
    assert sorted(r for r, _ in pairs) == [0, 1, 2, 3]


def check_similarity():
    rows = [[1.0, 0.0, 2.0], [0.5, 3.0, 0.0], [0.0, 1.0, 1.0]]
    assert tl.chip_similarity(rows, rows[::-1]) == 1.0


def check_fcm():
    rng = random.Random(2)
    centres = [(0.0, 0.0), (5.0, 5.0)]
    points, truth = [], []
    for c, (x, y) in enumerate(centres):
        for _ in range(50):
            points.append([x + rng.gauss(0, 0.3), y + rng.gauss(0, 0.3)])
            truth.append(c)
    model, objective = tl.fcm_fit(points, 2, seed=0)
    assert all(a >= b - 1e-9 for a, b in zip(objective, objective[1:]))
    hard = [max(range(2), key=lambda c: model.membership(p)[c]) for p in points]
    assert tl.adjusted_rand_index(hard, truth) == 1.0
    assert abs(sum(model.membership(points[0])) - 1.0) < 1e-9


def check_slic():
    size, bands = 32, 3
    data = [float((p % size) >= size // 2) for b in range(bands) for p in range(size * size)]
    chip = tl.Chip("t_r000_c000", bands, size, data)
    seg = tl.slic(chip, 8)
    assert seg.height == size and len(seg.labels) == size * size
    assert sum(seg.pixel_counts()) == size * size
    means = tl.segment_means(seg, data, bands)
    assert len(means) == len(seg)


def check_umap():
    rng = random.Random(3)
    vectors = [[10.0 * (i // 20 == d) + rng.gauss(0, 1) for d in range(3)] for i in range(60)]
    coords = tl.umap(vectors, n_neighbors=10, epochs=100)
    assert len(coords) == 60 and all(math.isfinite(x) and math.isfinite(y) for x, y in coords)
    assert coords == tl.umap(vectors, n_neighbors=10, epochs=100)


def main():
    assert tl.chip_grid(10980, 10980, 256) == (42, 42)
    check_hungarian()
    check_similarity()
    check_fcm()
    check_slic()
    check_umap()
    try:
        tl.hungarian([[1.0, 2.0], [3.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged cost matrix accepted")
    print("terralabel smoke test passed")


if __name__ == "__main__":
    main()
