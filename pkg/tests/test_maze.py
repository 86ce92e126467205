import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltmatch.core import Schedule
from tiltmatch.maze import (INVALID_REWARD, Maze, bfs_distances, coverage_ratio, decode_body,
                            encode_path, evaluate_rollouts, generate_maze, mdm_loss_and_grad,
                            path_corpus, render_svg, reward_stay_away, sample_prompts,
                            shortest_path, validate_path)
from tiltmatch.model import NeuralConfig, NeuralModel
from tiltmatch.objective import DtmConfig, cdtm_loss_and_grad

mazes = st.builds(lambda w, f, seed: generate_maze(w, f, np.random.default_rng(seed)),
                  st.sampled_from([5, 7, 9, 11]), st.floats(0, 1), st.integers(0, 10_000))


@given(mazes)
def test_maze_structure(maze):
    g = maze.grid
    assert g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()
    assert not g[1::2, 1::2].any()
    assert g[2:-1:2, 2:-1:2].all()  # pillars
    cells = maze.open_cells()
    assert len(bfs_distances(maze, cells[0])) == len(cells)


def test_door_fraction_extremes():
    rng = np.random.default_rng(0)
    perfect = generate_maze(11, 0.0, rng)
    cells = perfect.open_cells()
    edges = sum(len(list(perfect.neighbors(c))) for c in cells) // 2
    assert edges == len(cells) - 1  # a tree: unique path between any two cells
    full = generate_maze(11, 1.0, rng)
    inner = full.grid[1:-1, 1:-1]
    idx = np.add.outer(np.arange(1, 10), np.arange(1, 10))
    assert not inner[idx % 2 == 1].any()  # every wall segment between rooms is open


def test_large_maze_generates():
    maze = generate_maze(41, 0.4, np.random.default_rng(1))
    assert maze.vocab_size == 41 * 41 + 2


def test_invalid_arguments():
    with pytest.raises(ValueError):
        generate_maze(6, 0.4, 0)
    with pytest.raises(ValueError):
        generate_maze(7, 1.5, 0)


def test_text_round_trip():
    maze = generate_maze(9, 0.4, np.random.default_rng(2), seed=2)
    back = Maze.from_text(maze.to_text())
    assert np.array_equal(back.grid, maze.grid)
    assert back.door_fraction == maze.door_fraction and back.seed == 2


def independent_valid(maze, seq):
    """Set-based checker written separately from the library's."""
    seq = list(map(int, seq))
    W = maze.width
    open_ids = {r * W + c for r, c in zip(*np.nonzero(~maze.grid))}
    if len(seq) < 4 or seq[2] != W * W:
        return False
    body = seq[3:]
    while body and body[-1] == W * W + 1:
        body.pop()
    if not body or any(t >= W * W for t in body):
        return False
    if body[0] != seq[0] or body[-1] != seq[1] or not set(body) <= open_ids:
        return False
    return all(abs(a // W - b // W) + abs(a % W - b % W) == 1 for a, b in zip(body, body[1:]))


@st.composite
def candidate_paths(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    maze = generate_maze(7, draw(st.floats(0, 1)), rng)
    cells = maze.open_cells()
    s, g = cells[rng.integers(len(cells))], cells[rng.integers(len(cells))]
    path = shortest_path(maze, s, g, rng)
    seq = encode_path(maze, s, g, path, 30) if len(path) <= 30 else None
    if seq is None:
        seq = encode_path(maze, s, s, [s], 30)
    k = draw(st.integers(0, 3))
    for _ in range(k):  # random corruptions
        j = int(rng.integers(len(seq)))
        seq[j] = int(rng.integers(maze.vocab_size))
    return maze, seq


@given(candidate_paths())
def test_validate_path_matches_independent_checker(case):
    maze, seq = case
    assert validate_path(maze, seq)[0] == independent_valid(maze, seq)


def test_failure_reasons():
    maze = Maze(np.zeros((5, 5), dtype=bool))
    maze.grid[1, 2] = True
    tok = maze.token
    base = [tok((1, 1)), tok((1, 3)), maze.sep]
    assert validate_path(maze, base + [tok((1, 1)), tok((1, 2)), tok((1, 3))]) == (False, "wall")
    assert validate_path(maze, base + [tok((1, 1)), tok((1, 3))]) == (False, "jump")
    assert validate_path(maze, base + [tok((0, 0)), tok((1, 3))])[1] == "start"
    assert validate_path(maze, base + [tok((1, 1)), tok((2, 1))])[1] == "goal"
    assert validate_path(maze, base + [maze.pad, tok((1, 1))])[1] == "malformed"


@given(mazes, st.integers(0, 2**32 - 1))
def test_bfs_shortest_paths_are_valid(maze, seed):
    rng = np.random.default_rng(seed)
    cells = maze.open_cells()
    s, g = cells[rng.integers(len(cells))], cells[rng.integers(len(cells))]
    path = shortest_path(maze, s, g, rng)
    assert len(path) == bfs_distances(maze, s)[g] + 1
    seq = encode_path(maze, s, g, path, len(path) + 2)
    assert validate_path(maze, seq) == (True, "")
    assert decode_body(maze, seq) == [maze.token(z) for z in path]


def test_reward_examples():
    open5 = Maze(np.zeros((5, 5), dtype=bool))
    ring = [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]
    seq = encode_path(open5, ring[0], ring[-1], ring, 6)
    assert reward_stay_away(open5, seq) == 1.0
    through = [(2, 0), (2, 1), (2, 2), (2, 3)]
    assert reward_stay_away(open5, encode_path(open5, through[0], through[-1], through, 4)) == 0.0
    bad = encode_path(open5, ring[0], ring[-1], ring[:-1], 6)
    assert reward_stay_away(open5, bad) == INVALID_REWARD


def test_coverage_ratio_examples():
    assert coverage_ratio([[1, 2, 3]]) == 1.0
    assert coverage_ratio([[1, 2], [3, 4]]) == 2.0
    assert coverage_ratio([[1, 2, 3]] * 5) == 1.0
    with pytest.raises(ValueError):
        coverage_ratio([])


@given(st.lists(st.lists(st.integers(0, 30), min_size=1, max_size=8), min_size=1, max_size=6))
def test_coverage_ratio_properties(paths):
    c = coverage_ratio(paths)
    assert c >= 1.0
    assert coverage_ratio(paths + paths) == c


def test_prompts_and_corpus_are_valid():
    rng = np.random.default_rng(3)
    maze = generate_maze(11, 0.4, rng)
    prompts = sample_prompts(maze, 10, rng, 20)
    for s, g in prompts:
        assert abs(s[0] - g[0]) + abs(s[1] - g[1]) >= 11 / 2
    corpus = path_corpus(maze, 50, rng, 20, prompts)
    assert corpus.shape == (50, 23)
    assert all(validate_path(maze, x)[0] for x in corpus)


def test_mdm_loss_equals_cdtm_loss_with_unit_weights():
    rng = np.random.default_rng(4)
    maze = generate_maze(7, 0.4, rng)
    corpus = path_corpus(maze, 16, rng, 10)
    model = NeuralModel(maze.vocab_size, corpus.shape[1], NeuralConfig(4, 8, 1), seed=0)
    a = mdm_loss_and_grad(corpus, model, np.random.default_rng(9), prefix=3)
    b = cdtm_loss_and_grad(corpus, np.zeros(16), model, model, DtmConfig(c=0.0, h=1.0),
                           Schedule(), np.random.default_rng(9), prefix=3)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)


def test_evaluate_rollouts_and_svg():
    rng = np.random.default_rng(5)
    maze = generate_maze(7, 0.4, rng)
    corpus = path_corpus(maze, 6, rng, 10)
    corpus[0, 4] = maze.pad  # break one path
    res = evaluate_rollouts(maze, corpus, np.array([0, 0, 0, 1, 1, 1]))
    assert res["valid_frac"] == pytest.approx(5 / 6)
    assert [p["n"] for p in res["per_prompt"]] == [3, 3]
    assert res["coverage_ratio"] >= 1.0
    svg = render_svg(maze, [decode_body(maze, corpus[1])])
    assert svg.startswith("<svg") and "polyline" in svg
