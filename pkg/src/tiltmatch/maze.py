"""Grid-maze planning environment: generation, path encoding, validity,
the stay-away-from-center reward, diversity metrics and base pretraining.

A maze of odd width W is a boolean wall grid. Rooms sit at (odd, odd)
coordinates; the cells between two rooms are wall segments ("doors" when
opened); (even, even) cells are pillars and stay walls. Cells are tokens
``row * W + col``; SEP and PAD follow the cell ids.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import make_rng
from .interpolant import reveal_any_order
from .model import Adam, NeuralConfig, NeuralModel, log_softmax

INVALID_REWARD = -0.4


@dataclass
class Maze:
    grid: np.ndarray
    door_fraction: float = 0.4
    seed: int | None = None

    @property
    def width(self) -> int:
        return self.grid.shape[0]

    @property
    def n_cells(self) -> int:
        return self.width * self.width

    @property
    def sep(self) -> int:
        return self.n_cells

    @property
    def pad(self) -> int:
        return self.n_cells + 1

    @property
    def vocab_size(self) -> int:
        return self.n_cells + 2

    @property
    def center(self) -> tuple[int, int]:
        c = (self.width - 1) // 2
        return c, c

    def cell(self, token: int) -> tuple[int, int]:
        return divmod(int(token), self.width)

    def token(self, rc) -> int:
        return int(rc[0]) * self.width + int(rc[1])

    def is_open(self, rc) -> bool:
        r, c = rc
        return 0 <= r < self.width and 0 <= c < self.width and not self.grid[r, c]

    def open_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(~self.grid)]

    def neighbors(self, rc):
        r, c = rc
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            if self.is_open((r + dr, c + dc)):
                yield (r + dr, c + dc)

    def to_text(self) -> str:
        head = f"# width={self.width} door_fraction={self.door_fraction} seed={self.seed}"
        rows = ["".join("#" if w else "." for w in row) for row in self.grid]
        return "\n".join([head, *rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Maze":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
        grid = np.array([[ch == "#" for ch in ln] for ln in lines[1:]])
        if grid.shape != (int(meta["width"]),) * 2:
            raise ValueError("maze grid does not match its header width")
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        return cls(grid, float(meta["door_fraction"]), seed)


def generate_maze(width: int, door_fraction: float, rng, seed=None) -> Maze:
    """Randomized depth-first carving, then open each remaining wall segment
    between two rooms with probability ``door_fraction``."""
    if width < 5 or width % 2 == 0:
        raise ValueError("maze width must be odd and at least 5")
    if not 0.0 <= door_fraction <= 1.0:
        raise ValueError("door fraction must lie in [0, 1]")
    rng = make_rng(rng)
    grid = np.ones((width, width), dtype=bool)
    grid[1::2, 1::2] = False
    start = (1, 1)
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = [(r + dr, c + dc) for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2))
                   if 0 < r + dr < width and 0 < c + dc < width and (r + dr, c + dc) not in seen]
        if not options:
            stack.pop()
            continue
        nr, nc = options[rng.integers(len(options))]
        grid[(r + nr) // 2, (c + nc) // 2] = False
        seen.add((nr, nc))
        stack.append((nr, nc))
    for r in range(1, width - 1):
        for c in range(1, width - 1):
            if grid[r, c] and (r + c) % 2 == 1 and rng.random() < door_fraction:
                grid[r, c] = False
    maze = Maze(grid, door_fraction, seed)
    if not _connected(maze):
        raise RuntimeError("generated maze is not connected")
    return maze


def bfs_distances(maze: Maze, source) -> dict:
    dist = {tuple(source): 0}
    queue = deque([tuple(source)])
    while queue:
        u = queue.popleft()
        for v in maze.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _connected(maze: Maze) -> bool:
    cells = maze.open_cells()
    return len(bfs_distances(maze, cells[0])) == len(cells)


def shortest_path(maze: Maze, start, goal, rng=None) -> list[tuple[int, int]]:
    """A shortest path; ties among next steps broken uniformly when ``rng`` is given."""
    dist = bfs_distances(maze, goal)
    if tuple(start) not in dist:
        raise ValueError("goal unreachable")
    path = [tuple(start)]
    while path[-1] != tuple(goal):
        u = path[-1]
        steps = [v for v in maze.neighbors(u) if dist.get(v) == dist[u] - 1]
        path.append(steps[rng.integers(len(steps))] if rng is not None else steps[0])
    return path


def encode_path(maze: Maze, start, goal, path, body_length: int) -> np.ndarray:
    body = [maze.token(z) for z in path]
    if len(body) > body_length:
        raise ValueError("path longer than the body length")
    seq = [maze.token(start), maze.token(goal), maze.sep] + body
    seq += [maze.pad] * (body_length - len(body))
    return np.array(seq, dtype=np.int64)


def decode_body(maze: Maze, seq) -> list[int] | None:
    """Path tokens before the PAD suffix, or None when the structure is malformed."""
    seq = [int(t) for t in seq]
    if len(seq) < 4 or seq[2] != maze.sep:
        return None
    if not (0 <= seq[0] < maze.n_cells and 0 <= seq[1] < maze.n_cells):
        return None
    body = seq[3:]
    n = body.index(maze.pad) if maze.pad in body else len(body)
    if n == 0 or any(t != maze.pad for t in body[n:]):
        return None
    if any(not 0 <= t < maze.n_cells for t in body[:n]):
        return None
    return body[:n]


def validate_path(maze: Maze, seq) -> tuple[bool, str]:
    body = decode_body(maze, seq)
    if body is None:
        return False, "malformed"
    cells = [maze.cell(t) for t in body]
    if body[0] != int(seq[0]):
        return False, "start"
    if body[-1] != int(seq[1]):
        return False, "goal"
    if any(not maze.is_open(z) for z in cells):
        return False, "wall"
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        if abs(r0 - r1) + abs(c0 - c1) != 1:
            return False, "jump"
    return True, ""


def reward_stay_away(maze: Maze, seq) -> float:
    """Minimum Manhattan distance of the path to the center over (W-1)/2;
    -0.4 for an invalid path."""
    valid, _ = validate_path(maze, seq)
    if not valid:
        return INVALID_REWARD
    cr, cc = maze.center
    body = decode_body(maze, seq)
    dmin = min(abs(r - cr) + abs(c - cc) for r, c in map(maze.cell, body))
    return dmin / ((maze.width - 1) / 2)


def coverage_ratio(paths) -> float:
    """|union of cells over all paths| / |cells of the longest path|."""
    sets = [set(int(t) for t in p) for p in paths]
    if not sets:
        raise ValueError("coverage ratio needs at least one valid path")
    return len(set().union(*sets)) / max(len(s) for s in sets)


def sample_prompts(maze: Maze, n: int, rng, body_length: int, min_distance=None):
    """Start/goal pairs at Manhattan distance >= W/2 whose shortest path fits."""
    rng = make_rng(rng)
    cells = maze.open_cells()
    min_distance = maze.width / 2 if min_distance is None else min_distance
    out = []
    while len(out) < n:
        s = cells[rng.integers(len(cells))]
        g = cells[rng.integers(len(cells))]
        if abs(s[0] - g[0]) + abs(s[1] - g[1]) < min_distance:
            continue
        if bfs_distances(maze, g)[s] + 1 > body_length:
            continue
        out.append((s, g))
    return out


def prompt_tokens(maze: Maze, prompts) -> np.ndarray:
    return np.array([[maze.token(s), maze.token(g), maze.sep] for s, g in prompts],
                    dtype=np.int64)


def random_path(maze: Maze, start, goal, rng, body_length: int):
    """Shortest path through a random waypoint when it is simple and fits,
    otherwise a randomized shortest path."""
    cells = maze.open_cells()
    for _ in range(4):
        w = cells[rng.integers(len(cells))]
        path = shortest_path(maze, start, w, rng) + shortest_path(maze, w, goal, rng)[1:]
        if len(path) <= body_length and len(set(path)) == len(path):
            return path
    return shortest_path(maze, start, goal, rng)


def path_corpus(maze: Maze, n_paths: int, rng, body_length: int, prompts=None) -> np.ndarray:
    rng = make_rng(rng)
    if prompts is None:
        prompts = sample_prompts(maze, n_paths, rng, body_length)
    seqs = []
    for k in range(n_paths):
        s, g = prompts[k % len(prompts)]
        seqs.append(encode_path(maze, s, g, random_path(maze, s, g, rng, body_length),
                                body_length))
    return np.stack(seqs)


def render_svg(maze: Maze, paths=(), cell: int = 12) -> str:
    w = maze.width * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}">',
             f'<rect width="{w}" height="{w}" fill="white"/>']
    for r, c in np.argwhere(maze.grid):
        parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                     'fill="black"/>')
    for body in paths:
        pts = " ".join(f"{maze.cell(t)[1] * cell + cell / 2},{maze.cell(t)[0] * cell + cell / 2}"
                       for t in body)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="red" '
                     'stroke-opacity="0.3" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def mdm_loss_and_grad(x1, theta, rng, prefix: int = 0, s_cap: float = 1e-3):
    """Standard masked-diffusion loss: time-weighted -log pi_theta(x1^i) summed
    over masked positions, batch mean."""
    rng = make_rng(rng)
    n = len(x1)
    mask_id = theta.vocab_size
    s = np.minimum(rng.random(n), 1.0 - s_cap)
    x_t = reveal_any_order(x1, s, rng, mask_id, prefix)
    masked = x_t == mask_id
    z, cache = theta.logits(x_t, return_cache=True)
    logp = log_softmax(z)
    picked = np.take_along_axis(logp, x1[..., None], axis=-1)[..., 0]
    tw = 1.0 / (1.0 - s) / n
    loss = -float(np.sum(tw[:, None] * masked * picked))
    d = np.exp(logp)
    d[np.arange(n)[:, None], np.arange(x1.shape[1])[None], x1] -= 1.0
    grad = theta.backward(cache, (tw[:, None] * masked)[..., None] * d)
    return loss, grad


def evaluate_rollouts(maze: Maze, seqs, prompt_ids) -> dict:
    """Validity, mean reward and per-prompt coverage of a set of rollouts."""
    valid = np.array([validate_path(maze, s)[0] for s in seqs])
    rewards = np.array([reward_stay_away(maze, s) for s in seqs])
    per_prompt = []
    for pid in sorted(set(int(p) for p in prompt_ids)):
        sel = np.asarray(prompt_ids) == pid
        vp = [decode_body(maze, s) for s, ok in zip(seqs[sel], valid[sel]) if ok]
        per_prompt.append({
            "prompt_id": pid, "n": int(sel.sum()),
            "valid_frac": float(valid[sel].mean()),
            "mean_reward": float(rewards[sel].mean()),
            "coverage_ratio": coverage_ratio(vp) if vp else float("nan"),
        })
    cov = [p["coverage_ratio"] for p in per_prompt if not math.isnan(p["coverage_ratio"])]
    return {"valid_frac": float(valid.mean()), "mean_reward": float(rewards.mean()),
            "coverage_ratio": float(np.mean(cov)) if cov else float("nan"),
            "per_prompt": per_prompt, "valid": valid, "rewards": rewards}


def pretrain_base(maze: Maze, model_config: NeuralConfig, n_paths: int, rng, body_length: int,
                  epochs: int = 20, batch_size: int = 64, lr: float = 3e-3,
                  weight_decay: float = 0.0, prompts=None, eval_fn=None, model=None,
                  start_epoch: int = 0, on_epoch=None, corpus=None, optimizer=None):
    """Train a neural posterior on valid paths with the masked-diffusion loss.

    ``eval_fn(model, epoch)`` may return extra per-epoch metrics (e.g. validity);
    ``on_epoch(model, record, optimizer)`` runs after each epoch. Passing a
    prebuilt ``corpus``, ``model`` and ``optimizer`` resumes a previous run.
    Returns (model, per-epoch metric dicts).
    """
    rng = make_rng(rng)
    if corpus is None:
        corpus = path_corpus(maze, n_paths, rng, body_length, prompts)
    n_paths, length = corpus.shape
    if model is None:
        model = NeuralModel(maze.vocab_size, length, model_config, seed=rng)
    opt = optimizer or Adam(lr=lr, weight_decay=weight_decay, clip=2.0)
    history = []
    steps = max(1, n_paths // batch_size)
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.permutation(n_paths)
        losses = []
        for k in range(steps):
            batch = corpus[order[k * batch_size:(k + 1) * batch_size]]
            loss, grad = mdm_loss_and_grad(batch, model, rng, prefix=3)
            opt.step(model.params, grad)
            losses.append(loss)
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if eval_fn is not None:
            rec.update(eval_fn(model, epoch))
        history.append(rec)
        if on_epoch:
            on_epoch(model, rec, opt)
    return model, history
