"""Treasure Hunt: an 18x24 tunnel gridworld for a finder and a collector.

The finder lives in the bottom corridor and can see the bottom of nearby
tunnels but never reach them; the collector lives in the top corridor and the
vertical tunnels. Either agent moving onto the treasure pays both 1, after
which the treasure respawns at the bottom of a uniformly random tunnel.

Coordinates are (row, col) with row 0 at the top.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

HEIGHT, WIDTH = 18, 24
TOP_ROW, BOTTOM_ROW = 1, HEIGHT - 2
TUNNEL_BOTTOM = BOTTOM_ROW - 2
N_TUNNELS = 4
MIN_GAP = 3
EPISODE_LENGTH = 500
VIEW = 5
N_SYMBOLS = 5
FIRST_COL, LAST_COL = 1, WIDTH - 2

WALL, TUNNEL, TREASURE = 0, 1, 2
NOOP, UP, RIGHT, DOWN, LEFT = range(5)
ACTION_NAMES = ("noop", "up", "right", "down", "left")
DELTAS = np.array([(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)], dtype=np.int64)
FINDER, COLLECTOR = 0, 1
NO_MESSAGE = -1

BLUE = (0, 0, 255)
RED = (255, 0, 0)
GREY = (128, 128, 128)
BLACK = (0, 0, 0)
YELLOW = (255, 255, 0)


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class JointAction:
    actions: tuple[int, int]
    messages: tuple[int, int] = (NO_MESSAGE, NO_MESSAGE)

    def __post_init__(self):
        if len(self.actions) != 2 or len(self.messages) != 2:
            raise ValueError("exactly two agents")
        for a in self.actions:
            if not 0 <= a < 5:
                raise ValueError(f"action {a} outside 0..4")
        for m in self.messages:
            if not NO_MESSAGE <= m < N_SYMBOLS:
                raise ValueError(f"message {m} outside 0..4")


@dataclass(frozen=True)
class TreasureMap:
    grid: np.ndarray               # [18, 24] of WALL/TUNNEL/TREASURE
    tunnel_cols: tuple[int, ...]   # sorted left to right
    treasure_tunnel: int           # index into tunnel_cols
    positions: tuple[tuple[int, int], tuple[int, int]]  # finder, collector
    step_count: int = 0
    inbox: tuple[int, int] = (NO_MESSAGE, NO_MESSAGE)  # symbol each agent receives now
    collected: int = 0

    @property
    def treasure_pos(self) -> tuple[int, int]:
        return TUNNEL_BOTTOM, self.tunnel_cols[self.treasure_tunnel]

    @property
    def done(self) -> bool:
        return self.step_count >= EPISODE_LENGTH


def base_grid(tunnel_cols) -> np.ndarray:
    grid = np.full((HEIGHT, WIDTH), WALL, dtype=np.int8)
    grid[TOP_ROW, FIRST_COL:LAST_COL + 1] = TUNNEL
    grid[BOTTOM_ROW, FIRST_COL:LAST_COL + 1] = TUNNEL
    for c in tunnel_cols:
        grid[TOP_ROW:TUNNEL_BOTTOM + 1, c] = TUNNEL
    return grid


def valid_tunnel_cols(cols) -> bool:
    cols = sorted(cols)
    return (len(cols) == N_TUNNELS and cols[0] >= FIRST_COL and cols[-1] <= LAST_COL
            and all(b - a >= MIN_GAP for a, b in zip(cols, cols[1:])))


def sample_tunnel_cols(rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform over all valid 4-subsets of the top corridor, by rejection."""
    while True:
        cols = np.sort(rng.choice(np.arange(FIRST_COL, LAST_COL + 1), N_TUNNELS, replace=False))
        if np.all(np.diff(cols) >= MIN_GAP):
            return tuple(int(c) for c in cols)


def generate_map(rng: np.random.Generator) -> TreasureMap:
    cols = sample_tunnel_cols(rng)
    treasure = int(rng.integers(N_TUNNELS))
    collector = (TOP_ROW, int(rng.integers(FIRST_COL, LAST_COL + 1)))
    finder = (BOTTOM_ROW, int(rng.integers(FIRST_COL, LAST_COL + 1)))
    grid = base_grid(cols)
    grid[TUNNEL_BOTTOM, cols[treasure]] = TREASURE
    return TreasureMap(grid, cols, treasure, (finder, collector))


def _move(grid: np.ndarray, pos: tuple[int, int], action: int) -> tuple[int, int]:
    r, c = pos[0] + DELTAS[action][0], pos[1] + DELTAS[action][1]
    if 0 <= r < HEIGHT and 0 <= c < WIDTH and grid[r, c] != WALL:
        return int(r), int(c)
    return pos


def step_env(m: TreasureMap, joint: JointAction, rng: np.random.Generator):
    """Advance one step. Returns ``(new_map, reward, done)``."""
    if m.done:
        raise EpisodeDoneError("episode already finished; generate a new map")
    grid = m.grid
    treasure = m.treasure_tunnel
    reward = 0
    new_pos = []
    for pos, a in zip(m.positions, joint.actions):
        moved = _move(grid, pos, a)
        new_pos.append(moved)
        if moved != pos and moved == (TUNNEL_BOTTOM, m.tunnel_cols[treasure]):
            reward = 1
    if reward:
        grid = grid.copy()
        grid[TUNNEL_BOTTOM, m.tunnel_cols[treasure]] = TUNNEL
        treasure = int(rng.integers(N_TUNNELS))
        grid[TUNNEL_BOTTOM, m.tunnel_cols[treasure]] = TREASURE
    inbox = (joint.messages[COLLECTOR], joint.messages[FINDER])
    new = replace(m, grid=grid, treasure_tunnel=treasure, positions=tuple(new_pos),
                  step_count=m.step_count + 1, inbox=inbox, collected=m.collected + reward)
    return new, reward, new.done


_PALETTE = np.array([GREY, BLACK, YELLOW], dtype=np.uint8)


def render_frame(m: TreasureMap, viewer: int = COLLECTOR) -> np.ndarray:
    """Full RGB frame [18, 24, 3] uint8 with ``viewer`` blue and the partner red."""
    img = _PALETTE[m.grid]
    (r0, c0), (r1, c1) = m.positions[1 - viewer], m.positions[viewer]
    img[r0, c0] = RED
    img[r1, c1] = BLUE
    return img


def observe(m: TreasureMap, agent: int) -> np.ndarray:
    """5x5x3 view centred on ``agent``, RGB scaled to [0, 1]; off-map cells are grey."""
    pad = VIEW // 2
    frame = np.empty((HEIGHT + 2 * pad, WIDTH + 2 * pad, 3), dtype=np.uint8)
    frame[:] = GREY
    frame[pad:pad + HEIGHT, pad:pad + WIDTH] = render_frame(m, agent)
    r, c = m.positions[agent]
    return frame[r:r + VIEW, c:c + VIEW].astype(np.float32) / 255.0


def write_ppm(path, frame: np.ndarray, scale: int = 1) -> None:
    """Binary P6 PPM; ``scale`` repeats pixels for legibility."""
    img = np.asarray(frame, dtype=np.uint8)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def reachable(grid: np.ndarray, start: tuple[int, int]) -> set[tuple[int, int]]:
    """Flood fill over non-wall cells."""
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack.pop()
        for dr, dc in DELTAS[1:]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < HEIGHT and 0 <= nc < WIDTH and grid[nr, nc] != WALL \
                    and (nr, nc) not in seen:
                seen.add((int(nr), int(nc)))
                stack.append((int(nr), int(nc)))
    return seen


def check_invariants(m: TreasureMap) -> list[str]:
    """Return a list of violated map invariants (empty when the map is valid)."""
    bad = []
    g = m.grid
    if g.shape != (HEIGHT, WIDTH):
        bad.append(f"grid shape {g.shape}")
        return bad
    cols = list(m.tunnel_cols)
    if not valid_tunnel_cols(cols) or cols != sorted(cols):
        bad.append(f"tunnel columns {cols}")
    expect = base_grid(cols)
    expect[m.treasure_pos] = TREASURE
    if not np.array_equal(g, expect):
        bad.append("grid layout differs from the generation rules")
    if not 0 <= m.treasure_tunnel < N_TUNNELS:
        bad.append("treasure tunnel index")
    fr, fc = m.positions[FINDER]
    if fr != BOTTOM_ROW or not FIRST_COL <= fc <= LAST_COL:
        bad.append(f"finder at {(fr, fc)}")
    cr, cc = m.positions[COLLECTOR]
    if not (TOP_ROW <= cr <= TUNNEL_BOTTOM and g[cr, cc] != WALL):
        bad.append(f"collector at {(cr, cc)}")
    return bad


# ------------------------------------------------------------ vectorized copies

@dataclass
class VecTreasureEnv:
    """``n`` independent Treasure Hunt copies advanced in lockstep.

    Each copy owns a generator so copies are independent streams; map
    generation and respawns consume them exactly as :func:`generate_map`
    and :func:`step_env` do.
    """

    rngs: list[np.random.Generator]
    maps_cols: np.ndarray = field(init=False)
    treasure: np.ndarray = field(init=False)
    pos: np.ndarray = field(init=False)
    inbox: np.ndarray = field(init=False)
    t: int = field(init=False, default=0)

    @classmethod
    def from_seed(cls, seed_seq: np.random.SeedSequence | int, n: int) -> "VecTreasureEnv":
        ss = seed_seq if isinstance(seed_seq, np.random.SeedSequence) else np.random.SeedSequence(seed_seq)
        return cls([np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n)])

    def __post_init__(self):
        self.n = len(self.rngs)
        self.reset()

    def reset(self) -> None:
        maps = [generate_map(r) for r in self.rngs]
        self.load_maps(maps)

    def load_maps(self, maps: list[TreasureMap]) -> None:
        self.maps_cols = np.array([m.tunnel_cols for m in maps], dtype=np.int64)
        self.treasure = np.array([m.treasure_tunnel for m in maps], dtype=np.int64)
        self.pos = np.array([m.positions for m in maps], dtype=np.int64)  # [B, agent, 2]
        self.inbox = np.array([m.inbox for m in maps], dtype=np.int64)
        self.t = maps[0].step_count
        self.walls = np.stack([base_grid(m.tunnel_cols) == WALL for m in maps])
        pad = VIEW // 2
        self._frame = np.empty((self.n, HEIGHT + 2 * pad, WIDTH + 2 * pad, 3), dtype=np.float32)
        self._frame[:] = np.array(GREY, np.float32) / 255
        self._frame[:, pad:pad + HEIGHT, pad:pad + WIDTH] = np.where(
            self.walls[..., None], np.array(GREY, np.float32) / 255, 0.0)
        self._paint_treasure(np.arange(self.n), YELLOW)

    def _paint_treasure(self, idx, color) -> None:
        pad = VIEW // 2
        cols = self.maps_cols[idx, self.treasure[idx]]
        self._frame[idx, TUNNEL_BOTTOM + pad, cols + pad] = np.array(color, np.float32) / 255

    @property
    def done(self) -> bool:
        return self.t >= EPISODE_LENGTH

    def treasure_cols(self) -> np.ndarray:
        return self.maps_cols[np.arange(self.n), self.treasure]

    def to_map(self, i: int) -> TreasureMap:
        cols = tuple(int(c) for c in self.maps_cols[i])
        grid = base_grid(cols)
        grid[TUNNEL_BOTTOM, cols[self.treasure[i]]] = TREASURE
        return TreasureMap(grid, cols, int(self.treasure[i]),
                           tuple((int(r), int(c)) for r, c in self.pos[i]),
                           self.t, tuple(int(x) for x in self.inbox[i]))

    def observe(self, agent: int) -> np.ndarray:
        """[n, 5, 5, 3] float32 views for ``agent`` in every copy."""
        b = np.arange(self.n)[:, None, None]
        r = self.pos[:, agent, 0][:, None, None] + np.arange(VIEW)[None, :, None]
        c = self.pos[:, agent, 1][:, None, None] + np.arange(VIEW)[None, None, :]
        obs = self._frame[b, r, c].copy()
        pad = VIEW // 2
        rel = self.pos[:, 1 - agent] - self.pos[:, agent] + pad
        vis = np.all((rel >= 0) & (rel < VIEW), axis=1)
        idx = np.nonzero(vis)[0]
        obs[idx, rel[idx, 0], rel[idx, 1]] = np.array(RED, np.float32) / 255
        obs[:, pad, pad] = np.array(BLUE, np.float32) / 255
        return obs

    def step(self, actions: np.ndarray, messages: np.ndarray) -> np.ndarray:
        """``actions``/``messages``: [n, 2]. Returns the shared reward per copy."""
        if self.done:
            raise EpisodeDoneError("episode already finished; call reset()")
        actions = np.asarray(actions, dtype=np.int64)
        target = self.pos + DELTAS[actions]
        b = np.arange(self.n)[:, None]
        inside = ((target[..., 0] >= 0) & (target[..., 0] < HEIGHT)
                  & (target[..., 1] >= 0) & (target[..., 1] < WIDTH))
        tr = np.clip(target[..., 0], 0, HEIGHT - 1)
        tc = np.clip(target[..., 1], 0, WIDTH - 1)
        ok = inside & ~self.walls[b, tr, tc]
        new = np.where(ok[..., None], target, self.pos)
        moved = np.any(new != self.pos, axis=-1)
        tcol = self.treasure_cols()[:, None]
        hit = moved & (new[..., 0] == TUNNEL_BOTTOM) & (new[..., 1] == tcol)
        reward = hit.any(axis=1).astype(np.float32)
        self.pos = new
        got = np.nonzero(reward)[0]
        if got.size:
            pad = VIEW // 2
            self._frame[got, TUNNEL_BOTTOM + pad, self.maps_cols[got, self.treasure[got]] + pad] = 0.0
            for i in got:
                self.treasure[i] = int(self.rngs[i].integers(N_TUNNELS))
            self._paint_treasure(got, YELLOW)
        self.inbox = np.asarray(messages, dtype=np.int64)[:, ::-1].copy()
        self.t += 1
        return reward


# ------------------------------------------------------------ scripted agents

def navigate(pos: np.ndarray, target_col: np.ndarray) -> np.ndarray:
    """Shortest-path action for collectors at ``pos`` [n, 2] to reach the
    bottom of the tunnel at ``target_col``; at the bottom already, step up so
    a treasure respawning underfoot can be collected by stepping back down."""
    r, c = pos[:, 0], pos[:, 1]
    act = np.full(len(pos), NOOP)
    in_target = c == target_col
    at_bottom = in_target & (r == TUNNEL_BOTTOM)
    act[in_target & ~at_bottom] = DOWN
    act[at_bottom] = UP
    wrong = ~in_target
    act[wrong & (r > TOP_ROW)] = UP
    top = wrong & (r == TOP_ROW)
    act[top & (c < target_col)] = RIGHT
    act[top & (c > target_col)] = LEFT
    return act


class ScriptedFinder:
    """Sits still and broadcasts the index (left to right) of the treasure tunnel."""

    def act(self, env: VecTreasureEnv, received: np.ndarray):
        return np.full(env.n, NOOP), env.treasure.copy()


class RandomFinder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def act(self, env: VecTreasureEnv, received: np.ndarray):
        return np.full(env.n, NOOP), self.rng.integers(0, N_SYMBOLS, size=env.n)


class ScriptedCollector:
    """Collector with privileged knowledge of the tunnel layout.

    ``mode='oracle'`` also knows where the treasure is; ``'decode'`` heads for
    the tunnel named by the last received symbol (0-3) and sweeps otherwise;
    ``'sweep'`` ignores messages and visits tunnels in turn.
    """

    def __init__(self, mode: str = "decode"):
        if mode not in ("oracle", "decode", "sweep"):
            raise ValueError(mode)
        self.mode = mode
        self.sweep_idx: np.ndarray | None = None

    def reset(self, n: int) -> None:
        self.sweep_idx = np.zeros(n, dtype=np.int64)

    def act(self, env: VecTreasureEnv, received: np.ndarray):
        if self.sweep_idx is None or len(self.sweep_idx) != env.n or env.t == 0:
            self.reset(env.n)
        rows = np.arange(env.n)
        pos = env.pos[:, COLLECTOR]
        sweep_col = env.maps_cols[rows, self.sweep_idx]
        arrived = (pos[:, 0] == TUNNEL_BOTTOM) & (pos[:, 1] == sweep_col)
        self.sweep_idx = np.where(arrived, (self.sweep_idx + 1) % N_TUNNELS, self.sweep_idx)
        target = env.maps_cols[rows, self.sweep_idx]
        if self.mode == "oracle":
            target = env.treasure_cols()
        elif self.mode == "decode":
            known = (received >= 0) & (received < N_TUNNELS)
            named = env.maps_cols[rows, np.clip(received, 0, N_TUNNELS - 1)]
            target = np.where(known, named, target)
        return navigate(pos, target), np.full(env.n, NO_MESSAGE)
