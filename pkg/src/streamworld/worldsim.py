"""Procedural navigable grid world with an exact oracle renderer.

Replaces a curated video dataset: every frame comes with its exact camera
pose and discrete action, revisit trajectories are free to construct, and
the renderer is deterministic, so it doubles as the evaluation oracle.

Coordinates are in cell units; cell (i, j) spans [i, i+1) x [j, j+1), the
camera rides at height 0.5. Rotation is yaw-only: yaw 0 looks along +x and
turning left increases yaw.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng

# action bitmask layout (mirrored by the browser client)
KEY_FORWARD = 1
KEY_BACK = 2
KEY_STRAFE_LEFT = 4
KEY_STRAFE_RIGHT = 8
KEY_TURN_LEFT = 16
KEY_TURN_RIGHT = 32
KEY_NAMES = {
    "forward": KEY_FORWARD, "back": KEY_BACK,
    "strafe_left": KEY_STRAFE_LEFT, "strafe_right": KEY_STRAFE_RIGHT,
    "turn_left": KEY_TURN_LEFT, "turn_right": KEY_TURN_RIGHT,
}

MOVE_STEP = 0.25          # cells per move bit per tick
TURN_STEP_DEG = 15.0      # degrees per turn bit per tick
KEY_THRESHOLD_T = 0.125   # cells; translation component above this sets a bit
KEY_THRESHOLD_R = 7.5     # degrees
COLLIDE_MARGIN = 0.2      # camera keeps this distance from wall faces

CEILING_COLOR = np.array([68, 80, 94], dtype=np.uint8)
FLOOR_COLOR = np.array([48, 42, 38], dtype=np.uint8)
CHUNK_FRAMES = 4

TRAJECTORY_KINDS = ("random_walk", "loop", "out_and_back")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height}


def default_intrinsics(size: int = 64) -> Intrinsics:
    # 90 degree horizontal FOV: focal = (w/2) / tan(45deg)
    return Intrinsics(fx=size / 2.0, fy=size / 2.0, cx=size / 2.0, cy=size / 2.0,
                      width=size, height=size)


def rotation_from_yaw(yaw: float) -> np.ndarray:
    """Camera-to-world rotation; columns are (right, down, forward)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([
        [s, 0.0, c],
        [-c, 0.0, s],
        [0.0, -1.0, 0.0],
    ], dtype=np.float64)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray      # 3x3 camera-to-world
    translation: np.ndarray   # camera center, world cells
    intrinsics: Intrinsics

    @staticmethod
    def from_yaw(x: float, y: float, yaw: float, intrinsics: Intrinsics) -> "CameraPose":
        return CameraPose(rotation_from_yaw(yaw), np.array([x, y, 0.5], dtype=np.float64), intrinsics)

    @property
    def yaw(self) -> float:
        fwd = self.rotation[:, 2]
        return math.atan2(fwd[1], fwd[0])

    @property
    def forward2(self) -> np.ndarray:
        return self.rotation[:2, 2]

    @property
    def right2(self) -> np.ndarray:
        return self.rotation[:2, 0]

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation

    def rt_matrix(self) -> np.ndarray:
        """3x4 [R|T] row-major (camera-to-world)."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# world generation


@dataclass
class GridWorld:
    seed: int
    size: int
    occupancy: np.ndarray  # (size, size) bool, True = wall
    palette: np.ndarray    # (size, size, 3) uint8, color of each wall cell

    def is_wall(self, ix: int, iy: int) -> bool:
        if ix < 0 or iy < 0 or ix >= self.size or iy >= self.size:
            return True
        return bool(self.occupancy[ix, iy])

    def is_free_point(self, x: float, y: float) -> bool:
        return not self.is_wall(int(math.floor(x)), int(math.floor(y)))

    def free_cells(self) -> np.ndarray:
        fx, fy = np.nonzero(~self.occupancy)
        return np.stack([fx, fy], axis=1)


def _cell_color(seed: int, ix: int, iy: int) -> np.ndarray:
    h = hashlib.blake2b(f"{seed}:{ix}:{iy}".encode(), digest_size=3).digest()
    # keep colors bright enough to survive distance shading
    return np.array([80 + h[0] % 176, 80 + h[1] % 176, 80 + h[2] % 176], dtype=np.uint8)


def _connected_free_fraction(occ: np.ndarray) -> tuple[bool, float]:
    size = occ.shape[0]
    free = ~occ
    n_free = int(free.sum())
    interior = (size - 2) * (size - 2)
    if n_free == 0:
        return False, 0.0
    start = tuple(np.argwhere(free)[0])
    seen = np.zeros_like(free)
    stack = [start]
    seen[start] = True
    count = 0
    while stack:
        x, y = stack.pop()
        count += 1
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < size and 0 <= ny < size and free[nx, ny] and not seen[nx, ny]:
                seen[nx, ny] = True
                stack.append((nx, ny))
    return count == n_free, n_free / interior


def generate_world(seed: int, size: int = 24) -> GridWorld:
    """Deterministic in seed; retries internal sub-seeds until the free
    region is connected and covers >= 60% of the interior."""
    if size < 4:
        raise ValueError("world size must be >= 4")
    for attempt in range(64):
        rng = Rng(seed).child("world", attempt)
        occ = np.zeros((size, size), dtype=bool)
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
        interior = rng.uniform(size=(size - 2, size - 2)) < 0.16
        occ[1:-1, 1:-1] = interior
        ok, frac = _connected_free_fraction(occ)
        if ok and frac >= 0.6:
            palette = np.zeros((size, size, 3), dtype=np.uint8)
            for ix in range(size):
                for iy in range(size):
                    palette[ix, iy] = _cell_color(seed, ix, iy)
            return GridWorld(seed=seed, size=size, occupancy=occ, palette=palette)
    raise RuntimeError(f"could not generate a connected world for seed {seed}")


def spawn_pose(world: GridWorld, intrinsics: Intrinsics) -> CameraPose:
    """Deterministic spawn: the free cell closest to the grid center, yaw 0."""
    cells = world.free_cells()
    center = (world.size - 1) / 2.0
    d = np.abs(cells - center).sum(axis=1)
    ix, iy = cells[int(np.argmin(d))]
    return CameraPose.from_yaw(ix + 0.5, iy + 0.5, 0.0, intrinsics)


# ---------------------------------------------------------------------------
# raycasting (vectorized DDA over all columns at once)


def cast_rays(world: GridWorld, pose: CameraPose) -> dict:
    """March one ray per image column against the occupancy grid.

    Returns perpendicular depth, Euclidean distance, and the wall cell hit
    per column. The outer boundary is walled, so every ray terminates.
    """
    intr = pose.intrinsics
    x0, y0 = pose.translation[0], pose.translation[1]
    if not world.is_free_point(x0, y0):
        raise ValueError("camera pose is inside a wall")
    w = intr.width
    cols = np.arange(w)
    px = (cols + 0.5 - intr.cx) / intr.fx
    fwd, right = pose.forward2, pose.right2
    dirx = fwd[0] + px * right[0]
    diry = fwd[1] + px * right[1]
    # parameter t along (dirx, diry) equals perpendicular depth because the
    # direction has unit forward component
    eps = 1e-12
    inv_dx = 1.0 / np.where(np.abs(dirx) < eps, eps, dirx)
    inv_dy = 1.0 / np.where(np.abs(diry) < eps, eps, diry)
    map_x = np.full(w, int(math.floor(x0)))
    map_y = np.full(w, int(math.floor(y0)))
    step_x = np.where(dirx >= 0, 1, -1)
    step_y = np.where(diry >= 0, 1, -1)
    side_x = np.where(dirx >= 0, (map_x + 1 - x0), (x0 - map_x)) * np.abs(inv_dx)
    side_y = np.where(diry >= 0, (map_y + 1 - y0), (y0 - map_y)) * np.abs(inv_dy)
    delta_x = np.abs(inv_dx)
    delta_y = np.abs(inv_dy)
    depth = np.zeros(w)
    side = np.zeros(w, dtype=np.int8)
    active = np.ones(w, dtype=bool)
    for _ in range(4 * world.size):
        if not active.any():
            break
        take_x = active & (side_x <= side_y)
        take_y = active & ~take_x
        map_x = np.where(take_x, map_x + step_x, map_x)
        depth = np.where(take_x, side_x, depth)
        side_x = np.where(take_x, side_x + delta_x, side_x)
        map_y = np.where(take_y, map_y + step_y, map_y)
        depth = np.where(take_y, side_y, depth)
        side_y = np.where(take_y, side_y + delta_y, side_y)
        side = np.where(take_x, 0, np.where(take_y, 1, side))
        hit = world.occupancy[np.clip(map_x, 0, world.size - 1), np.clip(map_y, 0, world.size - 1)]
        active &= ~hit
    euclid = depth * np.sqrt(1.0 + px * px)
    return {"depth": depth, "euclid": euclid, "cell_x": map_x, "cell_y": map_y, "side": side}


def render(world: GridWorld, pose: CameraPose) -> np.ndarray:
    """Column raycast render: palette walls with distance shading, constant
    floor/ceiling. Deterministic: identical (world, pose) gives identical bytes."""
    intr = pose.intrinsics
    rays = cast_rays(world, pose)
    w, h = intr.width, intr.height
    depth = np.maximum(rays["depth"], 1e-6)
    shade = 1.0 / (1.0 + 0.25 * rays["euclid"])
    wall_rgb = world.palette[rays["cell_x"], rays["cell_y"]].astype(np.float64) * shade[:, None]
    # project wall top (z=1) and bottom (z=0) from camera height 0.5
    v_top = intr.cy - 0.5 * intr.fy / depth
    v_bot = intr.cy + 0.5 * intr.fy / depth
    rows = np.arange(h, dtype=np.float64) + 0.5
    frame = np.empty((h, w, 3), dtype=np.uint8)
    above = rows[:, None] < v_top[None, :]
    below = rows[:, None] >= v_bot[None, :]
    wall = ~(above | below)
    frame[:] = CEILING_COLOR
    frame[below] = FLOOR_COLOR
    wall_u8 = np.clip(wall_rgb, 0, 255).astype(np.uint8)
    frame[wall] = np.broadcast_to(wall_u8[None, :, :], (h, w, 3))[wall]
    return frame


# ---------------------------------------------------------------------------
# kinematics


def _clamp_axis(world: GridWorld, x: float, y: float, dx: float, along_x: bool) -> float:
    """Move one axis with a wall margin; returns the clamped coordinate."""
    cur = x if along_x else y
    target = cur + dx
    if dx == 0.0:
        return cur
    probe = target + math.copysign(COLLIDE_MARGIN, dx)
    cell = (int(math.floor(probe)), int(math.floor(y))) if along_x else (int(math.floor(x)), int(math.floor(probe)))
    if not world.is_wall(*cell):
        return target
    boundary = math.floor(probe) if dx > 0 else math.floor(probe) + 1.0
    clamped = boundary - math.copysign(COLLIDE_MARGIN, dx)
    # never move backwards because of the clamp
    if dx > 0:
        return min(target, max(cur, clamped))
    return max(target, min(cur, clamped))


def step_pose(pose: CameraPose, action: int, world: GridWorld | None = None) -> CameraPose:
    """Apply one action tick: turn first, then translate along the new heading.

    With a world, translation clamps against walls (axis-separable, margin
    COLLIDE_MARGIN); without, it is the pure kinematic map used for key
    decoding (the server applies collision separately).
    """
    yaw = pose.yaw
    turn = (1 if action & KEY_TURN_LEFT else 0) - (1 if action & KEY_TURN_RIGHT else 0)
    yaw = wrap_angle(yaw + math.radians(TURN_STEP_DEG) * turn)
    fwd = np.array([math.cos(yaw), math.sin(yaw)])
    right = np.array([math.sin(yaw), -math.cos(yaw)])
    move = (1 if action & KEY_FORWARD else 0) - (1 if action & KEY_BACK else 0)
    strafe = (1 if action & KEY_STRAFE_RIGHT else 0) - (1 if action & KEY_STRAFE_LEFT else 0)
    delta = MOVE_STEP * (move * fwd + strafe * right)
    x, y = pose.translation[0], pose.translation[1]
    if world is None:
        x, y = x + delta[0], y + delta[1]
    else:
        x = _clamp_axis(world, x, y, delta[0], along_x=True)
        y = _clamp_axis(world, x, y, delta[1], along_x=False)
    return CameraPose.from_yaw(x, y, yaw, pose.intrinsics)


def keys_to_pose(pose: CameraPose, keys: int) -> CameraPose:
    """Inverse companion of pose_to_keys: canonical step sizes, no collision."""
    return step_pose(pose, keys, world=None)


def pose_to_keys(pose_prev: CameraPose, pose_next: CameraPose) -> int:
    """Threshold the relative motion back onto the discrete key lattice."""
    keys = 0
    dyaw = math.degrees(wrap_angle(pose_next.yaw - pose_prev.yaw))
    if dyaw > KEY_THRESHOLD_R:
        keys |= KEY_TURN_LEFT
    elif dyaw < -KEY_THRESHOLD_R:
        keys |= KEY_TURN_RIGHT
    dt = pose_next.translation[:2] - pose_prev.translation[:2]
    # translation happens along the post-turn heading
    f = float(dt @ pose_next.forward2)
    r = float(dt @ pose_next.right2)
    if f > KEY_THRESHOLD_T:
        keys |= KEY_FORWARD
    elif f < -KEY_THRESHOLD_T:
        keys |= KEY_BACK
    if r > KEY_THRESHOLD_T:
        keys |= KEY_STRAFE_RIGHT
    elif r < -KEY_THRESHOLD_T:
        keys |= KEY_STRAFE_LEFT
    return keys


def invert_action(action: int) -> int:
    inv = 0
    for a, b in ((KEY_FORWARD, KEY_BACK), (KEY_STRAFE_LEFT, KEY_STRAFE_RIGHT),
                 (KEY_TURN_LEFT, KEY_TURN_RIGHT)):
        if action & a:
            inv |= b
        if action & b:
            inv |= a
    return inv


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Episode:
    frames: np.ndarray          # (L, h, w, 3) uint8
    poses: list[CameraPose]     # length L
    actions: np.ndarray         # (L,) uint8; actions[t] moved pose[t-1] -> pose[t]
    kind: str

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def n_chunks(self) -> int:
        return len(self.poses) // CHUNK_FRAMES


_WALK_ACTIONS = (KEY_FORWARD, KEY_FORWARD, KEY_FORWARD, KEY_BACK,
                 KEY_TURN_LEFT, KEY_TURN_RIGHT, KEY_STRAFE_LEFT, KEY_STRAFE_RIGHT, 0)


def _collision_free(world: GridWorld, pose: CameraPose, action: int) -> bool:
    free = step_pose(pose, action, world=None)
    clamped = step_pose(pose, action, world=world)
    return np.allclose(free.translation, clamped.translation, atol=1e-12)


def _random_walk_actions(world: GridWorld, start: CameraPose, steps: int, rng: Rng) -> list[int]:
    actions = []
    pose = start
    for i in range(steps):
        pick = 0
        for _ in range(16):
            cand = rng.choice(_WALK_ACTIONS)
            if cand == 0 or _collision_free(world, pose, cand):
                pick = cand
                break
        else:
            pick = KEY_TURN_LEFT  # boxed in: turn in place
        if pick != 0 and not _collision_free(world, pose, pick):
            pick = KEY_TURN_LEFT
        actions.append(pick)
        pose = step_pose(pose, pick, world=world)
    return actions


def _square_loop_actions(world: GridWorld, start: CameraPose) -> list[int] | None:
    """Side-1 square: 4 forward steps and a 90 degree left turn, four times.
    Needs a free 2x2 block at the spawn; returns None when unavailable."""
    ix, iy = int(start.translation[0]), int(start.translation[1])
    block = [(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)]
    if any(world.is_wall(cx, cy) for cx, cy in block):
        return None
    seq = []
    for _ in range(4):
        seq += [KEY_FORWARD] * 4 + [KEY_TURN_LEFT] * 6
    return seq


def make_trajectory(world: GridWorld, kind: str, length: int, seed: int,
                    intrinsics: Intrinsics | None = None) -> Episode:
    """Build an episode of `length` frames (divisible by 4).

    out_and_back replays the outbound action list inverted, so the pose
    sequence of the return half is exactly the reversed forward half. loop
    returns to the start pose exactly (square path, or a full turn in place).
    """
    if length % CHUNK_FRAMES != 0 or length < CHUNK_FRAMES:
        raise ValueError("episode length must be a positive multiple of 4")
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    intr = intrinsics or default_intrinsics()
    rng = Rng(seed).child("traj", kind, length)
    start = spawn_pose(world, intr)
    # randomize spawn cell/yaw a little so episodes differ
    cells = world.free_cells()
    ix, iy = cells[int(rng.integers(0, len(cells)))]
    yaw = float(rng.integers(0, 24)) * math.radians(TURN_STEP_DEG)
    start = CameraPose.from_yaw(ix + 0.5, iy + 0.5, yaw, intr)

    steps = length - 1
    if kind == "random_walk":
        actions = [0] + _random_walk_actions(world, start, steps, rng)
    elif kind == "out_and_back":
        half = length // 2
        out = _random_walk_actions(world, start, half - 1, rng)
        actions = [0] + out + [0] + [invert_action(a) for a in reversed(out)]
    else:  # loop
        seq = _square_loop_actions(world, start)
        if seq is None:
            seq = [KEY_TURN_LEFT] * 24
        if len(seq) > steps:
            if steps >= 24:
                seq = [KEY_TURN_LEFT] * 24
            else:
                raise ValueError(f"loop needs at least 25 frames, got {length}")
        actions = [0] + seq + [0] * (steps - len(seq))

    poses = [start]
    for a in actions[1:]:
        poses.append(step_pose(poses[-1], a, world=world))
    frames = np.stack([render(world, p) for p in poses])
    return Episode(frames=frames, poses=poses, actions=np.array(actions, dtype=np.uint8), kind=kind)


def chunk_keys(actions: np.ndarray) -> int:
    """Dominant action of a chunk: a bit is set when present in at least
    half of the chunk's frames."""
    keys = 0
    for bit in KEY_NAMES.values():
        if int(np.count_nonzero(np.asarray(actions) & bit)) * 2 >= len(actions):
            keys |= bit
    return keys
