"""Grid-world bridge deck with procedural cracks and moving traffic.

The deck is split into square cells; a survey UAV moves cell to cell, scanning
each cell it enters with a pluggable crack detector. Traffic blocks scanning:
while a car occupies the scan region the pending scan stays unresolved, and
the agent may pause (bounded by a pause budget) to wait it out or move on and
revisit later. Rewards are small integers so episode accounting is exact.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UP", "DOWN", "LEFT", "RIGHT", "PAUSE", "ACTION_NAMES",
    "R_MOVE", "R_PAUSE", "R_REVISIT", "R_CRACK", "R_NEW", "R_END",
    "ScenarioConfig", "CrackSpec", "CarState", "WorldState", "EnvState",
    "RewardBreakdown", "StepOutcome", "BridgeEnv",
    "bezier_point", "generate_crack", "crack_polyline", "crack_cells",
    "reset", "step", "advance_traffic", "traffic_blocked", "observe",
    "action_mask", "episode_return",
    "parse_scenario_file", "write_scenario_file", "write_trace_csv",
    "TRACE_COLUMNS", "SCENARIO_KEYS", "atomic_write_text",
]

UP, DOWN, LEFT, RIGHT, PAUSE = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "pause")
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}

# Per-event reward constants (movement, pause, revisit, confirmed crack,
# newly scanned cell, full coverage).
R_MOVE = -1
R_PAUSE = 0
R_REVISIT = -1
R_CRACK = 10
R_NEW = 5
R_END = 20

TRACE_COLUMNS = ("step", "x", "y", "action", "s_t", "r_m", "r_p", "r_v",
                 "r_c", "r_nl", "r_e", "r_total", "cracks_detected_cum")


@dataclass(frozen=True)
class ScenarioConfig:
    """Deck geometry, crack/traffic population, and episode limits.

    fp_penalty is an experimentation knob (reward added per false-positive
    detection, default 0 so totals match the per-event constants exactly);
    it is not part of the scenario file format.
    """
    length_m: float = 800.0
    breadth_m: float = 600.0
    cell_m: float = 100.0
    uav_height_m: float = 50.0
    uav_speed_mps: float = 25.0
    n_cracks: int = 5
    n_false_cracks: int = 0
    n_cars: int = 2
    pause_limit: int = 200
    max_steps: int = 400
    seed: int = 0
    detector: str = "oracle"
    temporal_penalty_on_pause: bool = True
    fp_penalty: int = 0

    def __post_init__(self):
        if min(self.length_m, self.breadth_m, self.cell_m) <= 0:
            raise ValueError("deck dimensions and cell size must be positive")
        for name in ("length_m", "breadth_m"):
            v = getattr(self, name)
            if abs(v / self.cell_m - round(v / self.cell_m)) > 1e-9:
                raise ValueError(f"{name}={v} is not a multiple of cell_m={self.cell_m}")
        if self.uav_speed_mps <= 0:
            raise ValueError("uav_speed_mps must be positive")
        if self.n_cracks < 0 or self.n_false_cracks < 0 or self.n_cars < 0:
            raise ValueError("population counts must be >= 0")
        if self.pause_limit < 0:
            raise ValueError("pause_limit must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def n_cols(self):
        return int(round(self.length_m / self.cell_m))

    @property
    def n_rows(self):
        return int(round(self.breadth_m / self.cell_m))

    @property
    def n_cells(self):
        return self.n_cols * self.n_rows

    @property
    def tick_s(self):
        """Seconds per step: one cell traversal at cruise speed."""
        return self.cell_m / self.uav_speed_mps


@dataclass(frozen=True)
class CrackSpec:
    """One crack: kind in {line, fork, bezier}, control points in deck meters.

    line: 2 points; fork: 3 points (trunk start, shared joint, branch end);
    bezier: 4 cubic control points. width_m is the physical stroke width.
    """
    kind: str
    points: tuple
    width_m: float
    is_false: bool = False

    def as_array(self):
        return np.array(self.points, dtype=np.float64)


@dataclass
class CarState:
    lane: int          # grid row the car drives along
    x_m: float         # longitudinal position in meters
    direction: int     # +1 or -1
    speed_mps: float


@dataclass
class WorldState:
    """Immutable for an episode except car positions."""
    config: ScenarioConfig
    cracks: list
    cars: list
    scan_seed: int = 0                # root of the per-scan rng children
    crack_cell_map: dict = field(default_factory=dict)  # cell -> tuple of crack ids

    def scan_rng(self, k):
        """Fresh generator for scan number k. A scan consumes a varying
        amount of randomness depending on what sits in the cell, so giving
        every scan its own child stream keeps later scans aligned across
        scenario variants that share a seed."""
        return np.random.default_rng(np.random.SeedSequence((self.scan_seed, k)))

    @property
    def n_true(self):
        return sum(1 for c in self.cracks if not c.is_false)

    def true_ids_in(self, cell):
        return tuple(i for i in self.crack_cell_map.get(cell, ())
                     if not self.cracks[i].is_false)

    def ids_in(self, cell):
        return self.crack_cell_map.get(cell, ())


@dataclass(frozen=True)
class EnvState:
    x: int
    y: int
    s_t: int
    visited: frozenset
    detected: frozenset        # ids of confirmed true cracks
    detected_cells: frozenset  # cells intersected by confirmed true cracks
    fp_cells: frozenset        # cells already flagged as false findings
    t_pause: int
    step_idx: int
    done: bool
    pending_scan: bool
    n_scans: int
    false_positives: int
    n_cols: int
    n_rows: int
    pause_limit: int


@dataclass(frozen=True)
class RewardBreakdown:
    """Integer reward components for one step; total is their exact sum.
    r_fp is nonzero only when ScenarioConfig.fp_penalty is set."""
    r_m: int = 0
    r_p: int = 0
    r_v: int = 0
    r_c: int = 0
    r_nl: int = 0
    r_e: int = 0
    r_fp: int = 0

    @property
    def total(self):
        return self.r_m + self.r_p + self.r_v + self.r_c + self.r_nl + self.r_e + self.r_fp


@dataclass(frozen=True)
class StepOutcome:
    state: EnvState
    reward: RewardBreakdown
    done: bool
    info: dict


def bezier_point(points, t):
    """Cubic Bezier point; t must lie in [0, 1]."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"bezier parameter t={t} outside [0, 1]")
    p = np.asarray(points, dtype=np.float64)
    if p.shape != (4, 2):
        raise ValueError(f"cubic bezier needs 4 control points, got {p.shape}")
    u = 1.0 - t
    return (u ** 3 * p[0] + 3 * u ** 2 * t * p[1]
            + 3 * u * t ** 2 * p[2] + t ** 3 * p[3])


def crack_polyline(crack, n=64):
    """Sample the crack geometry as an (m, 2) polyline in deck meters."""
    pts = crack.as_array()
    if crack.kind == "line":
        t = np.linspace(0.0, 1.0, n)[:, None]
        return pts[0] + t * (pts[1] - pts[0])
    if crack.kind == "fork":
        h = max(n // 2, 2)
        t = np.linspace(0.0, 1.0, h)[:, None]
        trunk = pts[0] + t * (pts[1] - pts[0])
        branch = pts[1] + t * (pts[2] - pts[1])
        return np.vstack([trunk, branch])
    if crack.kind == "bezier":
        return np.array([bezier_point(pts, t) for t in np.linspace(0.0, 1.0, n)])
    raise ValueError(f"unknown crack kind {crack.kind!r}")


def crack_cells(crack, cell_m, n_cols, n_rows):
    """Grid cells the crack centerline passes through."""
    pts = crack_polyline(crack, n=256)
    cx = np.clip((pts[:, 0] // cell_m).astype(int), 0, n_cols - 1)
    cy = np.clip((pts[:, 1] // cell_m).astype(int), 0, n_rows - 1)
    return set(zip(cx.tolist(), cy.tolist()))


def _extent(points):
    p = np.asarray(points)
    d = p[:, None, :] - p[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


def generate_crack(kind, rng, config, is_false=False, max_extent_m=20.0,
                   length_range=(5.0, 20.0), width_range=(0.2, 1.0)):
    """Random crack of the given kind, resampled until it fits the deck and
    its extent stays within max_extent_m. Raises after 1000 attempts.

    Total path length is uniform in length_range; forks split it 60/40
    between trunk and branch so the extent bound holds by construction.
    """
    lo = np.zeros(2)
    hi = np.array([config.length_m, config.breadth_m])
    for _ in range(1000):
        total = rng.uniform(*length_range)
        anchor = rng.uniform(lo, hi)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        if kind == "line":
            points = (anchor, anchor + total * u)
        elif kind == "fork":
            joint = anchor + 0.6 * total * u
            phi = theta + rng.choice([-1.0, 1.0]) * rng.uniform(np.pi / 6, 5 * np.pi / 6)
            points = (anchor, joint,
                      joint + 0.4 * total * np.array([np.cos(phi), np.sin(phi)]))
        elif kind == "bezier":
            perp = np.array([-u[1], u[0]])
            o1, o2 = rng.uniform(-0.3 * total, 0.3 * total, size=2)
            points = (anchor,
                      anchor + total / 3 * u + o1 * perp,
                      anchor + 2 * total / 3 * u + o2 * perp,
                      anchor + total * u)
        else:
            raise ValueError(f"unknown crack kind {kind!r}")
        arr = np.array(points)
        if np.all(arr >= lo) and np.all(arr <= hi) and _extent(arr) <= max_extent_m:
            return CrackSpec(kind=kind, points=tuple(map(tuple, arr)),
                             width_m=float(rng.uniform(*width_range)),
                             is_false=is_false)
    raise RuntimeError(f"could not place a {kind} crack in 1000 attempts")


CRACK_KINDS = ("line", "fork", "bezier")


def reset(config, seed=None):
    """Build a fresh world and initial state.

    Child rng streams are split by purpose (true cracks / false cracks /
    cars / scans) so scenario variants that add false cracks or cars keep
    the rest of the layout identical under the same seed. Scan randomness
    is split once more per scan (WorldState.scan_rng), which keeps whole
    missions aligned step for step across such variants.
    """
    seed = config.seed if seed is None else int(seed)
    ss = np.random.SeedSequence(seed)
    ss_true, ss_false, ss_cars, ss_scan = ss.spawn(4)
    rng_true, rng_false, rng_cars = (np.random.default_rng(s)
                                     for s in (ss_true, ss_false, ss_cars))
    cracks = [generate_crack(CRACK_KINDS[rng_true.integers(len(CRACK_KINDS))],
                             rng_true, config)
              for _ in range(config.n_cracks)]
    true_cells = set()
    for crack in cracks:
        true_cells |= crack_cells(crack, config.cell_m, config.n_cols, config.n_rows)
    # false cracks go to cells free of true cracks: each distractor is then a
    # separable finding, and adding distractors to a seeded scenario cannot
    # change how the true cracks render
    for _ in range(config.n_false_cracks):
        for _attempt in range(500):
            cand = generate_crack(CRACK_KINDS[rng_false.integers(len(CRACK_KINDS))],
                                  rng_false, config, is_false=True)
            if not true_cells & crack_cells(cand, config.cell_m,
                                            config.n_cols, config.n_rows):
                cracks.append(cand)
                break
        else:
            raise ValueError("no room for a false crack clear of true cracks")
    cars = [CarState(lane=int(rng_cars.integers(config.n_rows)),
                     x_m=float(rng_cars.uniform(0.0, config.length_m)),
                     direction=int(rng_cars.choice([-1, 1])),
                     speed_mps=float(rng_cars.uniform(10.0, 25.0)))
            for _ in range(config.n_cars)]
    cell_map = {}
    for i, crack in enumerate(cracks):
        for cell in crack_cells(crack, config.cell_m, config.n_cols, config.n_rows):
            cell_map.setdefault(cell, []).append(i)
    world = WorldState(config=config, cracks=cracks, cars=cars,
                       scan_seed=int(ss_scan.generate_state(1)[0]),
                       crack_cell_map={k: tuple(v) for k, v in cell_map.items()})
    visited = frozenset([(0, 0)])
    state = EnvState(
        x=0, y=0, s_t=int(traffic_blocked(world, (0, 0))),
        visited=visited, detected=frozenset(), detected_cells=frozenset(),
        fp_cells=frozenset(),
        t_pause=0, step_idx=0, done=config.n_cells == 1, pending_scan=False,
        n_scans=0, false_positives=0,
        n_cols=config.n_cols, n_rows=config.n_rows, pause_limit=config.pause_limit)
    return world, state


def advance_traffic(world):
    """Move every car one tick along its lane, reflecting at bridge ends."""
    length = world.config.length_m
    tick = world.config.tick_s
    for car in world.cars:
        x = car.x_m + car.direction * car.speed_mps * tick
        while x < 0.0 or x > length:
            if x > length:
                x = 2.0 * length - x
            else:
                x = -x
            car.direction = -car.direction
        car.x_m = x


def traffic_blocked(world, cell):
    """True when a car occupies the cell's scan region: the cell itself or
    the same column one lane over."""
    cfg = world.config
    x, y = cell
    for car in world.cars:
        col = min(int(car.x_m // cfg.cell_m), cfg.n_cols - 1)
        if col == x and abs(car.lane - y) <= 1:
            return True
    return False


def action_mask(state):
    """Boolean validity per action; pause is masked once the budget is spent."""
    mask = np.ones(5, dtype=bool)
    mask[PAUSE] = state.t_pause < state.pause_limit
    return mask


def step(world, state, action, detector):
    """Advance one step.

    Order: apply action, advance traffic, recompute the traffic flag, then
    resolve the pending scan if the cell is clear. A scan marks the cell
    visited (new-location bonus or revisit penalty), consults the detector,
    and confirms every still-unconfirmed true crack intersecting the cell.
    A positive detection in a cell with no true crack flags the cell as a
    false finding, counted and penalized once per cell.
    """
    if state.done:
        raise ValueError("episode is finished; reset the environment")
    if action not in range(5):
        raise ValueError(f"invalid action {action}")
    cfg = world.config
    info = {"scanned": False, "traffic_blocked": False, "clamped": False,
            "newly_detected": (), "false_positive": False, "detection": None}

    r_m = r_p = r_v = r_c = r_nl = r_e = r_fp = 0
    x, y = state.x, state.y
    t_pause = state.t_pause
    pending = state.pending_scan
    visited = state.visited
    detected = state.detected
    detected_cells = state.detected_cells
    fp_cells = state.fp_cells
    n_scans = state.n_scans
    false_pos = state.false_positives

    if action == PAUSE:
        if t_pause >= state.pause_limit:
            raise ValueError(
                f"pause is masked at t_pause={t_pause} >= limit {state.pause_limit}")
        r_p = R_PAUSE
        if cfg.temporal_penalty_on_pause:
            r_m = R_MOVE
        t_pause += 1
    else:
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < cfg.n_cols and 0 <= ny < cfg.n_rows):
            info["clamped"] = True
            nx, ny = min(max(nx, 0), cfg.n_cols - 1), min(max(ny, 0), cfg.n_rows - 1)
        x, y = nx, ny
        r_m = R_MOVE
        t_pause = 0
        pending = True

    advance_traffic(world)
    cell = (x, y)
    s_t = int(traffic_blocked(world, cell))

    if pending and not s_t:
        if cell in visited:
            r_v = R_REVISIT
        else:
            r_nl = R_NEW
            visited = visited | {cell}
        det = detector.detect(world, cell, world.scan_rng(n_scans))
        n_scans += 1
        info["scanned"] = True
        info["detection"] = det
        if det.present:
            true_here = world.true_ids_in(cell)
            new = tuple(i for i in true_here if i not in detected)
            if new:
                r_c = R_CRACK * len(new)
                detected = detected | set(new)
                add = set()
                for i in new:
                    add |= crack_cells(world.cracks[i], cfg.cell_m,
                                       cfg.n_cols, cfg.n_rows)
                detected_cells = detected_cells | add
                info["newly_detected"] = new
            elif not true_here and cell not in fp_cells:
                # one false finding per cell: rescanning a flagged cell
                # repeats the report, it does not create a new defect
                false_pos += 1
                r_fp = cfg.fp_penalty
                fp_cells = fp_cells | {cell}
                info["false_positive"] = True
        pending = False
    elif pending and s_t:
        info["traffic_blocked"] = True

    step_idx = state.step_idx + 1
    done = False
    if len(visited) == cfg.n_cells:
        r_e = R_END
        done = True
    elif step_idx >= cfg.max_steps:
        done = True

    breakdown = RewardBreakdown(r_m=r_m, r_p=r_p, r_v=r_v, r_c=r_c,
                                r_nl=r_nl, r_e=r_e, r_fp=r_fp)
    new_state = EnvState(
        x=x, y=y, s_t=s_t, visited=visited, detected=detected,
        detected_cells=detected_cells, fp_cells=fp_cells, t_pause=t_pause,
        step_idx=step_idx, done=done, pending_scan=pending, n_scans=n_scans,
        false_positives=false_pos,
        n_cols=state.n_cols, n_rows=state.n_rows, pause_limit=state.pause_limit)
    return StepOutcome(state=new_state, reward=breakdown, done=done, info=info)


OBS_SIZE = 23


def observe(state):
    """Fixed-length observation: normalized position, traffic flag, pause
    fraction, coverage fraction, then 3x3 visited flags (out-of-bounds reads
    as visited) and 3x3 confirmed-crack flags (out-of-bounds reads as 0)."""
    obs = np.zeros(OBS_SIZE)
    obs[0] = state.x / max(state.n_cols - 1, 1)
    obs[1] = state.y / max(state.n_rows - 1, 1)
    obs[2] = float(state.s_t)
    obs[3] = state.t_pause / max(state.pause_limit, 1)
    obs[4] = len(state.visited) / (state.n_cols * state.n_rows)
    k = 5
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cx, cy = state.x + dx, state.y + dy
            inside = 0 <= cx < state.n_cols and 0 <= cy < state.n_rows
            obs[k] = 1.0 if (not inside or (cx, cy) in state.visited) else 0.0
            obs[k + 9] = 1.0 if (inside and (cx, cy) in state.detected_cells) else 0.0
            k += 1
    return obs


def episode_return(breakdowns):
    """Exact component totals over an episode (integer arithmetic)."""
    totals = {"r_m": 0, "r_p": 0, "r_v": 0, "r_c": 0, "r_nl": 0, "r_e": 0, "r_fp": 0}
    for b in breakdowns:
        for key in totals:
            totals[key] += getattr(b, key)
    totals["total"] = sum(totals.values())
    return totals


class BridgeEnv:
    """Convenience wrapper tying config + detector + state together."""

    def __init__(self, config, detector, seed=None):
        self.config = config
        self.detector = detector
        self.world, self.state = reset(config, seed)

    def reset(self, seed=None):
        self.world, self.state = reset(self.config, seed)
        return observe(self.state)

    def step(self, action):
        out = step(self.world, self.state, action, self.detector)
        self.state = out.state
        return out

    def observe(self):
        return observe(self.state)

    def action_mask(self):
        return action_mask(self.state)

    @property
    def done(self):
        return self.state.done


# ---------------------------------------------------------------------------
# scenario files and episode traces

SCENARIO_KEYS = ("length_m", "breadth_m", "cell_m", "uav_height_m",
                 "uav_speed_mps", "n_cracks", "n_false_cracks", "n_cars",
                 "pause_limit", "max_steps", "seed", "detector",
                 "temporal_penalty_on_pause")

_FLOAT_KEYS = {"length_m", "breadth_m", "cell_m", "uav_height_m", "uav_speed_mps"}
_INT_KEYS = {"n_cracks", "n_false_cracks", "n_cars", "pause_limit", "max_steps", "seed"}


def _parse_bool(raw, key):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")


def parse_scenario_file(path, extra_keys=()):
    """Read a flat key=value scenario file into a ScenarioConfig.

    Blank lines and #-comments are skipped; unknown keys are rejected.
    extra_keys are returned untouched (strings) in a second dict so callers
    can layer their own settings on the same file.
    """
    values, extras = {}, {}
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in extra_keys:
                extras[key] = val
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key == "temporal_penalty_on_pause":
                values[key] = _parse_bool(val, key)
            elif key == "detector":
                if val not in ("canny", "cnn", "oracle"):
                    raise ValueError(f"{path}:{ln}: unknown detector {val!r}")
                values[key] = val
            else:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
    return ScenarioConfig(**values), extras


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_scenario_file(path, config):
    lines = [f"{k}={_format_value(getattr(config, k))}" for k in SCENARIO_KEYS]
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text):
    """Write-then-rename so rerun outputs overwrite atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def trace_rows(outcomes, actions):
    """Per-step trace dicts from aligned step outcomes and actions."""
    rows = []
    detected_cum = 0
    for out, act in zip(outcomes, actions):
        b = out.reward
        detected_cum = len(out.state.detected)
        rows.append({
            "step": out.state.step_idx, "x": out.state.x, "y": out.state.y,
            "action": ACTION_NAMES[act], "s_t": out.state.s_t,
            "r_m": b.r_m, "r_p": b.r_p, "r_v": b.r_v, "r_c": b.r_c,
            "r_nl": b.r_nl, "r_e": b.r_e, "r_total": b.total,
            "cracks_detected_cum": detected_cum,
        })
    return rows


def write_trace_csv(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in TRACE_COLUMNS})
    os.replace(tmp, path)
