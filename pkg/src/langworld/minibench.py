"""Deterministic 2-D tabletop bench with six manipulation tasks.

A point end-effector moves on the unit square. A drawer handle on the left
tracks vertical drags, a slider rail on top tracks horizontal drags, and
two latching lights turn on when their regions are entered. Observations
are a rasterized image plus the (x, y, grip) proprioception vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lexicon import TASKS, TaskId, task_by_name

A_MAX = 0.05
R_INT = 0.08

DRAWER_X = 0.20
DRAWER_Y0 = 0.10
DRAWER_RANGE = 0.25  # handle y = DRAWER_Y0 + DRAWER_RANGE * extension

SLIDER_Y = 0.80
SLIDER_X0 = 0.35
SLIDER_RANGE = 0.30  # handle x = SLIDER_X0 + SLIDER_RANGE * position

SWITCH_POS = (0.80, 0.65)  # lightbulb
BUTTON_POS = (0.80, 0.20)  # led

BETA_B = 10.0
BETA_C = 50.0
F_S_DESK = (1.0, 1.0, 0.0)

CONTINUOUS_TASKS = ("open_drawer", "close_drawer", "move_slider_left", "move_slider_right")
BOOLEAN_TASKS = ("turn_on_lightbulb", "turn_on_led")


@dataclass(frozen=True)
class EnvState:
    ee: tuple[float, float]
    grip: float
    drawer: float
    slider: float
    lightbulb: int
    led: int
    t: int

    def proprio(self) -> np.ndarray:
        return np.array([self.ee[0], self.ee[1], self.grip], dtype=np.float32)

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.ee[0], self.ee[1], self.grip, self.drawer, self.slider, self.lightbulb, self.led],
            dtype=np.float32,
        )


def state_from_vector(v, t: int = 0) -> EnvState:
    return EnvState(
        ee=(float(v[0]), float(v[1])), grip=float(v[2]), drawer=float(v[3]),
        slider=float(v[4]), lightbulb=int(round(float(v[5]))), led=int(round(float(v[6]))), t=t,
    )


def reset(rng: np.random.Generator | None = None, jitter: float = 0.1) -> EnvState:
    """Default reset: drawer/slider mid-range, lights off, open gripper.
    With an rng, the start position is jittered around the center."""
    ee = (0.5, 0.5)
    if rng is not None and jitter > 0:
        ee = (
            float(np.clip(0.5 + rng.uniform(-jitter, jitter), 0.0, 1.0)),
            float(np.clip(0.5 + rng.uniform(-jitter, jitter), 0.0, 1.0)),
        )
    return EnvState(ee=ee, grip=1.0, drawer=0.5, slider=0.5, lightbulb=0, led=0, t=0)


def drawer_handle(state: EnvState) -> tuple[float, float]:
    return (DRAWER_X, DRAWER_Y0 + DRAWER_RANGE * state.drawer)


def slider_handle(state: EnvState) -> tuple[float, float]:
    return (SLIDER_X0 + SLIDER_RANGE * state.slider, SLIDER_Y)


def _near(p, q, radius: float = R_INT) -> bool:
    return (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 <= radius * radius


def step(state: EnvState, action) -> EnvState:
    """Deterministic transition. Handles are grabbed when the gripper is
    closed (< 0.5) within R_INT before the move; they track the actual
    (post-clamp) end-effector displacement. Lights latch on entry."""
    dx = float(np.clip(action[0], -A_MAX, A_MAX))
    dy = float(np.clip(action[1], -A_MAX, A_MAX))
    dg = float(np.clip(action[2], -A_MAX, A_MAX))

    grabbed_drawer = state.grip < 0.5 and _near(state.ee, drawer_handle(state))
    grabbed_slider = state.grip < 0.5 and _near(state.ee, slider_handle(state))

    nx = float(np.clip(state.ee[0] + dx, 0.0, 1.0))
    ny = float(np.clip(state.ee[1] + dy, 0.0, 1.0))
    moved_x, moved_y = nx - state.ee[0], ny - state.ee[1]

    drawer = state.drawer
    if grabbed_drawer:
        drawer = float(np.clip(drawer + moved_y / DRAWER_RANGE, 0.0, 1.0))
    slider = state.slider
    if grabbed_slider:
        slider = float(np.clip(slider + moved_x / SLIDER_RANGE, 0.0, 1.0))

    ee = (nx, ny)
    lightbulb = 1 if (state.lightbulb or _near(ee, SWITCH_POS)) else 0
    led = 1 if (state.led or _near(ee, BUTTON_POS)) else 0

    return EnvState(
        ee=ee, grip=float(np.clip(state.grip + dg, 0.0, 1.0)),
        drawer=drawer, slider=slider, lightbulb=lightbulb, led=led, t=state.t + 1,
    )


def success(state: EnvState, task: TaskId) -> bool:
    name = task.name
    if name == "open_drawer":
        return state.drawer >= 0.9
    if name == "close_drawer":
        return state.drawer <= 0.1
    if name == "move_slider_left":
        return state.slider <= 0.1
    if name == "move_slider_right":
        return state.slider >= 0.9
    if name == "turn_on_lightbulb":
        return state.lightbulb == 1
    if name == "turn_on_led":
        return state.led == 1
    raise ValueError(f"unknown task {name}")


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardSpec:
    task: TaskId
    family: str  # "boolean" | "continuous"
    g: np.ndarray  # goal pose for the task's handle/button, same dim as proprio
    f_s: np.ndarray  # per-dimension scaling of the pose distance
    s_g: float | None  # goal value of the tracked scalar (continuous family)
    beta_b: float = BETA_B
    beta_c: float = BETA_C


_GOAL_POSES = {
    "open_drawer": (DRAWER_X, DRAWER_Y0 + DRAWER_RANGE, 0.0),
    "close_drawer": (DRAWER_X, DRAWER_Y0, 0.0),
    "move_slider_left": (SLIDER_X0, SLIDER_Y, 0.0),
    "move_slider_right": (SLIDER_X0 + SLIDER_RANGE, SLIDER_Y, 0.0),
    "turn_on_lightbulb": (*SWITCH_POS, 0.0),
    "turn_on_led": (*BUTTON_POS, 0.0),
}

_GOAL_SCALARS = {
    "open_drawer": 1.0,
    "close_drawer": 0.0,
    "move_slider_left": 0.0,
    "move_slider_right": 1.0,
}


def reward_spec(task: TaskId, f_s=F_S_DESK, beta_b: float = BETA_B, beta_c: float = BETA_C) -> RewardSpec:
    family = "boolean" if task.name in BOOLEAN_TASKS else "continuous"
    return RewardSpec(
        task=task, family=family,
        g=np.asarray(_GOAL_POSES[task.name], dtype=np.float64),
        f_s=np.asarray(f_s, dtype=np.float64),
        s_g=_GOAL_SCALARS.get(task.name),
        beta_b=beta_b, beta_c=beta_c,
    )


def tracked_scalar(state: EnvState, task: TaskId) -> float:
    return state.drawer if "drawer" in task.name else state.slider


def reward_boolean(theta, spec: RewardSpec, state: EnvState) -> float:
    """1 - ||(theta - g) * f_s||_2 + beta_b * [success]."""
    theta = np.asarray(theta, dtype=np.float64)
    dist = float(np.linalg.norm((theta - spec.g) * spec.f_s))
    bonus = spec.beta_b if success(state, spec.task) else 0.0
    return 1.0 - dist + bonus


def reward_continuous(p_t, spec: RewardSpec, s_t: float, s_prev: float) -> float:
    """1 - ||(p_t - g) * f_s||_2 + beta_c * sign(s_g - s_prev) * (s_t - s_prev)."""
    p_t = np.asarray(p_t, dtype=np.float64)
    dist = float(np.linalg.norm((p_t - spec.g) * spec.f_s))
    progress = spec.beta_c * float(np.sign(spec.s_g - s_prev)) * (s_t - s_prev)
    return 1.0 - dist + progress


def transition_reward(spec: RewardSpec, prev: EnvState, new: EnvState) -> float:
    """Reward for the transition prev -> new under the spec's task."""
    theta = new.proprio().astype(np.float64)
    if spec.family == "boolean":
        return reward_boolean(theta, spec, new)
    return reward_continuous(
        theta, spec, tracked_scalar(new, spec.task), tracked_scalar(prev, spec.task)
    )


def episode_rewards(states: list[EnvState] | np.ndarray, task: TaskId, f_s=F_S_DESK,
                    beta_b: float = BETA_B, beta_c: float = BETA_C):
    """Per-transition rewards and termination flags for a state sequence.
    Accepts EnvState lists or stacked state vectors."""
    if isinstance(states, np.ndarray):
        states = [state_from_vector(v, t=i) for i, v in enumerate(states)]
    spec = reward_spec(task, f_s, beta_b, beta_c)
    rewards = np.array(
        [transition_reward(spec, states[i], states[i + 1]) for i in range(len(states) - 1)],
        dtype=np.float64,
    )
    dones = np.array([success(s, task) for s in states[1:]], dtype=bool)
    return rewards, dones


# ---------------------------------------------------------------------------
# rendering

_PALETTE = {
    "background": (217, 217, 217),
    "cabinet": (120, 100, 80),
    "drawer": (180, 140, 90),
    "rail": (150, 150, 160),
    "slider": (40, 60, 180),
    "lamp_off": (90, 90, 90),
    "lamp_on": (250, 220, 40),
    "led_off": (70, 90, 70),
    "led_on": (60, 230, 60),
    "ee": (220, 40, 40),
}


def _px(v: float, size: int) -> int:
    return int(round(v * (size - 1)))


def led_patch_bbox(size: int) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) inclusive bounds of the LED patch."""
    r, c = _px(BUTTON_POS[1], size), _px(BUTTON_POS[0], size)
    k = max(2, size // 8)
    return (max(0, r - k // 2), min(size - 1, r + k // 2),
            max(0, c - k // 2), min(size - 1, c + k // 2))


def lamp_patch_bbox(size: int) -> tuple[int, int, int, int]:
    r, c = _px(SWITCH_POS[1], size), _px(SWITCH_POS[0], size)
    k = max(2, size // 8)
    return (max(0, r - k // 2), min(size - 1, r + k // 2),
            max(0, c - k // 2), min(size - 1, c + k // 2))


def _background(size: int) -> np.ndarray:
    """Static diagonal shading so every image cell has a distinct local
    signature; a flat background would make most token cells identical."""
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    base = np.empty((size, size, 3), dtype=np.uint8)
    base[..., 0] = (186 + 44 * rows / size).astype(np.uint8)
    base[..., 1] = (186 + 44 * cols / size).astype(np.uint8)
    base[..., 2] = (200 + 22 * (rows + cols) / (2 * size)).astype(np.uint8)
    return base


def render(state: EnvState, size: int = 32) -> np.ndarray:
    """Deterministic rasterization to a float image in [0, 1], shape
    (size, size, 3). Row index corresponds to the y coordinate."""
    img = _background(size).copy()

    # cabinet column and drawer extension bar (height encodes extension)
    c0, c1 = _px(DRAWER_X - 0.06, size), _px(DRAWER_X + 0.06, size)
    base = _px(DRAWER_Y0, size)
    top_full = _px(DRAWER_Y0 + DRAWER_RANGE, size)
    img[base : top_full + 1, c0 : c1 + 1] = _PALETTE["cabinet"]
    top = base + int(round((top_full - base) * state.drawer))
    if top > base:
        img[base : top + 1, c0 + 1 : c1] = _PALETTE["drawer"]

    # slider rail and block
    r0, r1 = _px(SLIDER_Y - 0.02, size), _px(SLIDER_Y + 0.02, size)
    rc0, rc1 = _px(SLIDER_X0 - 0.03, size), _px(SLIDER_X0 + SLIDER_RANGE + 0.03, size)
    img[r0 : r1 + 1, rc0 : rc1 + 1] = _PALETTE["rail"]
    hx = _px(slider_handle(state)[0], size)
    img[r0 : r1 + 1, max(0, hx - 1) : min(size, hx + 2)] = _PALETTE["slider"]

    # lamp and led patches
    lr0, lr1, lc0, lc1 = lamp_patch_bbox(size)
    img[lr0 : lr1 + 1, lc0 : lc1 + 1] = _PALETTE["lamp_on" if state.lightbulb else "lamp_off"]
    er0, er1, ec0, ec1 = led_patch_bbox(size)
    img[er0 : er1 + 1, ec0 : ec1 + 1] = _PALETTE["led_on" if state.led else "led_off"]

    # end effector disk, radius encodes gripper opening
    rr = _px(state.ee[1], size)
    cc = _px(state.ee[0], size)
    radius = 2.0 + 1.5 * state.grip
    rows, cols = np.ogrid[:size, :size]
    mask = (rows - rr) ** 2 + (cols - cc) ** 2 <= radius * radius
    img[mask] = _PALETTE["ee"]

    return img.astype(np.float32) / 255.0


def observe(state: EnvState, size: int = 32):
    return render(state, size), state.proprio()


# ---------------------------------------------------------------------------
# scripted play data

_BEHAVIORS = (
    "open_drawer", "close_drawer", "move_slider_left", "move_slider_right",
    "turn_on_lightbulb", "turn_on_led", "wander",
)


class _ScriptedController:
    """Proportional navigation to a chosen object, a manipulation phase, and
    exploratory noise. Picks a new behavior when the current one succeeds
    or its step budget runs out."""

    def __init__(self, rng: np.random.Generator, noise: float = 0.008):
        self.rng = rng
        self.noise = noise
        self.behavior = None
        self.budget = 0
        self.waypoint = (0.5, 0.5)

    def _pick(self, state: EnvState):
        self.behavior = _BEHAVIORS[int(self.rng.integers(len(_BEHAVIORS)))]
        self.budget = int(self.rng.integers(20, 32))
        if self.behavior == "wander":
            self.budget = int(self.rng.integers(4, 9))
            self.waypoint = (float(self.rng.uniform()), float(self.rng.uniform()))

    def _done(self, state: EnvState) -> bool:
        if self.behavior == "wander":
            return False
        return success(state, task_by_name(self.behavior))

    def act(self, state: EnvState) -> np.ndarray:
        if self.behavior is None or self.budget <= 0 or self._done(state):
            self._pick(state)
        self.budget -= 1
        b = self.behavior

        grip_target = 1.0
        if b == "wander":
            target = self.waypoint
        elif b in ("open_drawer", "close_drawer"):
            grip_target = 0.0
            handle = drawer_handle(state)
            if _near(state.ee, handle, R_INT * 0.7) and state.grip < 0.5:
                goal_y = DRAWER_Y0 + DRAWER_RANGE * (1.0 if b == "open_drawer" else 0.0)
                target = (handle[0], goal_y)
            else:
                target = handle
        elif b in ("move_slider_left", "move_slider_right"):
            grip_target = 0.0
            handle = slider_handle(state)
            if _near(state.ee, handle, R_INT * 0.7) and state.grip < 0.5:
                goal_x = SLIDER_X0 + SLIDER_RANGE * (1.0 if b == "move_slider_right" else 0.0)
                target = (goal_x, handle[1])
            else:
                target = handle
        else:  # lights
            target = SWITCH_POS if b == "turn_on_lightbulb" else BUTTON_POS

        action = np.array(
            [target[0] - state.ee[0], target[1] - state.ee[1], grip_target - state.grip],
            dtype=np.float64,
        )
        action += self.rng.normal(0.0, self.noise, size=3)
        return np.clip(action, -A_MAX, A_MAX)


def run_scripted_episode(seed_key, horizon: int, image_size: int = 32):
    """One scripted play episode; returns an Episode with rewards stored
    under the first-achieved task (task 0 as placeholder when none)."""
    from .episodes import Episode

    rng = np.random.default_rng(seed_key)
    controller = _ScriptedController(rng)
    state = reset(rng)
    states = [state]
    actions = []
    completed: dict[str, int] = {}
    for t in range(horizon):
        action = controller.act(state)
        state = step(state, action)
        actions.append(action)
        states.append(state)
        for task in TASKS:
            if task.name not in completed and success(state, task):
                completed[task.name] = t
    if completed:
        achieved = min(completed.items(), key=lambda kv: (kv[1], task_by_name(kv[0]).index))[0]
        reward_task = task_by_name(achieved)
    else:
        reward_task = TASKS[0]
    state_vectors = np.stack([s.as_vector() for s in states])
    # rewards are computed from the stored float32 states so that later
    # relabeling recomputations reproduce them exactly
    rewards, dones = episode_rewards(state_vectors, reward_task)
    images = np.stack([(render(s, image_size) * 255.0).round().astype(np.uint8) for s in states])
    return Episode(
        seed=int(np.random.default_rng(seed_key).integers(2**63)),
        task=reward_task,
        states=state_vectors,
        images=images,
        proprios=np.stack([s.proprio() for s in states]),
        actions=np.asarray(actions, dtype=np.float32),
        rewards=rewards.astype(np.float32),
        dones=dones,
        completed=completed,
    )


def generate_play_data(seed: int, n_episodes: int, horizon: int, image_size: int = 32,
                       tasks=TASKS):
    """Scripted play episodes plus the indices of those completing any task
    of interest (the filtered subset references the same episodes)."""
    if n_episodes < 1 or horizon < 1:
        raise ValueError("need n_episodes >= 1 and horizon >= 1")
    episodes = [run_scripted_episode([seed, i], horizon, image_size) for i in range(n_episodes)]
    filtered = [i for i, ep in enumerate(episodes) if ep.completes_any(tasks)]
    return episodes, filtered
