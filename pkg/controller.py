"""
Heading controller shared by the real robots and by the Consequence Engine's
copy of them. Everything is vectorised so the CE can drive all candidate
actions through one call.
"""

import logging
import math

import numpy as np

from geometry import wrap_angle

logger = logging.getLogger(__name__)

# Heading error below which the robot stops turning and advances
HEADING_TOL = 1e-6


def controller_command(
    x,
    y,
    theta,
    target_heading,
    v_nom: float,
    w_max: float,
    dt: float,
    goal_x=None,
    goal_y=None,
    goal_tolerance: float = 0.05,
    remaining=None,
):
    """
    (v, w) commands that turn in place toward target_heading and then advance.

    With a goal, the advance is capped by the remaining progress along the
    heading, so the robot halts at its closest approach to the goal (or
    inside goal_tolerance) instead of driving past it. `remaining` caps the
    distance still allowed in this step (FORWARD-style actions).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)

    err = np.asarray(wrap_angle(np.asarray(target_heading, dtype=float) - theta), dtype=float)
    turning = np.abs(err) > HEADING_TOL
    w = np.where(turning, np.clip(err / dt, -w_max, w_max), 0.0)
    v = np.where(turning, 0.0, v_nom)

    if goal_x is not None:
        goal_x = np.asarray(goal_x, dtype=float)
        goal_y = np.asarray(goal_y, dtype=float)
        has_goal = np.isfinite(goal_x) & np.isfinite(goal_y)
        gx = np.where(has_goal, goal_x, 0.0)
        gy = np.where(has_goal, goal_y, 0.0)
        along = (gx - x) * np.cos(theta) + (gy - y) * np.sin(theta)
        dist = np.hypot(gx - x, gy - y)
        halt = (dist < goal_tolerance) | (along <= 0.0)
        capped = np.where(halt, 0.0, np.minimum(v, along / dt))
        v = np.where(has_goal & ~turning, capped, v)

    if remaining is not None:
        v = np.minimum(v, np.maximum(np.asarray(remaining, dtype=float), 0.0) / dt)

    return v, w


def drive_to(arena, robot_id: int, x: float, y: float, theta: float, v_nom: float,
             tolerance: float = 0.005, max_time: float = 30.0) -> bool:
    """
    Drive one robot to (x, y) and then turn it to theta, stepping the arena.

    Other robots hold still. Returns False (and leaves the robot wherever it
    stalled) when the pose is not reached within max_time.
    """
    state = arena.robot(robot_id)
    w_max = state.body.max_turn_rate
    deadline = arena.time + max_time

    while arena.time < deadline:
        pose = state.pose
        if math.hypot(x - pose.x, y - pose.y) < tolerance:
            break
        heading = math.atan2(y - pose.y, x - pose.x)
        v, w = controller_command(
            pose.x, pose.y, pose.theta, heading, v_nom, w_max, arena.dt,
            goal_x=x, goal_y=y, goal_tolerance=tolerance,
        )
        v, w = float(v), float(w)
        if v == 0.0 and w == 0.0:
            break
        arena.step({robot_id: (v, w)})
        if state.pose == pose:
            logger.debug("Robot %s stalled while homing", robot_id)
            return False

    if math.hypot(x - state.pose.x, y - state.pose.y) >= tolerance:
        return False
    return turn_to(arena, robot_id, theta, max_time=max(deadline - arena.time, arena.dt))


def turn_to(arena, robot_id: int, theta: float, max_time: float = 10.0) -> bool:
    """Rotate a robot in place until it faces theta."""
    state = arena.robot(robot_id)
    w_max = state.body.max_turn_rate
    deadline = arena.time + max_time
    while arena.time < deadline:
        err = wrap_angle(theta - state.pose.theta)
        if abs(err) <= HEADING_TOL:
            return True
        arena.step({robot_id: (0.0, float(np.clip(err / arena.dt, -w_max, w_max)))})
    return abs(wrap_angle(theta - state.pose.theta)) <= HEADING_TOL


def face_each_other(arena, watcher_ids, target_id: int, max_time: float = 10.0):
    """Turn every watcher toward the target robot (one after the other)."""
    target = arena.robot(target_id)
    for watcher_id in watcher_ids:
        watcher = arena.robot(watcher_id)
        bearing = math.atan2(target.pose.y - watcher.pose.y, target.pose.x - watcher.pose.x)
        turn_to(arena, watcher_id, bearing, max_time=max_time)
