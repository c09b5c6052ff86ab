use super::{dist, TaskKind, ToyEnv, BUTTON_CORNERS, MAX_STEP};

/// Norm cap on the expert's action for each task.
pub fn expert_speed(task: TaskKind) -> f64 {
    match task {
        TaskKind::PointReach => 1.0,
        TaskKind::DynamicTarget => 0.4,
        TaskKind::ButtonSequence => 1.0,
    }
}

/// Proportional step toward the current waypoint, norm-capped per task.
/// Reads privileged state (true goal, press progress).
pub fn expert_action(env: &ToyEnv) -> [f64; 2] {
    let s = env.state();
    let target = match env.task() {
        TaskKind::PointReach | TaskKind::DynamicTarget => env.goal(),
        TaskKind::ButtonSequence => {
            if s.failed {
                return [0.0, 0.0];
            }
            // finish each press at the button centre before moving on
            let last = (s.pressed > 0).then(|| s.corner_of_color[s.pressed - 1]);
            match last {
                Some(c) if s.pressed >= 4 || !s.centred => BUTTON_CORNERS[c],
                _ => BUTTON_CORNERS[s.corner_of_color[s.pressed]],
            }
        }
    };
    let d = dist(s.pos, target);
    if d < 1e-12 {
        return [0.0, 0.0];
    }
    let cap = expert_speed(env.task());
    let scale = (d / MAX_STEP).min(cap) / d;
    [(target[0] - s.pos[0]) * scale, (target[1] - s.pos[1]) * scale]
}
