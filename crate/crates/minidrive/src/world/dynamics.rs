//! Vehicle and walker kinematics at a fixed 20 Hz step.

use crate::geom::{wrap_angle, Pose};
use crate::world::state::Control;

pub const DT: f64 = 0.05;
pub const WHEELBASE: f64 = 2.5;
/// Road-wheel angle at full steering input.
pub const MAX_STEER: f64 = 0.5;
pub const ACCEL_GAIN: f64 = 3.0;
pub const BRAKE_DECEL: f64 = 8.0;
pub const MAX_SPEED: f64 = 10.0;

/// Kinematic bicycle. The pose advances with the pre-update speed; the speed
/// integrates throttle/brake afterwards and saturates at [0, MAX_SPEED].
pub fn bicycle_step(pose: Pose, speed: f64, ctl: &Control, dt: f64) -> (Pose, f64) {
    let steer = ctl.steer.clamp(-1.0, 1.0) * MAX_STEER;
    let x = pose.pos.x + speed * pose.yaw.cos() * dt;
    let y = pose.pos.y + speed * pose.yaw.sin() * dt;
    let yaw = wrap_angle(pose.yaw + speed / WHEELBASE * steer.tan() * dt);
    let accel = ACCEL_GAIN * ctl.throttle.clamp(0.0, 1.0)
        - if ctl.brake { BRAKE_DECEL } else { 0.0 };
    let v = (speed + accel * dt).clamp(0.0, MAX_SPEED);
    (Pose::new(x, y, yaw), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    #[test]
    fn pose_uses_pre_update_speed() {
        let p = Pose::new(0.0, 0.0, 0.0);
        let ctl = Control { steer: 0.0, throttle: 1.0, brake: false };
        let (p1, v1) = bicycle_step(p, 0.0, &ctl, DT);
        // Standing start: no displacement on the first tick, speed rises.
        assert_eq!(p1.pos, Vec2::ZERO);
        assert!((v1 - ACCEL_GAIN * DT).abs() < 1e-12);
        let (p2, _) = bicycle_step(p1, v1, &ctl, DT);
        assert!((p2.pos.x - v1 * DT).abs() < 1e-12);
    }

    #[test]
    fn speed_saturates_both_ends() {
        let p = Pose::new(0.0, 0.0, 0.0);
        let full = Control { steer: 0.0, throttle: 1.0, brake: false };
        let mut v = 9.99;
        for _ in 0..10 {
            v = bicycle_step(p, v, &full, DT).1;
        }
        assert_eq!(v, MAX_SPEED);
        let stop = Control { steer: 0.0, throttle: 0.0, brake: true };
        let mut v = 0.3;
        for _ in 0..10 {
            v = bicycle_step(p, v, &stop, DT).1;
        }
        assert_eq!(v, 0.0);
    }

    #[test]
    fn full_lock_circles_have_expected_radius() {
        // Turn radius = L / tan(max steer).
        let want_r = WHEELBASE / MAX_STEER.tan();
        let ctl = Control { steer: 1.0, throttle: 0.0, brake: false };
        let mut pose = Pose::new(0.0, 0.0, 0.0);
        let v = 2.0;
        let mut max_y: f64 = 0.0;
        for _ in 0..20_000 {
            pose = bicycle_step(pose, v, &ctl, DT).0;
            max_y = max_y.max(pose.pos.y);
        }
        // Diameter of the circle traced by the rear axle.
        assert!((max_y - 2.0 * want_r).abs() < 0.15, "max_y {max_y} want {}", 2.0 * want_r);
    }
}
