//! Planar-arm kinematics and the environment step. Three built-in
//! embodiments with distinct action widths exercise multi-head routing.

use deskvla_model::embodiment::{EmbodimentId, EmbodimentRegistry, EmbodimentSpec};

use crate::scene::{Bbox, Scene};
use crate::{Result, WorldError, GRASP_IOU};

/// Max joint movement per step (rad) at full action.
pub const JOINT_STEP: f64 = 0.030;
/// Gripper opening/closing rate per step.
pub const GRIP_STEP: f64 = 0.2;
/// Gripper square side for drawing and IoU gating.
pub const GRIPPER_SIDE: f64 = 0.14;
pub const JOINT_LIMIT: f64 = 2.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub base: (f64, f64),
    pub links: Vec<f64>,
    pub joints: Vec<f64>,
    /// 1 = open, 0 = closed.
    pub gripper: f64,
    pub grasped: Option<usize>,
}

impl Arm {
    /// Joint positions from the base out to the end effector.
    pub fn chain(&self) -> Vec<(f64, f64)> {
        let mut pts = vec![self.base];
        let mut angle = 0.0;
        let (mut x, mut y) = self.base;
        for (l, q) in self.links.iter().zip(&self.joints) {
            angle += q;
            x += l * angle.cos();
            y += l * angle.sin();
            pts.push((x, y));
        }
        pts
    }

    pub fn ee(&self) -> (f64, f64) {
        *self.chain().last().expect("at least the base")
    }

    pub fn reach(&self) -> f64 {
        self.links.iter().sum()
    }

    pub fn gripper_bbox(&self) -> Bbox {
        let (x, y) = self.ee();
        Bbox::centered(x, y, GRIPPER_SIDE, GRIPPER_SIDE)
    }

    /// End effector for a hypothetical joint vector.
    pub fn ee_at(&self, joints: &[f64]) -> (f64, f64) {
        let mut angle = 0.0;
        let (mut x, mut y) = self.base;
        for (l, q) in self.links.iter().zip(joints) {
            angle += q;
            x += l * angle.cos();
            y += l * angle.sin();
        }
        (x, y)
    }

    /// 2×n planar Jacobian of the end effector at a joint vector.
    pub fn jacobian_at(&self, joints: &[f64]) -> Vec<[f64; 2]> {
        let n = self.links.len();
        let mut cum = 0.0;
        let mut angles = Vec::with_capacity(n);
        for q in joints {
            cum += q;
            angles.push(cum);
        }
        let mut cols = vec![[0.0; 2]; n];
        for (i, col) in cols.iter_mut().enumerate() {
            let mut jx = 0.0;
            let mut jy = 0.0;
            for k in i..n {
                jx -= self.links[k] * angles[k].sin();
                jy += self.links[k] * angles[k].cos();
            }
            *col = [jx, jy];
        }
        cols
    }

    /// Damped Gauss-Newton inverse kinematics from several deterministic
    /// starts; returns the in-limit solution closest to `from`, or `None`
    /// when the point cannot be reached.
    pub fn solve_ik(&self, target: (f64, f64), from: &[f64]) -> Option<Vec<f64>> {
        let n = self.links.len();
        let bearing = (target.1 - self.base.1).atan2(target.0 - self.base.0);
        let mut starts: Vec<Vec<f64>> = vec![from.to_vec()];
        for elbow in [0.7, -0.7, 1.4, -1.4] {
            let mut s = vec![0.0; n];
            s[0] = bearing;
            if n > 1 {
                s[1] = elbow;
            }
            if n > 2 {
                s[2] = -elbow / 2.0;
            }
            starts.push(s);
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mut q in starts {
            for _ in 0..80 {
                let (ex, ey) = self.ee_at(&q);
                let e = [target.0 - ex, target.1 - ey];
                if (e[0] * e[0] + e[1] * e[1]).sqrt() < 5e-4 {
                    break;
                }
                let j = self.jacobian_at(&q);
                let lambda = 0.05;
                let mut m = [[lambda, 0.0], [0.0, lambda]];
                for col in &j {
                    m[0][0] += col[0] * col[0];
                    m[0][1] += col[0] * col[1];
                    m[1][0] += col[1] * col[0];
                    m[1][1] += col[1] * col[1];
                }
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                let y = [
                    (m[1][1] * e[0] - m[0][1] * e[1]) / det,
                    (-m[1][0] * e[0] + m[0][0] * e[1]) / det,
                ];
                for (qi, col) in q.iter_mut().zip(&j) {
                    let dq = (col[0] * y[0] + col[1] * y[1]).clamp(-0.4, 0.4);
                    *qi = (*qi + dq).clamp(-JOINT_LIMIT, JOINT_LIMIT);
                }
            }
            let (ex, ey) = self.ee_at(&q);
            let err = ((target.0 - ex).powi(2) + (target.1 - ey).powi(2)).sqrt();
            if err < 0.01 {
                let dist: f64 = q.iter().zip(from).map(|(a, b)| (a - b).abs()).sum();
                if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                    best = Some((dist, q));
                }
            }
        }
        best.map(|(_, q)| q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicEmbodiment {
    pub spec: EmbodimentSpec,
    pub arms: Vec<Arm>,
}

impl KinematicEmbodiment {
    pub fn action_dim(&self) -> usize {
        self.arms.iter().map(|a| a.links.len() + 1).sum()
    }

    /// Joint angles, gripper openness, a holding flag (grip feedback) and
    /// the end-effector position, per arm.
    pub fn proprio(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.spec.proprio_dim);
        for arm in &self.arms {
            out.extend(arm.joints.iter().map(|&q| q as f32));
            out.push(arm.gripper as f32);
            out.push(if arm.grasped.is_some() { 1.0 } else { 0.0 });
            let (x, y) = arm.ee();
            out.push(x as f32);
            out.push(y as f32);
        }
        out
    }
}

pub fn arm3_spec() -> EmbodimentSpec {
    EmbodimentSpec::new("arm3", 4, 7, "3-link planar arm with gripper")
}

pub fn arm2_spec() -> EmbodimentSpec {
    EmbodimentSpec::new("arm2", 3, 6, "2-link planar arm with gripper")
}

pub fn biman_spec() -> EmbodimentSpec {
    EmbodimentSpec::new("biman2x2", 6, 12, "two 2-link arms with grippers")
}

pub fn builtin_specs() -> Vec<EmbodimentSpec> {
    vec![arm3_spec(), arm2_spec(), biman_spec()]
}

pub fn builtin_registry() -> EmbodimentRegistry {
    let mut reg = EmbodimentRegistry::new();
    for spec in builtin_specs() {
        reg.register(spec).expect("unique builtin ids");
    }
    reg
}

/// Instantiate a built-in embodiment at its rest pose.
pub fn make_embodiment(id: &EmbodimentId) -> Result<KinematicEmbodiment> {
    let arm = |base: (f64, f64), links: &[f64], joints: &[f64]| Arm {
        base,
        links: links.to_vec(),
        joints: joints.to_vec(),
        gripper: 1.0,
        grasped: None,
    };
    match id.as_str() {
        "arm3" => Ok(KinematicEmbodiment {
            spec: arm3_spec(),
            arms: vec![arm((0.80, 0.0), &[0.38, 0.32, 0.26], &[1.2, -0.5, -0.4])],
        }),
        "arm2" => Ok(KinematicEmbodiment {
            spec: arm2_spec(),
            arms: vec![arm((0.80, 0.0), &[0.52, 0.44], &[1.3, -0.6])],
        }),
        "biman2x2" => Ok(KinematicEmbodiment {
            spec: biman_spec(),
            arms: vec![
                arm((0.25, 0.0), &[0.50, 0.42], &[1.1, -0.4]),
                arm((1.35, 0.0), &[0.50, 0.42], &[std::f64::consts::PI - 1.1, 0.4]),
            ],
        }),
        other => Err(WorldError::TaskGen(format!("unknown embodiment `{other}`"))),
    }
}

/// Advance the world by one action. Actions are clipped, never rejected:
/// joint velocity fractions per arm followed by a gripper command in [-1, 1]
/// (negative closes). Grasp toggles on a closing transition when the gripper
/// and an object's bounding boxes overlap at IoU >= the threshold.
pub fn step_env(scene: &mut Scene, emb: &mut KinematicEmbodiment, action: &[f32]) {
    let mut idx = 0;
    for arm_i in 0..emb.arms.len() {
        let n = emb.arms[arm_i].links.len();
        for j in 0..n {
            let a = f64::from(action.get(idx).copied().unwrap_or(0.0)).clamp(-1.0, 1.0);
            let q = &mut emb.arms[arm_i].joints[j];
            *q = (*q + a * JOINT_STEP).clamp(-JOINT_LIMIT, JOINT_LIMIT);
            idx += 1;
        }
        let cmd = f64::from(action.get(idx).copied().unwrap_or(0.0)).clamp(-1.0, 1.0);
        idx += 1;
        let target = (cmd + 1.0) / 2.0;
        let prev = emb.arms[arm_i].gripper;
        let delta = (target - prev).clamp(-GRIP_STEP, GRIP_STEP);
        let next = (prev + delta).clamp(0.0, 1.0);
        emb.arms[arm_i].gripper = next;

        let closing = prev >= 0.5 && next < 0.5;
        let opening = prev < 0.5 && next >= 0.5;
        if closing && emb.arms[arm_i].grasped.is_none() {
            let gb = emb.arms[arm_i].gripper_bbox();
            let taken: Vec<usize> = emb.arms.iter().filter_map(|a| a.grasped).collect();
            let mut best: Option<(usize, f64)> = None;
            for obj in &scene.objects {
                if taken.contains(&obj.id) {
                    continue;
                }
                let iou = gb.iou(&obj.bbox());
                if iou >= GRASP_IOU && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((obj.id, iou));
                }
            }
            emb.arms[arm_i].grasped = best.map(|(id, _)| id);
        } else if opening {
            emb.arms[arm_i].grasped = None;
        }

        if let Some(obj_id) = emb.arms[arm_i].grasped {
            let (ex, ey) = emb.arms[arm_i].ee();
            let (cx, cy) = Scene::clamp_point(ex, ey);
            if let Some(obj) = scene.objects.iter_mut().find(|o| o.id == obj_id) {
                obj.x = cx;
                obj.y = cy;
            }
        }
    }
    scene.time += 1;
}
