//! Task definitions, seeded scene sampling and instruction text.

use deskvla_autodiff::rng::DetRng;
use deskvla_model::embodiment::EmbodimentId;

use crate::kin::{make_embodiment, KinematicEmbodiment};
use crate::scene::{
    middle_zone, sorting_zones, ObjColor, Scene, SceneObject, Shape, ALL_COLORS,
};
use crate::{Result, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    PickPlace,
    Sort2,
    Sort4,
    StackFold,
}

pub const ALL_TASKS: [TaskKind; 4] = [
    TaskKind::PickPlace,
    TaskKind::Sort2,
    TaskKind::Sort4,
    TaskKind::StackFold,
];

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick-place",
            TaskKind::Sort2 => "sort-2",
            TaskKind::Sort4 => "sort-4",
            TaskKind::StackFold => "stack-fold",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_TASKS
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| WorldError::TaskGen(format!("unknown task `{name}`")))
    }
}

/// One pick-and-place job for the scripted expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub object: usize,
    pub zone: String,
    pub arm: usize,
}

/// A fully sampled, solvable task instance.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub scene: Scene,
    pub embodiment: KinematicEmbodiment,
    pub jobs: Vec<Job>,
    pub instruction: String,
}

fn reachable(emb: &KinematicEmbodiment, arm: usize, x: f64, y: f64) -> bool {
    let a = &emb.arms[arm];
    let dx = x - a.base.0;
    let dy = y - a.base.1;
    let d = (dx * dx + dy * dy).sqrt();
    if d > a.reach() - 0.06 || d < 0.12 || y <= 0.08 {
        return false;
    }
    // Waypoints must have an in-limit IK solution, not just be in range.
    a.solve_ik((x, y), &a.joints).is_some()
}

fn pick_arm(emb: &KinematicEmbodiment, x: f64, y: f64) -> Option<usize> {
    if emb.arms.len() == 1 {
        return reachable(emb, 0, x, y).then_some(0);
    }
    // Bimanual: prefer the same side, fall back to the other arm.
    let preferred = usize::from(x >= 0.8);
    if reachable(emb, preferred, x, y) {
        Some(preferred)
    } else if reachable(emb, 1 - preferred, x, y) {
        Some(1 - preferred)
    } else {
        None
    }
}

fn spawn_objects(
    emb: &KinematicEmbodiment,
    colors: &[ObjColor],
    zones_to_avoid: &Scene,
    min_target_dist: f64,
    rng: &mut DetRng,
) -> Option<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(colors.len());
    'outer: for (id, &color) in colors.iter().enumerate() {
        for _attempt in 0..60 {
            let x = rng.uniform(0.45, 1.15);
            let y = rng.uniform(0.32, 0.80);
            let shape = if rng.unit() < 0.5 { Shape::Disc } else { Shape::Rect };
            let candidate = SceneObject { id, shape, color, x, y };
            let clear_of_zones = zones_to_avoid
                .targets
                .iter()
                .all(|z| !z.bbox.contains(x, y));
            // Keep a real transport leg between the spawn and its bin, so
            // each pick-place cycle spans a full substep.
            let far_from_target = zones_to_avoid
                .targets
                .iter()
                .find(|z| z.id == color.home_zone())
                .is_none_or(|z| {
                    let (zx, zy) = z.bbox.center();
                    ((zx - x).powi(2) + (zy - y).powi(2)).sqrt() >= min_target_dist
                });
            let separated = objects
                .iter()
                .all(|o| ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt() > 0.24);
            // Some arm must serve the whole job: object and its bin.
            let arm_ok = match zones_to_avoid
                .targets
                .iter()
                .find(|z| z.id == color.home_zone())
            {
                Some(z) => {
                    let (zx, zy) = z.bbox.center();
                    (0..emb.arms.len())
                        .any(|a| reachable(emb, a, x, y) && reachable(emb, a, zx, zy))
                }
                None => pick_arm(emb, x, y).is_some(),
            };
            if clear_of_zones && far_from_target && separated && arm_ok {
                objects.push(candidate);
                continue 'outer;
            }
        }
        return None;
    }
    Some(objects)
}

/// Sample a solvable instance. Waypoints outside every arm's reach reject
/// the draw; persistent failure is a task-generation error.
pub fn sample_task(kind: TaskKind, emb_id: &EmbodimentId, rng: &mut DetRng) -> Result<TaskInstance> {
    let mut embodiment = make_embodiment(emb_id)?;
    // Jitter the rest pose so demonstrations cover a neighborhood of starts.
    for arm in &mut embodiment.arms {
        for q in &mut arm.joints {
            *q += rng.uniform(-0.25, 0.25);
        }
    }
    for _round in 0..40 {
        let zones = match kind {
            TaskKind::StackFold => middle_zone(),
            _ => sorting_zones(),
        };
        let shell = Scene::new(Vec::new(), zones);
        let colors: Vec<ObjColor> = match kind {
            TaskKind::PickPlace => vec![ALL_COLORS[rng.below(4)]],
            TaskKind::Sort2 => {
                let first = rng.below(4);
                let second = (first + 1 + rng.below(3)) % 4;
                vec![ALL_COLORS[first], ALL_COLORS[second]]
            }
            TaskKind::Sort4 => ALL_COLORS.to_vec(),
            TaskKind::StackFold => {
                let first = rng.below(4);
                let second = (first + 1 + rng.below(3)) % 4;
                vec![ALL_COLORS[first], ALL_COLORS[second]]
            }
        };
        let min_target_dist = match kind {
            TaskKind::Sort2 | TaskKind::Sort4 => 0.45,
            TaskKind::PickPlace => 0.30,
            TaskKind::StackFold => 0.0,
        };
        let Some(mut objects) = spawn_objects(&embodiment, &colors, &shell, min_target_dist, rng)
        else {
            continue;
        };
        if kind == TaskKind::StackFold {
            // One item per side of the table.
            objects[0].x = rng.uniform(0.38, 0.66);
            objects[1].x = rng.uniform(0.94, 1.22);
            for o in objects.iter_mut() {
                o.y = rng.uniform(0.30, 0.46);
            }
        }
        let scene = Scene::new(objects.clone(), shell.targets.clone());

        let mut jobs = Vec::with_capacity(objects.len());
        let mut ok = true;
        for obj in &objects {
            let zone_id = match kind {
                TaskKind::StackFold => "m".to_string(),
                _ => obj.color.home_zone().to_string(),
            };
            let zone = scene.zone(&zone_id).expect("zone exists");
            let (zx, zy) = zone.bbox.center();
            // The serving arm must reach both the object and its bin;
            // prefer the object's side on bimanual rigs.
            let preferred = if embodiment.arms.len() == 1 {
                0
            } else {
                usize::from(obj.x >= 0.8)
            };
            let candidates = [preferred, 1 - preferred.min(embodiment.arms.len() - 1)];
            let arm = candidates
                .into_iter()
                .take(embodiment.arms.len())
                .find(|&a| {
                    reachable(&embodiment, a, obj.x, obj.y) && reachable(&embodiment, a, zx, zy)
                });
            let Some(arm) = arm else {
                ok = false;
                break;
            };
            jobs.push(Job {
                object: obj.id,
                zone: zone_id,
                arm,
            });
        }
        if !ok {
            continue;
        }
        let instruction = match kind {
            TaskKind::PickPlace => {
                let o = &objects[0];
                format!(
                    "put the {} {} in bin {}",
                    o.color.word(),
                    o.shape.word(),
                    o.color.home_zone()
                )
            }
            TaskKind::Sort2 => "sort the two objects".to_string(),
            TaskKind::Sort4 => "sort the objects".to_string(),
            TaskKind::StackFold => "stack and fold the two items".to_string(),
        };
        return Ok(TaskInstance {
            kind,
            scene,
            embodiment,
            jobs,
            instruction,
        });
    }
    Err(WorldError::TaskGen(format!(
        "no solvable {} scene for `{emb_id}` after 40 rounds",
        kind.name()
    )))
}
