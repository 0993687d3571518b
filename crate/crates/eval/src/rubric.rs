//! Point rubrics: pure geometric predicates over a trial's trajectory.
//! Predicates latch on satisfaction, so partial credit survives later
//! disturbance, mirroring per-item scoring.

use deskvla_world::scene::Scene;
use deskvla_world::task::{TaskInstance, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    /// The object sits inside the zone while ungrasped.
    ObjectInZone { object: usize, zone: String },
    /// Both objects reach the zone, `first` no later than `second`.
    OrderedArrival {
        first: usize,
        second: usize,
        zone: String,
    },
}

#[derive(Debug, Clone)]
pub struct Rubric {
    pub task: String,
    pub predicates: Vec<Predicate>,
}

impl Rubric {
    pub fn max_points(&self) -> usize {
        self.predicates.len()
    }

    /// Build the rubric for a sampled instance.
    pub fn for_instance(instance: &TaskInstance) -> Self {
        let mut predicates = Vec::new();
        match instance.kind {
            TaskKind::PickPlace | TaskKind::Sort2 | TaskKind::Sort4 => {
                for job in &instance.jobs {
                    predicates.push(Predicate::ObjectInZone {
                        object: job.object,
                        zone: job.zone.clone(),
                    });
                }
            }
            TaskKind::StackFold => {
                let first = instance.jobs[0].object;
                let second = instance.jobs[1].object;
                predicates.push(Predicate::ObjectInZone {
                    object: first,
                    zone: "m".into(),
                });
                predicates.push(Predicate::OrderedArrival {
                    first,
                    second,
                    zone: "m".into(),
                });
            }
        }
        Self {
            task: instance.kind.name().to_string(),
            predicates,
        }
    }
}

/// Incremental evaluation over a trajectory: feed every visited state, then
/// read the points.
#[derive(Debug, Clone)]
pub struct RubricTracker {
    rubric: Rubric,
    /// First step each (object, zone) pair was satisfied, keyed by object.
    arrivals: Vec<(usize, String, Option<usize>)>,
}

impl RubricTracker {
    pub fn new(rubric: Rubric) -> Self {
        let mut arrivals = Vec::new();
        for p in &rubric.predicates {
            match p {
                Predicate::ObjectInZone { object, zone } => {
                    arrivals.push((*object, zone.clone(), None));
                }
                Predicate::OrderedArrival { second, zone, .. } => {
                    arrivals.push((*second, zone.clone(), None));
                }
            }
        }
        arrivals.sort();
        arrivals.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        Self { rubric, arrivals }
    }

    pub fn observe(&mut self, scene: &Scene, grasped: &[Option<usize>], step: usize) {
        for (object, zone, arrival) in self.arrivals.iter_mut() {
            if arrival.is_some() {
                continue;
            }
            let held = grasped.iter().any(|g| *g == Some(*object));
            if !held && scene.object_in_zone(*object, zone) {
                *arrival = Some(step);
            }
        }
    }

    fn arrival(&self, object: usize, zone: &str) -> Option<usize> {
        self.arrivals
            .iter()
            .find(|(o, z, _)| *o == object && z == zone)
            .and_then(|(_, _, a)| *a)
    }

    pub fn points(&self) -> usize {
        self.rubric
            .predicates
            .iter()
            .filter(|p| match p {
                Predicate::ObjectInZone { object, zone } => {
                    self.arrival(*object, zone).is_some()
                }
                Predicate::OrderedArrival {
                    first,
                    second,
                    zone,
                } => match (self.arrival(*first, zone), self.arrival(*second, zone)) {
                    (Some(a), Some(b)) => a <= b,
                    _ => false,
                },
            })
            .count()
    }

    pub fn complete(&self) -> bool {
        self.points() == self.rubric.max_points()
    }

    pub fn max_points(&self) -> usize {
        self.rubric.max_points()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deskvla_autodiff::rng::DetRng;
    use deskvla_model::embodiment::EmbodimentId;
    use deskvla_world::task::sample_task;

    #[test]
    fn max_points_equals_predicate_count() {
        for (kind, expect) in [
            (TaskKind::PickPlace, 1),
            (TaskKind::Sort2, 2),
            (TaskKind::Sort4, 4),
            (TaskKind::StackFold, 2),
        ] {
            let emb = if kind == TaskKind::StackFold {
                "biman2x2"
            } else {
                "arm3"
            };
            let inst = sample_task(kind, &EmbodimentId::new(emb), &mut DetRng::new(1)).unwrap();
            let rubric = Rubric::for_instance(&inst);
            assert_eq!(rubric.max_points(), expect, "{}", kind.name());
        }
    }

    #[test]
    fn ordered_arrival_requires_the_order() {
        let inst = sample_task(
            TaskKind::StackFold,
            &EmbodimentId::new("biman2x2"),
            &mut DetRng::new(2),
        )
        .unwrap();
        let rubric = Rubric::for_instance(&inst);
        let (first, second) = (inst.jobs[0].object, inst.jobs[1].object);
        let (zx, zy) = inst.scene.zone("m").unwrap().bbox.center();

        // Second object arrives before the first: only one point.
        let mut tracker = RubricTracker::new(rubric.clone());
        let mut scene = inst.scene.clone();
        scene.objects[second].x = zx;
        scene.objects[second].y = zy;
        tracker.observe(&scene, &[None, None], 3);
        scene.objects[first].x = zx - 0.05;
        scene.objects[first].y = zy;
        tracker.observe(&scene, &[None, None], 9);
        assert_eq!(tracker.points(), 1);

        // Correct order earns both points.
        let mut tracker = RubricTracker::new(rubric);
        let mut scene = inst.scene.clone();
        scene.objects[first].x = zx - 0.05;
        scene.objects[first].y = zy;
        tracker.observe(&scene, &[None, None], 3);
        scene.objects[second].x = zx + 0.05;
        scene.objects[second].y = zy;
        tracker.observe(&scene, &[None, None], 9);
        assert_eq!(tracker.points(), 2);
    }

    #[test]
    fn grasped_objects_do_not_score() {
        let inst = sample_task(
            TaskKind::PickPlace,
            &EmbodimentId::new("arm3"),
            &mut DetRng::new(3),
        )
        .unwrap();
        let mut tracker = RubricTracker::new(Rubric::for_instance(&inst));
        let mut scene = inst.scene.clone();
        let zone = inst.jobs[0].zone.clone();
        let (zx, zy) = scene.zone(&zone).unwrap().bbox.center();
        scene.objects[0].x = zx;
        scene.objects[0].y = zy;
        tracker.observe(&scene, &[Some(0)], 5);
        assert_eq!(tracker.points(), 0);
        tracker.observe(&scene, &[None], 6);
        assert_eq!(tracker.points(), 1);
    }
}
