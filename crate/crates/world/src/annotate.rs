//! Substep annotation: grasp/release events recovered from IoU between
//! gripper and object boxes, turned into contiguous phrase segments with a
//! minimum five-second span.

use deskvla_model::vocab::Vocabulary;

use crate::scene::{Scene, Zone};
use crate::script::BboxTracks;
use crate::task::TaskInstance;
use crate::{Result, WorldError, GRASP_IOU, MIN_SEGMENT_STEPS};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SubstepAnnotation {
    pub segments: Vec<Segment>,
}

impl SubstepAnnotation {
    /// Segment covering a step, if any.
    pub fn segment_at(&self, step: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| step >= s.start && step < s.end)
    }

    pub fn phrases(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.phrase.as_str()).collect()
    }
}

/// Phrase inventory for the synthetic tasks plus instruction text; the
/// vocabulary is built from these words.
pub fn phrase_inventory() -> Vec<String> {
    let mut out = Vec::new();
    for color in ["red", "green", "blue", "yellow"] {
        for shape in ["disc", "rect"] {
            out.push(format!("reach {color} {shape}"));
            out.push(format!("grasp {color} {shape}"));
            for zone in ["a", "b", "c", "d", "m"] {
                out.push(format!("place {color} {shape} in bin {zone}"));
                out.push(format!("put the {color} {shape} in bin {zone}"));
            }
        }
    }
    out.push("sort the two objects".to_string());
    out.push("sort the objects".to_string());
    out.push("stack and fold the two items".to_string());
    out.push("idle".to_string());
    out
}

pub fn build_vocabulary() -> Vocabulary {
    let inventory = phrase_inventory();
    Vocabulary::build(inventory.iter().map(String::as_str))
}

fn zone_containing<'a>(zones: &'a [Zone], x: f64, y: f64) -> Option<&'a Zone> {
    zones.iter().find(|z| z.bbox.contains(x, y))
}

/// Detect grasp/release events from the recorded tracks and build merged
/// phrase segments covering the whole episode.
pub fn annotate_substeps(
    instance: &TaskInstance,
    tracks: &BboxTracks,
    n_steps: usize,
) -> Result<SubstepAnnotation> {
    if tracks.grippers.len() < n_steps || tracks.objects.len() < n_steps {
        return Err(WorldError::Annotation(format!(
            "missing bbox track: {} gripper / {} object steps for an episode of {n_steps}",
            tracks.grippers.len(),
            tracks.objects.len()
        )));
    }
    if n_steps == 0 {
        return Ok(SubstepAnnotation::default());
    }
    let scene: &Scene = &instance.scene;
    let arms = tracks.grippers[0].len();
    let mut held: Vec<Option<usize>> = vec![None; arms];
    let mut raw: Vec<Segment> = Vec::new();
    let mut seg_start = 0usize;

    for step in 0..n_steps {
        for arm in 0..arms {
            let (gbox, openness) = tracks.grippers[step][arm];
            let prev_open = if step == 0 {
                1.0
            } else {
                tracks.grippers[step - 1][arm].1
            };
            let closing = prev_open >= 0.5 && openness < 0.5;
            let opening = prev_open < 0.5 && openness >= 0.5;
            if closing && held[arm].is_none() {
                let mut best: Option<(usize, f64)> = None;
                for (obj_id, obox) in &tracks.objects[step] {
                    let iou = gbox.iou(obox);
                    if iou >= GRASP_IOU && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((*obj_id, iou));
                    }
                }
                if let Some((obj_id, _)) = best {
                    held[arm] = Some(obj_id);
                    let name = scene
                        .object(obj_id)
                        .map(|o| o.phrase_name())
                        .unwrap_or_else(|| "item".to_string());
                    // A long approach stands as its own segment; a short one
                    // folds into the cycle that ends at the release.
                    if step - seg_start >= MIN_SEGMENT_STEPS {
                        raw.push(Segment {
                            start: seg_start,
                            end: step,
                            phrase: format!("reach {name}"),
                        });
                        seg_start = step;
                    }
                }
            } else if opening {
                if let Some(obj_id) = held[arm].take() {
                    let name = scene
                        .object(obj_id)
                        .map(|o| o.phrase_name())
                        .unwrap_or_else(|| "item".to_string());
                    let zone = tracks.objects[step]
                        .iter()
                        .find(|(id, _)| *id == obj_id)
                        .and_then(|(_, b)| {
                            let (cx, cy) = b.center();
                            zone_containing(&scene.targets, cx, cy)
                        })
                        .map(|z| z.id.clone())
                        .unwrap_or_else(|| "m".to_string());
                    raw.push(Segment {
                        start: seg_start,
                        end: (step + 1).min(n_steps),
                        phrase: format!("place {name} in bin {zone}"),
                    });
                    seg_start = (step + 1).min(n_steps);
                }
            }
        }
    }
    if seg_start < n_steps {
        // Trailing settle steps continue the last cycle's phrase.
        match raw.last_mut() {
            Some(last) if last.end == seg_start => last.end = n_steps,
            _ => raw.push(Segment {
                start: seg_start,
                end: n_steps,
                phrase: "idle".to_string(),
            }),
        }
    }

    // Merge forward until every segment spans the minimum; the final
    // remainder may stay short. A short segment adopts the phrase of the
    // following one, so an approach folds into its placement.
    let mut merged: Vec<Segment> = Vec::new();
    let mut iter = raw.into_iter().peekable();
    while let Some(mut seg) = iter.next() {
        while seg.end - seg.start < MIN_SEGMENT_STEPS && iter.peek().is_some() {
            let next = iter.next().expect("peeked");
            seg = Segment {
                start: seg.start,
                end: next.end,
                phrase: next.phrase,
            };
        }
        merged.push(seg);
    }
    // Collapse adjacent duplicates (a short trailing remainder often repeats
    // its predecessor's phrase).
    let mut out: Vec<Segment> = Vec::new();
    for seg in merged {
        if let Some(prev) = out.last_mut() {
            if prev.phrase == seg.phrase && prev.end == seg.start {
                prev.end = seg.end;
                continue;
            }
        }
        out.push(seg);
    }
    Ok(SubstepAnnotation { segments: out })
}
