//! Scene state: colored objects and target zones on a bounded table.

use serde::{Deserialize, Serialize};

/// Workspace extents in world units.
pub const WORK_W: f64 = 1.6;
pub const WORK_H: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bbox {
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersection(&self, other: &Bbox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &Bbox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Rect,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Rect => "rect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjColor {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const ALL_COLORS: [ObjColor; 4] = [
    ObjColor::Red,
    ObjColor::Green,
    ObjColor::Blue,
    ObjColor::Yellow,
];

impl ObjColor {
    pub fn word(self) -> &'static str {
        match self {
            ObjColor::Red => "red",
            ObjColor::Green => "green",
            ObjColor::Blue => "blue",
            ObjColor::Yellow => "yellow",
        }
    }

    /// Zone each color sorts into.
    pub fn home_zone(self) -> &'static str {
        match self {
            ObjColor::Red => "a",
            ObjColor::Green => "b",
            ObjColor::Blue => "c",
            ObjColor::Yellow => "d",
        }
    }
}

pub const DISC_RADIUS: f64 = 0.075;
pub const RECT_W: f64 = 0.16;
pub const RECT_H: f64 = 0.11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub shape: Shape,
    pub color: ObjColor,
    pub x: f64,
    pub y: f64,
}

impl SceneObject {
    pub fn bbox(&self) -> Bbox {
        match self.shape {
            Shape::Disc => Bbox::centered(self.x, self.y, 2.0 * DISC_RADIUS, 2.0 * DISC_RADIUS),
            Shape::Rect => Bbox::centered(self.x, self.y, RECT_W, RECT_H),
        }
    }

    pub fn phrase_name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub targets: Vec<Zone>,
    pub time: usize,
    pub step_rate: usize,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>, targets: Vec<Zone>) -> Self {
        Self {
            objects,
            targets,
            time: 0,
            step_rate: crate::STEP_RATE,
        }
    }

    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn zone(&self, id: &str) -> Option<&Zone> {
        self.targets.iter().find(|z| z.id == id)
    }

    pub fn object_in_zone(&self, object: usize, zone: &str) -> bool {
        match (self.object(object), self.zone(zone)) {
            (Some(o), Some(z)) => z.bbox.contains(o.x, o.y),
            _ => false,
        }
    }

    /// Clamp a point into the workspace with a small margin.
    pub fn clamp_point(x: f64, y: f64) -> (f64, f64) {
        (x.clamp(0.02, WORK_W - 0.02), y.clamp(0.02, WORK_H - 0.02))
    }
}

/// The four sorting bins.
pub fn sorting_zones() -> Vec<Zone> {
    let size = 0.24;
    [
        ("a", 0.30, 0.74),
        ("b", 1.30, 0.74),
        ("c", 0.30, 0.36),
        ("d", 1.30, 0.36),
    ]
    .into_iter()
    .map(|(id, x, y)| Zone {
        id: id.to_string(),
        bbox: Bbox::centered(x, y, size, size),
    })
    .collect()
}

/// Single middle zone for the fold-like task.
pub fn middle_zone() -> Vec<Zone> {
    vec![Zone {
        id: "m".to_string(),
        bbox: Bbox::centered(0.80, 0.64, 0.30, 0.22),
    }]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Bbox {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        };
        assert_eq!(a.iou(&a), 1.0);
        let disjoint = Bbox {
            x0: 3.0,
            y0: 3.0,
            x1: 4.0,
            y1: 4.0,
        };
        assert_eq!(a.iou(&disjoint), 0.0);
        // (0,0,2,2) vs (1,1,3,3): intersection 1, union 7.
        let b = Bbox {
            x0: 1.0,
            y0: 1.0,
            x1: 3.0,
            y1: 3.0,
        };
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zones_stay_in_workspace() {
        for z in sorting_zones().iter().chain(middle_zone().iter()) {
            assert!(z.bbox.x0 >= 0.0 && z.bbox.x1 <= WORK_W);
            assert!(z.bbox.y0 >= 0.0 && z.bbox.y1 <= WORK_H);
        }
    }
}
