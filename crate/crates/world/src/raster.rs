//! Deterministic painter's-order rasterizer producing palette-indexed
//! images. Policies consume the RGB expansion; generalization tests swap
//! palette entries.

use deskvla_model::image::ObsImage;
use serde::{Deserialize, Serialize};

use crate::kin::{KinematicEmbodiment, GRIPPER_SIDE};
use crate::scene::{ObjColor, Scene, Shape, DISC_RADIUS, RECT_H, RECT_W, WORK_H, WORK_W};

pub const VIEW_RES: usize = 64;

pub const PAL_BACKGROUND: u8 = 0;
pub const PAL_ZONE_A: u8 = 1;
pub const PAL_ZONE_B: u8 = 2;
pub const PAL_ZONE_C: u8 = 3;
pub const PAL_ZONE_D: u8 = 4;
pub const PAL_ZONE_M: u8 = 5;
pub const PAL_RED: u8 = 6;
pub const PAL_GREEN: u8 = 7;
pub const PAL_BLUE: u8 = 8;
pub const PAL_YELLOW: u8 = 9;
pub const PAL_LINK: u8 = 10;
pub const PAL_GRIP_OPEN: u8 = 11;
pub const PAL_GRIP_CLOSED: u8 = 12;
pub const PAL_GRIP_HOLDING: u8 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette(pub Vec<[u8; 3]>);

pub fn default_palette() -> Palette {
    Palette(vec![
        [40, 40, 48],    // background
        [70, 90, 140],   // zone a
        [140, 110, 60],  // zone b
        [80, 130, 80],   // zone c
        [130, 80, 130],  // zone d
        [95, 95, 100],   // zone m
        [220, 60, 50],   // red
        [60, 190, 80],   // green
        [70, 110, 230],  // blue
        [230, 200, 60],  // yellow
        [150, 150, 160], // links
        [240, 240, 240], // gripper open
        [250, 120, 160], // gripper closed
        [250, 170, 60],  // gripper holding an object
    ])
}

fn color_palette_id(c: ObjColor) -> u8 {
    match c {
        ObjColor::Red => PAL_RED,
        ObjColor::Green => PAL_GREEN,
        ObjColor::Blue => PAL_BLUE,
        ObjColor::Yellow => PAL_YELLOW,
    }
}

fn zone_palette_id(id: &str) -> u8 {
    match id {
        "a" => PAL_ZONE_A,
        "b" => PAL_ZONE_B,
        "c" => PAL_ZONE_C,
        "d" => PAL_ZONE_D,
        _ => PAL_ZONE_M,
    }
}

/// Palette-indexed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pix: Vec<u8>,
}

impl Image {
    pub fn to_obs(&self, palette: &Palette) -> ObsImage {
        let mut rgb = Vec::with_capacity(self.pix.len() * 3);
        for &p in &self.pix {
            let c = palette.0.get(p as usize).copied().unwrap_or([0, 0, 0]);
            rgb.push(f32::from(c[0]) / 255.0);
            rgb.push(f32::from(c[1]) / 255.0);
            rgb.push(f32::from(c[2]) / 255.0);
        }
        ObsImage::new(self.width, self.height, rgb).expect("sized")
    }
}

/// Three fixed cameras: full table plus zoomed left/right halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewSpec {
    Top,
    Left,
    Right,
}

pub const ALL_VIEWS: [ViewSpec; 3] = [ViewSpec::Top, ViewSpec::Left, ViewSpec::Right];

impl ViewSpec {
    /// World-rectangle this camera observes.
    fn window(self) -> (f64, f64, f64, f64) {
        match self {
            ViewSpec::Top => (0.0, 0.0, WORK_W, WORK_H),
            ViewSpec::Left => (0.0, 0.02, 0.92, 0.98),
            ViewSpec::Right => (0.68, 0.02, 1.60, 0.98),
        }
    }
}

struct Canvas {
    res: usize,
    pix: Vec<u8>,
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl Canvas {
    fn new(view: ViewSpec, res: usize) -> Self {
        let (x0, y0, x1, y1) = view.window();
        Self {
            res,
            pix: vec![PAL_BACKGROUND; res * res],
            x0,
            y0,
            sx: res as f64 / (x1 - x0),
            sy: res as f64 / (y1 - y0),
        }
    }

    fn px(&self, x: f64) -> f64 {
        (x - self.x0) * self.sx
    }

    fn py(&self, y: f64) -> f64 {
        // World y grows upward; pixels grow downward.
        self.res as f64 - (y - self.y0) * self.sy
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: u8) {
        let px0 = self.px(x0).floor().max(0.0) as usize;
        let px1 = (self.px(x1).ceil() as isize).clamp(0, self.res as isize) as usize;
        let py0 = self.py(y1).floor().max(0.0) as usize;
        let py1 = (self.py(y0).ceil() as isize).clamp(0, self.res as isize) as usize;
        for row in py0..py1.min(self.res) {
            for col in px0..px1.min(self.res) {
                self.pix[row * self.res + col] = color;
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, color: u8) {
        let px0 = (self.px(cx - r).floor().max(0.0)) as usize;
        let px1 = (self.px(cx + r).ceil() as isize).clamp(0, self.res as isize) as usize;
        let py0 = (self.py(cy + r).floor().max(0.0)) as usize;
        let py1 = (self.py(cy - r).ceil() as isize).clamp(0, self.res as isize) as usize;
        for row in py0..py1.min(self.res) {
            for col in px0..px1.min(self.res) {
                // Pixel center back to world coordinates.
                let wx = self.x0 + (col as f64 + 0.5) / self.sx;
                let wy = self.y0 + (self.res as f64 - (row as f64 + 0.5)) / self.sy;
                let dx = wx - cx;
                let dy = wy - cy;
                if dx * dx + dy * dy <= r * r {
                    self.pix[row * self.res + col] = color;
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, color: u8) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (len / (half_width * 0.75)).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + (b.0 - a.0) * t;
            let y = a.1 + (b.1 - a.1) * t;
            self.fill_disc(x, y, half_width, color);
        }
    }
}

/// Painter order: zones, objects, links, grippers. Pure function of its
/// arguments.
pub fn rasterize(scene: &Scene, emb: &KinematicEmbodiment, view: ViewSpec) -> Image {
    let mut canvas = Canvas::new(view, VIEW_RES);
    for zone in &scene.targets {
        canvas.fill_rect(
            zone.bbox.x0,
            zone.bbox.y0,
            zone.bbox.x1,
            zone.bbox.y1,
            zone_palette_id(&zone.id),
        );
    }
    for obj in &scene.objects {
        let color = color_palette_id(obj.color);
        match obj.shape {
            Shape::Disc => canvas.fill_disc(obj.x, obj.y, DISC_RADIUS, color),
            Shape::Rect => {
                let b = obj.bbox();
                canvas.fill_rect(b.x0, b.y0, b.x1, b.y1, color);
            }
        }
        let _ = (RECT_W, RECT_H);
    }
    for arm in &emb.arms {
        let chain = arm.chain();
        for pair in chain.windows(2) {
            canvas.line(pair[0], pair[1], 0.016, PAL_LINK);
        }
        let (ex, ey) = arm.ee();
        let color = if arm.grasped.is_some() {
            PAL_GRIP_HOLDING
        } else if arm.gripper >= 0.5 {
            PAL_GRIP_OPEN
        } else {
            PAL_GRIP_CLOSED
        };
        let half = GRIPPER_SIDE / 2.0;
        canvas.fill_rect(ex - half, ey - half, ex + half, ey + half, color);
    }
    Image {
        width: VIEW_RES,
        height: VIEW_RES,
        pix: canvas.pix,
    }
}

/// All three views in fixed order, as the policy sees them.
pub fn render_views(scene: &Scene, emb: &KinematicEmbodiment) -> Vec<Image> {
    ALL_VIEWS.iter().map(|&v| rasterize(scene, emb, v)).collect()
}
