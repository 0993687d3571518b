//! Static bar-chart rendering for score CSVs.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};

const WIDTH: usize = 720;
const HEIGHT: usize = 420;
const MARGIN: usize = 48;
const BAR_COLORS: [[u8; 3]; 6] = [
    [86, 126, 196],
    [206, 118, 70],
    [96, 170, 96],
    [176, 96, 170],
    [190, 170, 80],
    [100, 170, 180],
];

struct Canvas {
    pix: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            pix: vec![245; WIDTH * HEIGHT * 3],
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        for y in y0..y1.min(HEIGHT) {
            for x in x0..x1.min(WIDTH) {
                let i = (y * WIDTH + x) * 3;
                self.pix[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
}

/// Parse "label,value" pairs out of a harness CSV: uses the `mean`-like
/// numeric column and the second column as the label.
fn parse_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::new();
    let mut lines = text.lines();
    let header = lines.next().context("empty CSV")?;
    let cols: Vec<&str> = header.split(',').collect();
    let value_col = cols
        .iter()
        .position(|c| c.starts_with("mean"))
        .context("no mean column in CSV header")?;
    let label_col = if cols.len() > 1 { 1 } else { 0 };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= value_col {
            continue;
        }
        let value: f64 = fields[value_col]
            .trim()
            .parse()
            .with_context(|| format!("bad value in row `{line}`"))?;
        let label = if label_col == 1 && fields.len() > 2 {
            format!("{} {}", fields[0], fields[1])
        } else {
            fields[0].to_string()
        };
        rows.push((label, value));
    }
    if rows.is_empty() {
        bail!("CSV has no data rows");
    }
    Ok(rows)
}

/// Render normalized-score bars into a PNG file.
pub fn plot_csv(csv_path: &Path, out_path: &Path) -> Result<()> {
    let text = fs::read_to_string(csv_path)
        .with_context(|| format!("cannot read {}", csv_path.display()))?;
    let rows = parse_csv(&text)?;
    let mut canvas = Canvas::new();
    // Axes.
    canvas.rect(MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2, HEIGHT - MARGIN + 2, [60, 60, 60]);
    canvas.rect(MARGIN - 2, MARGIN / 2, MARGIN, HEIGHT - MARGIN, [60, 60, 60]);
    // Gridlines at 0.25 steps for the unit interval.
    let plot_h = HEIGHT - MARGIN - MARGIN / 2;
    for q in 1..=4 {
        let y = HEIGHT - MARGIN - plot_h * q / 4;
        canvas.rect(MARGIN, y, WIDTH - MARGIN / 2, y + 1, [210, 210, 210]);
    }
    let span = WIDTH - MARGIN - MARGIN / 2;
    let slot = span / rows.len();
    let bar_w = (slot * 3 / 5).max(4);
    let max_value = rows.iter().map(|(_, v)| *v).fold(1.0_f64, f64::max);
    for (i, (_, value)) in rows.iter().enumerate() {
        let h = ((value / max_value).clamp(0.0, 1.0) * plot_h as f64) as usize;
        let x0 = MARGIN + i * slot + (slot - bar_w) / 2;
        let color = BAR_COLORS[i % BAR_COLORS.len()];
        canvas.rect(x0, HEIGHT - MARGIN - h, x0 + bar_w, HEIGHT - MARGIN, color);
    }
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(out_path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), WIDTH as u32, HEIGHT as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&canvas.pix)?;
    Ok(())
}
