//! Per-part line charts and CSV dumps of parameter channels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dyadmo::{DyadicClip, Part, Role};
use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::{CliError, Result};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 240;
const MARGIN: u32 = 8;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws every channel (row) of `track` over time on a shared y-range.
pub fn render_track(track: &Array2<f32>) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x_lo, x_hi) = (MARGIN as i64, (WIDTH - MARGIN - 1) as i64);
    let (y_lo, y_hi) = (MARGIN as i64, (HEIGHT - MARGIN - 1) as i64);
    let frame = Rgb([0, 0, 0]);
    line(&mut img, (x_lo, y_lo), (x_hi, y_lo), frame);
    line(&mut img, (x_lo, y_hi), (x_hi, y_hi), frame);
    line(&mut img, (x_lo, y_lo), (x_lo, y_hi), frame);
    line(&mut img, (x_hi, y_lo), (x_hi, y_hi), frame);

    let t = track.ncols();
    let finite = track.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if t < 2 || lo > hi {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |i: usize| x_lo + 1 + ((x_hi - x_lo - 2) as f64 * i as f64 / (t - 1) as f64).round() as i64;
    let py = |v: f32| y_hi - 1 - ((y_hi - y_lo - 2) as f64 * ((v - lo) / span) as f64).round() as i64;
    for (c, row) in track.rows().into_iter().enumerate() {
        let color = Rgb(PALETTE[c % PALETTE.len()]);
        for i in 1..t {
            let (a, b) = (row[i - 1], row[i]);
            if a.is_finite() && b.is_finite() {
                line(&mut img, (px(i - 1), py(a)), (px(i), py(b)), color);
            }
        }
    }
    img
}

/// `frame,c0,c1,...` with one row per frame.
pub fn track_csv(track: &Array2<f32>) -> String {
    let mut s = String::from("frame");
    for c in 0..track.nrows() {
        write!(s, ",c{c}").unwrap();
    }
    s.push('\n');
    for (i, col) in track.columns().into_iter().enumerate() {
        write!(s, "{i}").unwrap();
        for v in col {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `<role>_<part>.png` and `.csv` for all six tracks of `clip`.
pub fn emit_clip_plots(clip: &DyadicClip, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for role in [Role::Speaker, Role::Listener] {
        for part in Part::ALL {
            let track = clip.track(role, part);
            let stem = format!("{}_{}", role.name(), part.name());
            let png = dir.join(format!("{stem}.png"));
            render_track(track).save(&png).map_err(|source| CliError::Image {
                path: png.clone(),
                source,
            })?;
            let csv = dir.join(format!("{stem}.csv"));
            fs::write(&csv, track_csv(track)).map_err(|e| CliError::io(&csv, e))?;
            out.push(png);
            out.push(csv);
        }
    }
    Ok(out)
}
