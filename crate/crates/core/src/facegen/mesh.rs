//! Mesh-like corruption: border-to-border strokes plus small watermark
//! blocks, composited with a constant gray per connected component.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{DemeshError, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Tensor;

use super::render::quantize;

pub const MIN_DENSITY: f64 = 0.03;
pub const MAX_DENSITY: f64 = 0.25;

const MAX_SLOPE: f64 = 0.95;

/// One stroke: the centre line runs across the image along `major`
/// columns (horizontal) or rows (vertical).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stroke {
    horizontal: bool,
    start: f64,
    end: f64,
    amplitude: f64,
    cycles: f64,
    phase: f64,
    thickness: usize,
}

impl Stroke {
    fn random(rng: &mut Rng, height: usize, width: usize) -> Stroke {
        let horizontal = rng.random_bool(0.5);
        let (major, minor) = if horizontal { (width, height) } else { (height, width) };
        let (major, minor) = (major as f64, minor as f64);
        let start = rng.random_range(0.0..minor - 1.0);
        // keep the total slope below MAX_SLOPE so the per-line runs stay 8-connected
        let drift_cap = (0.5 * MAX_SLOPE * (major - 1.0)).min(minor - 1.0);
        let end = (start + rng.random_range(-drift_cap..=drift_cap)).clamp(0.0, minor - 1.0);
        let wavy = rng.random_bool(0.5);
        let cycles = if wavy { rng.random_range(0.5..2.0) } else { 0.0 };
        let slope_left = MAX_SLOPE - (end - start).abs() / (major - 1.0);
        let amp_cap = if cycles > 0.0 {
            (slope_left * major / (2.0 * PI * cycles)).min(3.0)
        } else {
            0.0
        };
        Stroke {
            horizontal,
            start,
            end,
            amplitude: if amp_cap > 0.0 { rng.random_range(0.0..=amp_cap) } else { 0.0 },
            cycles,
            phase: rng.random_range(0.0..2.0 * PI),
            thickness: rng.random_range(1..=3),
        }
    }

    fn draw(&self, mask: &mut [f64], height: usize, width: usize) {
        let (major, minor) = if self.horizontal { (width, height) } else { (height, width) };
        for i in 0..major {
            let t = i as f64 / (major as f64 - 1.0);
            let centre = self.start
                + t * (self.end - self.start)
                + self.amplitude * (2.0 * PI * self.cycles * t + self.phase).sin();
            let first = (centre - (self.thickness as f64 - 1.0) / 2.0).round() as isize;
            for j in first..first + self.thickness as isize {
                if j < 0 || j >= minor as isize {
                    continue;
                }
                let (r, c) = if self.horizontal { (j as usize, i) } else { (i, j as usize) };
                mask[r * width + c] = 1.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    row: usize,
    col: usize,
    h: usize,
    w: usize,
}

impl Blob {
    fn random(rng: &mut Rng, height: usize, width: usize) -> Blob {
        let h = rng.random_range(2..=6.min(height));
        let w = rng.random_range(4..=12.min(width));
        Blob {
            row: rng.random_range(0..=height - h),
            col: rng.random_range(0..=width - w),
            h,
            w,
        }
    }

    fn draw(&self, mask: &mut [f64], width: usize) {
        for r in self.row..self.row + self.h {
            mask[r * width + self.col..r * width + self.col + self.w].fill(1.0);
        }
    }
}

fn rasterize(strokes: &[Stroke], blobs: &[Blob], height: usize, width: usize) -> Vec<f64> {
    let mut m = vec![0.0; height * width];
    for s in strokes {
        s.draw(&mut m, height, width);
    }
    for b in blobs {
        b.draw(&mut m, width);
    }
    m
}

fn density(m: &[f64]) -> f64 {
    m.iter().sum::<f64>() / m.len() as f64
}

/// Random binary corruption mask `[1, height, width]` with density
/// clamped to `[MIN_DENSITY, MAX_DENSITY]`.
pub fn synth_mesh(seed: u64, height: usize, width: usize) -> Result<Tensor> {
    if height < 16 || width < 16 {
        return Err(DemeshError::invalid("synth_mesh", format!("extent {height}x{width} below 16")));
    }
    let mut rng = seeded(derive_seed(seed, "mesh", 0));
    let n_strokes = rng.random_range(2..=6);
    let mut strokes: Vec<Stroke> = (0..n_strokes).map(|_| Stroke::random(&mut rng, height, width)).collect();
    let n_blobs = rng.random_range(0..=2);
    let mut blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::random(&mut rng, height, width)).collect();
    let mut m = rasterize(&strokes, &blobs, height, width);
    while density(&m) > MAX_DENSITY {
        if strokes.len() > 1 {
            strokes.pop();
        } else if blobs.pop().is_none() {
            let s = &mut strokes[0];
            s.thickness -= 1;
        }
        m = rasterize(&strokes, &blobs, height, width);
    }
    while density(&m) < MIN_DENSITY {
        let s = Stroke::random(&mut rng, height, width);
        s.draw(&mut m, height, width);
    }
    Tensor::new(vec![1, height, width], m)
}

pub fn ensure_binary(mask: &Tensor, op: &'static str) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(DemeshError::NonBinaryMask {
            op,
            index,
            value: mask.data()[index],
        }),
        None => Ok(()),
    }
}

/// 8-connected component labels of the mask support (0 = background),
/// numbered in raster order of first pixel.
pub fn label_components(mask: &Tensor) -> Result<(Vec<usize>, usize)> {
    let (_, h, w) = mask.chw("label_components")?;
    ensure_binary(mask, "label_components")?;
    let m = mask.data();
    let mut labels = vec![0usize; m.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if m[q] != 0.0 && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok((labels, next))
}

/// `X = (1 - M) ⊙ Y + M ⊙ g` with a single gray `g`.
pub fn apply_mesh_gray(clear: &Tensor, mask: &Tensor, gray: f64) -> Result<Tensor> {
    clear.ensure_shape("apply_mesh", mask.shape())?;
    ensure_binary(mask, "apply_mesh")?;
    clear.zip_map(mask, "apply_mesh", |y, m| if m != 0.0 { gray } else { y })
}

/// Composites with one gray per connected mask component, drawn from the
/// dark band `[0, 0.3]` or the light band `[0.7, 1]`.
pub fn apply_mesh(clear: &Tensor, mask: &Tensor, seed: u64) -> Result<Tensor> {
    clear.ensure_shape("apply_mesh", mask.shape())?;
    let (labels, n) = label_components(mask)?;
    let mut rng = seeded(derive_seed(seed, "mesh-gray", 0));
    let grays: Vec<f64> = (0..n)
        .map(|_| {
            let g = rng.random_range(0.0..=0.3);
            quantize(if rng.random_bool(0.5) { g } else { 1.0 - g })
        })
        .collect();
    let data = clear
        .data()
        .iter()
        .zip(&labels)
        .map(|(&y, &l)| if l == 0 { y } else { grays[l - 1] })
        .collect();
    Tensor::new(clear.shape().to_vec(), data)
}
