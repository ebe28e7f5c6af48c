//! Landmark-driven spatial transformer.
//!
//! A similarity transform `θ = [a, b, tx; -b, a, ty]` is solved from the two
//! eye centres so that the canonical crop positions `(-0.5, -0.5)` and
//! `(0.5, -0.5)` land on the source eyes. Every crop pixel is mapped through
//! `θ` into normalised source coordinates and read with a bilinear kernel.
//! Gradients flow back to the source image only; `θ` is not learned.

use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

/// Normalised crop positions of the left and right eye.
pub const TARGET_LEFT_EYE: (f64, f64) = (-0.5, -0.5);
pub const TARGET_RIGHT_EYE: (f64, f64) = (0.5, -0.5);

/// Eye centres as `(x, y)` pixel coordinates of the source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks {
    pub left: (f64, f64),
    pub right: (f64, f64),
}

impl Landmarks {
    pub fn new(left: (f64, f64), right: (f64, f64)) -> Self {
        Landmarks { left, right }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Landmarks {
            left: (self.left.0 + dx, self.left.1 + dy),
            right: (self.right.0 + dx, self.right.1 + dy),
        }
    }

    pub fn normalized(&self, height: usize, width: usize) -> Landmarks {
        Landmarks {
            left: normalize_coords(self.left, height, width),
            right: normalize_coords(self.right, height, width),
        }
    }

    pub fn inside(&self, height: usize, width: usize, margin: f64) -> bool {
        [self.left, self.right].iter().all(|&(x, y)| {
            x >= margin && y >= margin && x <= width as f64 - 1.0 - margin && y <= height as f64 - 1.0 - margin
        })
    }
}

/// The alignment transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityParams {
    pub const IDENTITY: SimilarityParams = SimilarityParams {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, -self.b * x + self.a * y + self.ty)
    }
}

/// Pixel → `[-1, 1]`, mapping pixel 0 to -1 and pixel `extent - 1` to +1.
pub fn normalize_coords((x, y): (f64, f64), height: usize, width: usize) -> (f64, f64) {
    (
        x * 2.0 / (width as f64 - 1.0) - 1.0,
        y * 2.0 / (height as f64 - 1.0) - 1.0,
    )
}

/// Inverse of [`normalize_coords`].
pub fn denormalize_coords((x, y): (f64, f64), height: usize, width: usize) -> (f64, f64) {
    (
        (x + 1.0) * (width as f64 - 1.0) / 2.0,
        (y + 1.0) * (height as f64 - 1.0) / 2.0,
    )
}

/// Gaussian elimination with partial pivoting on a 4×4 system.
fn solve4(mut m: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    Some(x)
}

/// Solves `θ` from eyes given in normalised source coordinates.
pub fn solve_similarity(eyes: &Landmarks) -> Result<SimilarityParams> {
    let (dx, dy) = (eyes.right.0 - eyes.left.0, eyes.right.1 - eyes.left.1);
    if dx.hypot(dy) < 1e-12 {
        return Err(DemeshError::DegenerateLandmarks {
            x: eyes.left.0,
            y: eyes.left.1,
        });
    }
    let mut m = [[0.0; 4]; 4];
    let mut rhs = [0.0; 4];
    for (k, (target, source)) in [(TARGET_LEFT_EYE, eyes.left), (TARGET_RIGHT_EYE, eyes.right)]
        .into_iter()
        .enumerate()
    {
        let (xt, yt) = target;
        // unknowns (a, b, tx, ty)
        m[2 * k] = [xt, yt, 1.0, 0.0];
        rhs[2 * k] = source.0;
        m[2 * k + 1] = [yt, -xt, 0.0, 1.0];
        rhs[2 * k + 1] = source.1;
    }
    let [a, b, tx, ty] = solve4(m, rhs).ok_or(DemeshError::DegenerateLandmarks {
        x: eyes.left.0,
        y: eyes.left.1,
    })?;
    Ok(SimilarityParams { a, b, tx, ty })
}

/// Rounds coordinates that sit within round-off of a pixel centre, so that
/// grids landing on the pixel lattice read pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// One bilinear tap: flat source index and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    index: usize,
    weight: f64,
}

/// Normalised source coordinates for every output pixel (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    height: usize,
    width: usize,
    points: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn from_points(height: usize, width: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != height * width {
            return Err(DemeshError::ShapeMismatch {
                op: "SampleGrid",
                expected: vec![height, width],
                found: vec![points.len()],
            });
        }
        Ok(SampleGrid { height, width, points })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        self.points[row * self.width + col]
    }

    /// Bilinear taps per output pixel against an `h × w` source. Taps that
    /// fall outside the source are dropped (zero padding).
    fn taps(&self, h: usize, w: usize) -> Vec<[Option<Tap>; 4]> {
        self.points
            .iter()
            .map(|&p| {
                let (m, n) = denormalize_coords(p, h, w);
                let (m, n) = (snap(m), snap(n));
                let (x0, y0) = (m.floor(), n.floor());
                let (fx, fy) = (m - x0, n - y0);
                let mut taps = [None; 4];
                for (slot, (ox, oy, wt)) in [
                    (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                    (1.0, 0.0, fx * (1.0 - fy)),
                    (0.0, 1.0, (1.0 - fx) * fy),
                    (1.0, 1.0, fx * fy),
                ]
                .into_iter()
                .enumerate()
                {
                    let (x, y) = (x0 + ox, y0 + oy);
                    if wt != 0.0 && x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                        taps[slot] = Some(Tap {
                            index: y as usize * w + x as usize,
                            weight: wt,
                        });
                    }
                }
                taps
            })
            .collect()
    }
}

/// The regular target grid mapped through `θ`.
pub fn generate_grid(params: &SimilarityParams, out_h: usize, out_w: usize) -> Result<SampleGrid> {
    if out_h < 2 || out_w < 2 {
        return Err(DemeshError::invalid(
            "generate_grid",
            format!("grid extents must be at least 2, got {out_h}x{out_w}"),
        ));
    }
    let mut points = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            let target = normalize_coords((c as f64, r as f64), out_h, out_w);
            points.push(params.apply(target));
        }
    }
    Ok(SampleGrid {
        height: out_h,
        width: out_w,
        points,
    })
}

/// Bilinear read of a `[C, H, W]` image at the grid points → `[C, gh, gw]`.
pub fn bilinear_sample(input: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let (c, h, w) = input.chw("bilinear_sample")?;
    if h < 2 || w < 2 {
        return Err(DemeshError::invalid("bilinear_sample", "source extents must be at least 2"));
    }
    let taps = grid.taps(h, w);
    let plane = grid.height * grid.width;
    let x = input.data();
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (o, pt) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&taps) {
            *o = pt.iter().flatten().map(|t| src[t.index] * t.weight).sum();
        }
    }
    Ok(Tensor::from_parts(vec![c, grid.height, grid.width], out))
}

/// Adjoint of [`bilinear_sample`] w.r.t. the source image.
pub fn bilinear_backward(grad_out: &Tensor, grid: &SampleGrid, input_shape: &[usize]) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(DemeshError::invalid("bilinear_backward", "input shape must be [C, H, W]"));
    };
    grad_out.ensure_shape("bilinear_backward", &[c, grid.height, grid.width])?;
    let taps = grid.taps(h, w);
    let plane = grid.height * grid.width;
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (gv, pt) in g[ch * plane..(ch + 1) * plane].iter().zip(&taps) {
            for t in pt.iter().flatten() {
                dst[t.index] += gv * t.weight;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Sampling grid that cuts an aligned `crop_h × crop_w` face out of an
/// `src_h × src_w` image with the given eye landmarks.
pub fn alignment_grid(eyes: &Landmarks, src_h: usize, src_w: usize, crop_h: usize, crop_w: usize) -> Result<SampleGrid> {
    if !eyes.inside(src_h, src_w, 0.0) {
        return Err(DemeshError::invalid(
            "align_face",
            format!("landmarks {eyes:?} outside the {src_h}x{src_w} image"),
        ));
    }
    let params = solve_similarity(&eyes.normalized(src_h, src_w))?;
    generate_grid(&params, crop_h, crop_w)
}

/// Grid that resamples a whole image to `out_h × out_w` without rotation.
pub fn resize_grid(out_h: usize, out_w: usize) -> Result<SampleGrid> {
    generate_grid(&SimilarityParams::IDENTITY, out_h, out_w)
}

/// Aligned face crop; differentiable w.r.t. `image` via
/// [`bilinear_backward`] with the returned grid.
pub fn align_face(image: &Tensor, eyes: &Landmarks, crop_h: usize, crop_w: usize) -> Result<(Tensor, SampleGrid)> {
    let (_, h, w) = image.chw("align_face")?;
    let grid = alignment_grid(eyes, h, w, crop_h, crop_w)?;
    let crop = bilinear_sample(image, &grid)?;
    Ok((crop, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::{normal_tensor, seeded};
    use rand::Rng as _;

    fn close(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
        (a.0 - b.0).abs() < tol && (a.1 - b.1).abs() < tol
    }

    #[test]
    fn normalization_endpoints_and_centre() {
        assert_eq!(normalize_coords((0.0, 0.0), 128, 128), (-1.0, -1.0));
        assert_eq!(normalize_coords((127.0, 127.0), 128, 128), (1.0, 1.0));
        assert_eq!(normalize_coords((3.0, 2.0), 5, 7), (0.0, 0.0));
        let (x, y) = normalize_coords((96.0, 32.0), 128, 128);
        assert!((x - (96.0 * 2.0 / 127.0 - 1.0)).abs() < 1e-15);
        assert!((x - 0.5118).abs() < 1e-4 && (y + 0.4961).abs() < 1e-4);
    }

    #[test]
    fn identity_correspondence_gives_identity_transform() {
        let p = solve_similarity(&Landmarks::new(TARGET_LEFT_EYE, TARGET_RIGHT_EYE)).unwrap();
        assert!((p.a - 1.0).abs() < 1e-15 && p.b.abs() < 1e-15 && p.tx.abs() < 1e-15 && p.ty.abs() < 1e-15);
    }

    #[test]
    fn quarter_turn_correspondence() {
        // (-0.5,-0.5) -> (-0.5, 0.5) and (0.5,-0.5) -> (-0.5,-0.5):
        // x-equations give a = 0, y-equations give b = 1, then tx = ty = 0.
        let p = solve_similarity(&Landmarks::new((-0.5, 0.5), (-0.5, -0.5))).unwrap();
        assert!(p.a.abs() < 1e-15);
        assert!((p.b - 1.0).abs() < 1e-15);
        assert!(p.tx.abs() < 1e-15 && p.ty.abs() < 1e-15);
    }

    #[test]
    fn coincident_eyes_are_degenerate() {
        let err = solve_similarity(&Landmarks::new((0.1, 0.2), (0.1, 0.2))).unwrap_err();
        assert!(matches!(err, DemeshError::DegenerateLandmarks { .. }));
    }

    #[test]
    fn random_solves_reproduce_source_eyes() {
        let mut rng = seeded(77);
        for _ in 0..200 {
            let mut pt = || (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let eyes = Landmarks::new(pt(), pt());
            let p = solve_similarity(&eyes).unwrap();
            assert!(close(p.apply(TARGET_LEFT_EYE), eyes.left, 1e-12));
            assert!(close(p.apply(TARGET_RIGHT_EYE), eyes.right, 1e-12));
            assert!(p.a * p.a + p.b * p.b > 0.0);
        }
    }

    #[test]
    fn identity_and_translation_grids() {
        let g = generate_grid(&SimilarityParams::IDENTITY, 4, 5).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(g.point(r, c), normalize_coords((c as f64, r as f64), 4, 5));
            }
        }
        let shifted = generate_grid(&SimilarityParams { tx: 0.1, ..SimilarityParams::IDENTITY }, 4, 5).unwrap();
        for (a, b) in g.points().iter().zip(shifted.points()) {
            assert!((b.0 - a.0 - 0.1).abs() < 1e-15 && b.1 == a.1);
        }
        assert!(generate_grid(&SimilarityParams::IDENTITY, 1, 5).is_err());
    }

    #[test]
    fn grid_is_affine_in_target_coordinates() {
        let p = SimilarityParams { a: 0.7, b: -0.3, tx: 0.2, ty: -0.1 };
        let g = generate_grid(&p, 6, 7).unwrap();
        for r in 0..6 {
            for c in 1..6 {
                let (a, b, d) = (g.point(r, c - 1), g.point(r, c), g.point(r, c + 1));
                assert!((a.0 - 2.0 * b.0 + d.0).abs() < 1e-14 && (a.1 - 2.0 * b.1 + d.1).abs() < 1e-14);
            }
        }
        for c in 0..7 {
            for r in 1..5 {
                let (a, b, d) = (g.point(r - 1, c), g.point(r, c), g.point(r + 1, c));
                assert!((a.0 - 2.0 * b.0 + d.0).abs() < 1e-14 && (a.1 - 2.0 * b.1 + d.1).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn centre_of_two_by_two() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SampleGrid::from_points(1, 1, vec![(0.0, 0.0)]).unwrap();
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[1.5]);
    }

    #[test]
    fn identity_grid_copies_pixels_exactly() {
        let img = normal_tensor(&mut seeded(3), &[2, 9, 7], 1.0);
        let out = bilinear_sample(&img, &resize_grid(9, 7).unwrap()).unwrap();
        assert_eq!(out, img);
        let back = bilinear_backward(&img, &resize_grid(9, 7).unwrap(), &[2, 9, 7]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn constant_image_stays_constant_inside_border() {
        let img = Tensor::filled(&[1, 10, 12], 0.37);
        let p = SimilarityParams { a: 0.6, b: 0.2, tx: 0.05, ty: -0.1 };
        let out = bilinear_sample(&img, &generate_grid(&p, 8, 8).unwrap()).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_grid_reads_and_writes_zero() {
        let img = Tensor::filled(&[1, 6, 6], 1.0);
        let p = SimilarityParams { tx: 5.0, ..SimilarityParams::IDENTITY };
        let grid = generate_grid(&p, 4, 4).unwrap();
        assert!(bilinear_sample(&img, &grid).unwrap().data().iter().all(|&v| v == 0.0));
        let back = bilinear_backward(&Tensor::filled(&[1, 4, 4], 1.0), &grid, &[1, 6, 6]).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
        assert!(bilinear_backward(&Tensor::zeros(&[1, 3, 4]), &grid, &[1, 6, 6]).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_sample() {
        let mut rng = seeded(19);
        for _ in 0..20 {
            let p = SimilarityParams {
                a: rng.random_range(0.3..1.2),
                b: rng.random_range(-0.5..0.5),
                tx: rng.random_range(-0.4..0.4),
                ty: rng.random_range(-0.4..0.4),
            };
            let grid = generate_grid(&p, 7, 6).unwrap();
            let u = normal_tensor(&mut rng, &[2, 11, 9], 1.0);
            let v = normal_tensor(&mut rng, &[2, 7, 6], 1.0);
            let lhs = bilinear_sample(&u, &grid).unwrap().dot(&v).unwrap();
            let rhs = u.dot(&bilinear_backward(&v, &grid, &[2, 11, 9]).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn sampler_gradient_matches_finite_differences() {
        let mut rng = seeded(23);
        let p = SimilarityParams { a: 0.8, b: 0.25, tx: 0.1, ty: -0.2 };
        let grid = generate_grid(&p, 5, 5).unwrap();
        let probe = normal_tensor(&mut rng, &[1, 5, 5], 1.0);
        let x = normal_tensor(&mut rng, &[1, 8, 8], 1.0);
        let f = |t: &Tensor| {
            Ok((
                bilinear_sample(t, &grid)?.dot(&probe)?,
                bilinear_backward(&probe, &grid, &[1, 8, 8])?,
            ))
        };
        assert!(grad_check(f, &x, 1e-4).unwrap().passed);
    }

    #[test]
    fn aligned_eyes_give_pixel_exact_subwindow() {
        // crop 32x32: target eyes sit at crop pixels (7.75, 7.75) and (23.25, 7.75).
        let img = normal_tensor(&mut seeded(5), &[1, 40, 40], 1.0);
        let (ox, oy) = (5.0, 7.0);
        let eyes = Landmarks::new((7.75 + ox, 7.75 + oy), (23.25 + ox, 7.75 + oy));
        let (crop, _) = align_face(&img, &eyes, 32, 32).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let src = img.data()[(r + oy as usize) * 40 + c + ox as usize];
                assert!((crop.data()[r * 32 + c] - src).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn joint_integer_shift_leaves_crop_unchanged() {
        let img = normal_tensor(&mut seeded(6), &[1, 40, 40], 1.0);
        let eyes = Landmarks::new((14.3, 15.1), (26.9, 16.4));
        let (base, _) = align_face(&img, &eyes, 16, 16).unwrap();
        let (dx, dy) = (3usize, 2usize);
        let mut shifted = Tensor::zeros(&[1, 40, 40]);
        for r in 0..40 - dy {
            for c in 0..40 - dx {
                shifted.data_mut()[(r + dy) * 40 + c + dx] = img.data()[r * 40 + c];
            }
        }
        let (moved, _) = align_face(&shifted, &eyes.translated(dx as f64, dy as f64), 16, 16).unwrap();
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn align_face_gradient_matches_finite_differences() {
        let mut rng = seeded(31);
        let img = normal_tensor(&mut rng, &[1, 12, 10], 1.0);
        let eyes = Landmarks::new((3.2, 4.1), (6.7, 4.6));
        let probe = normal_tensor(&mut rng, &[1, 6, 6], 1.0);
        let f = |t: &Tensor| {
            let (crop, grid) = align_face(t, &eyes, 6, 6)?;
            Ok((crop.dot(&probe)?, bilinear_backward(&probe, &grid, t.shape())?))
        };
        assert!(grad_check(f, &img, 1e-4).unwrap().passed);
    }

    #[test]
    fn landmarks_outside_image_are_rejected() {
        let img = Tensor::zeros(&[1, 10, 10]);
        assert!(align_face(&img, &Landmarks::new((-1.0, 3.0), (5.0, 3.0)), 4, 4).is_err());
    }
}
