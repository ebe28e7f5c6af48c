//! Procedural frontal faces with analytically known eye centres.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{DemeshError, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::stn::Landmarks;
use crate::tensor::Tensor;

/// Default image extent (rows, columns).
pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 48;

/// Minimum distance of a jittered eye centre from the image border.
pub const EYE_MARGIN: f64 = 2.0;

const MAX_JITTER_RETRIES: usize = 100;

/// Geometry and gray levels of one synthetic person. Lengths are pixels at
/// the default 64×48 extent, offsets are relative to the image centre, and
/// rendering scales them with the image width.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub seed: u64,
    pub head_rx: f64,
    pub head_ry: f64,
    pub head_dy: f64,
    pub skin: f64,
    pub background: f64,
    pub background_slope: f64,
    pub hair: f64,
    pub hair_depth: f64,
    pub hair_width: f64,
    pub eye_half_spacing: f64,
    pub eye_dy: f64,
    pub eye_radius: f64,
    pub eye_gray: f64,
    pub brow_lift: f64,
    pub brow_half_len: f64,
    pub brow_thickness: f64,
    pub brow_tilt: f64,
    pub nose_len: f64,
    pub nose_width: f64,
    pub mouth_dy: f64,
    pub mouth_half_width: f64,
    pub mouth_curve: f64,
    pub mouth_thickness: f64,
    pub mouth_gray: f64,
}

impl Identity {
    /// Draws every parameter uniformly from its documented range.
    pub fn from_seed(seed: u64) -> Identity {
        let mut rng = seeded(derive_seed(seed, "identity-params", 0));
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let skin = u(0.5, 0.85);
        Identity {
            seed,
            head_rx: u(14.0, 19.0),
            head_ry: u(19.0, 25.0),
            head_dy: u(0.0, 4.0),
            skin,
            background: u(0.05, 0.4),
            background_slope: u(-0.15, 0.15),
            hair: u(0.02, 0.4),
            hair_depth: u(3.0, 11.0),
            hair_width: u(0.9, 1.15),
            eye_half_spacing: u(5.5, 9.0),
            eye_dy: u(-9.0, -3.0),
            eye_radius: u(1.5, 2.8),
            eye_gray: u(0.0, 0.25),
            brow_lift: u(3.0, 5.0),
            brow_half_len: u(2.0, 4.0),
            brow_thickness: u(0.8, 2.0),
            brow_tilt: u(-0.3, 0.3),
            nose_len: u(5.0, 10.0),
            nose_width: u(1.0, 2.5),
            mouth_dy: u(9.0, 15.0),
            mouth_half_width: u(3.5, 8.0),
            mouth_curve: u(-2.5, 2.5),
            mouth_thickness: u(1.0, 2.5),
            mouth_gray: (skin - u(0.2, 0.4)).max(0.05),
        }
    }

    /// Unjittered eye centres for an `height × width` render.
    pub fn canonical_eyes(&self, height: usize, width: usize) -> Landmarks {
        let (cx, cy) = centre(height, width);
        let k = unit(width);
        Landmarks::new(
            (cx - k * self.eye_half_spacing, cy + k * self.eye_dy),
            (cx + k * self.eye_half_spacing, cy + k * self.eye_dy),
        )
    }
}

/// Per-render geometric and photometric perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub tx: f64,
    pub ty: f64,
    /// Radians, positive turns +x towards +y (clockwise on screen).
    pub angle: f64,
    pub scale: f64,
    pub noise: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        tx: 0.0,
        ty: 0.0,
        angle: 0.0,
        scale: 1.0,
        noise: 0.0,
    };

    /// Forward map of a canonical point into the rendered image.
    pub fn map(&self, (x, y): (f64, f64), height: usize, width: usize) -> (f64, f64) {
        let (cx, cy) = centre(height, width);
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + self.scale * (c * dx - s * dy) + self.tx,
            cy + self.scale * (s * dx + c * dy) + self.ty,
        )
    }

    /// Inverse of [`Jitter::map`].
    pub fn unmap(&self, (x, y): (f64, f64), height: usize, width: usize) -> (f64, f64) {
        let (cx, cy) = centre(height, width);
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = ((x - cx - self.tx) / self.scale, (y - cy - self.ty) / self.scale);
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }
}

/// Bounds of a uniformly drawn [`Jitter`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterRange {
    pub translate: f64,
    pub rotate_deg: f64,
    pub scale: f64,
    pub noise: f64,
}

impl JitterRange {
    /// Jitter of the ID photos and training triplets.
    pub const NORMAL: JitterRange = JitterRange {
        translate: 3.0,
        rotate_deg: 8.0,
        scale: 0.08,
        noise: 0.01,
    };
    /// Harder variation of the daily photos.
    pub const DAILY: JitterRange = JitterRange {
        translate: 5.0,
        rotate_deg: 15.0,
        scale: 0.15,
        noise: 0.03,
    };

    pub fn sample(&self, rng: &mut Rng) -> Jitter {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        Jitter {
            tx: sym(self.translate),
            ty: sym(self.translate),
            angle: sym(self.rotate_deg) * PI / 180.0,
            scale: 1.0 + sym(self.scale),
            noise: self.noise,
        }
    }
}

/// A rendered face with its eye centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub image: Tensor,
    pub eyes: Landmarks,
    pub jitter: Jitter,
}

fn centre(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn unit(width: usize) -> f64 {
    width as f64 / DEFAULT_WIDTH as f64
}

/// Area coverage of a shape from its signed distance (negative inside).
fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn over(base: f64, gray: f64, alpha: f64) -> f64 {
    base + alpha * (gray - base)
}

fn ellipse_sd((x, y): (f64, f64), (cx, cy): (f64, f64), rx: f64, ry: f64) -> f64 {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    ((u * u + v * v).sqrt() - 1.0) * rx.min(ry)
}

fn segment_sd(p: (f64, f64), a: (f64, f64), b: (f64, f64), half: f64) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby) - half
}

/// Gray level of the canonical (unjittered) scene at `p`.
fn shade(id: &Identity, p: (f64, f64), height: usize, width: usize) -> f64 {
    let (cx, cy) = centre(height, width);
    let k = unit(width);
    let rel_y = (p.1 - cy) / (height as f64 / 2.0);
    let mut g = id.background + id.background_slope * rel_y;

    let head_c = (cx, cy + k * id.head_dy);
    let (rx, ry) = (k * id.head_rx, k * id.head_ry);
    // hair mass behind the head, visible above the hairline
    let hair_c = (head_c.0, head_c.1 - k * 1.5);
    let hair = coverage(ellipse_sd(p, hair_c, rx * id.hair_width + k, ry + k));
    let hairline = head_c.1 - ry + k * id.hair_depth;
    let above = coverage(p.1 - hairline);
    g = over(g, id.hair, hair * above);
    let face = coverage(ellipse_sd(p, head_c, rx, ry)) * (1.0 - above);
    g = over(g, id.skin, face);

    let eyes = id.canonical_eyes(height, width);
    for (side, e) in [(-1.0, eyes.left), (1.0, eyes.right)] {
        let by = e.1 - k * id.brow_lift;
        let half = k * id.brow_half_len;
        let tilt = side * id.brow_tilt * half;
        let a = (e.0 - half, by + tilt);
        let b = (e.0 + half, by - tilt);
        g = over(g, id.hair, coverage(segment_sd(p, a, b, k * id.brow_thickness / 2.0)));
        g = over(g, id.eye_gray, coverage((p.0 - e.0).hypot(p.1 - e.1) - k * id.eye_radius));
    }

    let nose_top = (cx, eyes.left.1 + k * 2.5);
    let nose_tip = (cx, nose_top.1 + k * id.nose_len);
    let nose_gray = (id.skin - 0.18).max(0.0);
    g = over(g, nose_gray, coverage(segment_sd(p, nose_top, nose_tip, k * id.nose_width / 2.0)));

    let my = cy + k * id.mouth_dy;
    let mw = k * id.mouth_half_width;
    let mut mouth_sd = f64::INFINITY;
    let mut prev = None;
    for i in 0..=8 {
        let t = i as f64 / 8.0 * 2.0 - 1.0;
        let q = (cx + t * mw, my + k * id.mouth_curve * (1.0 - t * t));
        if let Some(a) = prev {
            mouth_sd = mouth_sd.min(segment_sd(p, a, q, k * id.mouth_thickness / 2.0));
        }
        prev = Some(q);
    }
    over(g, id.mouth_gray, coverage(mouth_sd))
}

/// Rounds into 8-bit levels so images survive a graymap round trip exactly.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders `identity` under an explicit jitter; `noise_seed` drives the
/// additive Gaussian noise.
pub fn render_with(identity: &Identity, jitter: &Jitter, noise_seed: u64, height: usize, width: usize) -> Result<Render> {
    if height < 16 || width < 16 {
        return Err(DemeshError::invalid("render_face", format!("extent {height}x{width} below 16")));
    }
    if !(jitter.scale > 0.0) {
        return Err(DemeshError::invalid("render_face", "jitter scale must be positive"));
    }
    let mut rng = seeded(noise_seed);
    let noise = (jitter.noise > 0.0).then(|| Normal::new(0.0, jitter.noise).expect("positive sigma"));
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let q = jitter.unmap((c as f64, r as f64), height, width);
            let mut v = shade(identity, q, height, width);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            data.push(quantize(v));
        }
    }
    let canon = identity.canonical_eyes(height, width);
    let eyes = Landmarks::new(
        jitter.map(canon.left, height, width),
        jitter.map(canon.right, height, width),
    );
    Ok(Render {
        image: Tensor::new(vec![1, height, width], data)?,
        eyes,
        jitter: *jitter,
    })
}

/// Renders with a jitter drawn from `range`, redrawing until both eyes
/// keep [`EYE_MARGIN`] from the border.
pub fn render_face(identity: &Identity, jitter_seed: u64, range: &JitterRange, height: usize, width: usize) -> Result<Render> {
    let mut rng = seeded(jitter_seed);
    let canon = identity.canonical_eyes(height, width);
    for _ in 0..MAX_JITTER_RETRIES {
        let j = range.sample(&mut rng);
        let eyes = Landmarks::new(j.map(canon.left, height, width), j.map(canon.right, height, width));
        if eyes.inside(height, width, EYE_MARGIN) {
            return render_with(identity, &j, derive_seed(jitter_seed, "noise", 0), height, width);
        }
    }
    Err(DemeshError::invalid(
        "render_face",
        format!("no jitter kept the eyes inside the frame after {MAX_JITTER_RETRIES} draws"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jitter_puts_eyes_at_canonical_positions() {
        let id = Identity::from_seed(4);
        let r = render_with(&id, &Jitter::NONE, 0, 64, 48).unwrap();
        assert_eq!(r.eyes, id.canonical_eyes(64, 48));
        assert!(r.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn canonical_eyes_respect_margin_over_many_identities() {
        for s in 0..500 {
            assert!(Identity::from_seed(s).canonical_eyes(64, 48).inside(64, 48, EYE_MARGIN + 5.0));
        }
    }

    #[test]
    fn renders_are_deterministic() {
        let id = Identity::from_seed(9);
        let a = render_face(&id, 13, &JitterRange::NORMAL, 64, 48).unwrap();
        let b = render_face(&id, 13, &JitterRange::NORMAL, 64, 48).unwrap();
        assert_eq!(a, b);
        let c = render_face(&id, 14, &JitterRange::NORMAL, 64, 48).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn rotation_only_jitter_rotates_landmarks_about_centre() {
        let id = Identity::from_seed(2);
        let alpha = 0.2;
        let j = Jitter { angle: alpha, ..Jitter::NONE };
        let r = render_with(&id, &j, 0, 64, 48).unwrap();
        let canon = id.canonical_eyes(64, 48);
        let (cx, cy) = (23.5, 31.5);
        for (got, c) in [(r.eyes.left, canon.left), (r.eyes.right, canon.right)] {
            let (dx, dy) = (c.0 - cx, c.1 - cy);
            let want = (cx + alpha.cos() * dx - alpha.sin() * dy, cy + alpha.sin() * dx + alpha.cos() * dy);
            assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9);
        }
    }

    #[test]
    fn rendered_eye_is_dark_at_its_landmark() {
        let id = Identity::from_seed(21);
        let r = render_face(&id, 5, &JitterRange::NORMAL, 64, 48).unwrap();
        let px = |(x, y): (f64, f64)| r.image.data()[y.round() as usize * 48 + x.round() as usize];
        assert!(px(r.eyes.left) < id.skin - 0.15);
        assert!(px(r.eyes.right) < id.skin - 0.15);
    }

    #[test]
    fn jitter_map_inverts() {
        let j = Jitter { tx: 1.5, ty: -2.0, angle: 0.3, scale: 1.1, noise: 0.0 };
        let p = (10.0, 40.0);
        let q = j.unmap(j.map(p, 64, 48), 64, 48);
        assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
    }

    #[test]
    fn impossible_jitter_errors() {
        let wild = JitterRange { translate: 400.0, rotate_deg: 0.0, scale: 0.0, noise: 0.0 };
        assert!(render_face(&Identity::from_seed(1), 3, &wild, 64, 48).is_err());
    }

    #[test]
    fn quantized_pixels_are_byte_levels() {
        let r = render_face(&Identity::from_seed(8), 1, &JitterRange::DAILY, 64, 48).unwrap();
        for &v in r.image.data() {
            assert_eq!(quantize(v), v);
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}
