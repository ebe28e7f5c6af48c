//! Finite-difference self-check suites over every differentiable piece of
//! the pipeline, shared by the `gradcheck` command and the test suites.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{DemeshError, Result};
use crate::featnet::{FeatureNet, PhiSpec};
use crate::fcn::{ArchSpec, InpaintNet};
use crate::gradcheck::grad_check_at;
use crate::losses::{dynamic_c, feature_loss_with, pixel_loss, reverse_huber, unified_loss_with, LossConfig, Variant};
use crate::ops::{
    conv2d, conv2d_backward, conv2d_forward, fully_connected, fully_connected_backward, maxpool2_backward, maxpool2_indices,
    mfm, mfm_backward, sigmoid, sigmoid_backward, unpool_backward, unpool_indices,
};
use crate::rng::{derive_seed, normal_tensor, seeded, Rng};
use crate::stn::{align_face, bilinear_backward, bilinear_sample, Landmarks, SampleGrid};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
/// Seeded random points per check.
pub const POINTS: usize = 20;
/// Coordinates probed per point when the input is large.
const COORDS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Layers,
    Stn,
    Losses,
}

impl FromStr for Suite {
    type Err = DemeshError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "layers" => Ok(Suite::Layers),
            "stn" => Ok(Suite::Stn),
            "losses" => Ok(Suite::Losses),
            _ => Err(DemeshError::invalid("gradcheck", format!("unknown module `{s}` (all|stn|losses|layers)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{}\tpoints={}\tmax_rel_err={:.3e}\t{verdict}", self.name, self.points, self.max_rel_error)
    }
}

type Scalar = Box<dyn Fn(&Tensor) -> Result<(f64, Tensor)>>;

/// One seeded point: an input, a differentiable scalar function of it, and
/// the coordinates to probe.
struct Point {
    input: Tensor,
    f: Scalar,
}

struct Check {
    name: &'static str,
    suite: Suite,
    make: fn(&mut Rng) -> Result<Point>,
}

fn probe(rng: &mut Rng, shape: &[usize]) -> Tensor {
    normal_tensor(rng, shape, 1.0)
}

fn coords(rng: &mut Rng, len: usize) -> Vec<usize> {
    if len <= COORDS {
        (0..len).collect()
    } else {
        let mut c = sample(rng, len, COORDS).into_vec();
        c.sort_unstable();
        c
    }
}

/// `⟨v, op(x)⟩` with its gradient `op_backward(v)`.
fn projected(op: impl Fn(&Tensor) -> Result<Tensor> + 'static, back: impl Fn(&Tensor, &Tensor) -> Result<Tensor> + 'static, v: Tensor) -> Scalar {
    Box::new(move |x| {
        let y = op(x)?;
        Ok((y.dot(&v)?, back(x, &v)?))
    })
}

fn conv_input(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[3, 6, 5]);
    let w = normal_tensor(rng, &[4, 3, 3, 3], 0.5);
    let b = normal_tensor(rng, &[4], 0.5);
    let v = probe(rng, &[4, 6, 5]);
    let (w2, b2) = (w.clone(), b.clone());
    let f = projected(
        move |x| conv2d(x, &w, &b, 1, 1),
        move |x, v| {
            let (_, cache) = conv2d_forward(x, &w2, &b2, 1, 1)?;
            Ok(conv2d_backward(cache, &w2, v, true)?.input.expect("input grad"))
        },
        v,
    );
    Ok(Point { input: x, f })
}

fn conv_weight(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[2, 5, 6]);
    let w = normal_tensor(rng, &[3, 2, 3, 3], 0.5);
    let b = normal_tensor(rng, &[3], 0.5);
    let v = probe(rng, &[3, 3, 4]);
    let f: Scalar = Box::new(move |w| {
        let (y, cache) = conv2d_forward(&x, w, &b, 1, 0)?;
        Ok((y.dot(&v)?, conv2d_backward(cache, w, &v, false)?.weight))
    });
    Ok(Point { input: w, f })
}

fn conv_bias(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[2, 4, 4]);
    let w = normal_tensor(rng, &[3, 2, 3, 3], 0.5);
    let b = normal_tensor(rng, &[3], 0.5);
    let v = probe(rng, &[3, 4, 4]);
    let f: Scalar = Box::new(move |b| {
        let (y, cache) = conv2d_forward(&x, &w, b, 1, 1)?;
        Ok((y.dot(&v)?, conv2d_backward(cache, &w, &v, false)?.bias))
    });
    Ok(Point { input: b, f })
}

fn maxpool(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[2, 6, 4]);
    let v = probe(rng, &[2, 3, 2]);
    let f = projected(
        |x| maxpool2_indices(x).map(|(y, _)| y),
        |x, v| maxpool2_backward(v, &maxpool2_indices(x)?.1),
        v,
    );
    Ok(Point { input: x, f })
}

fn unpool(rng: &mut Rng) -> Result<Point> {
    let src = probe(rng, &[2, 6, 4]);
    let (_, idx) = maxpool2_indices(&src)?;
    let x = probe(rng, &[2, 3, 2]);
    let v = probe(rng, &[2, 6, 4]);
    let idx2 = idx.clone();
    let f = projected(
        move |x| unpool_indices(x, &idx, idx.input_shape()),
        move |_, v| unpool_backward(v, &idx2),
        v,
    );
    Ok(Point { input: x, f })
}

fn mfm_check(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[6, 3, 3]);
    let v = probe(rng, &[3, 3, 3]);
    Ok(Point {
        input: x,
        f: projected(mfm, mfm_backward, v),
    })
}

fn fc_input(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[2, 3, 3]);
    let w = normal_tensor(rng, &[5, 18], 0.5);
    let b = normal_tensor(rng, &[5], 0.5);
    let v = probe(rng, &[5]);
    let w2 = w.clone();
    let f = projected(
        move |x| fully_connected(x, &w, &b),
        move |x, v| fully_connected_backward(x, &w2, v).map(|g| g.input),
        v,
    );
    Ok(Point { input: x, f })
}

fn fc_weight(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[7]);
    let w = normal_tensor(rng, &[4, 7], 0.5);
    let b = normal_tensor(rng, &[4], 0.5);
    let v = probe(rng, &[4]);
    let f: Scalar = Box::new(move |w| {
        let y = fully_connected(&x, w, &b)?;
        Ok((y.dot(&v)?, fully_connected_backward(&x, w, &v)?.weight))
    });
    Ok(Point { input: w, f })
}

fn sigmoid_check(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[1, 4, 4]);
    let v = probe(rng, &[1, 4, 4]);
    let f = projected(|x| Ok(sigmoid(x)), |x, v| sigmoid_backward(&sigmoid(x), v), v);
    Ok(Point { input: x, f })
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        height: 8,
        width: 12,
        widths: vec![3, 4],
        ..ArchSpec::default()
    }
}

/// Pixel loss through ψ, differentiated w.r.t. one layer's weights.
fn psi_params(rng: &mut Rng) -> Result<Point> {
    let arch = tiny_arch();
    let net = InpaintNet::build(arch.clone(), rng.random())?;
    let layer = rng.random_range(0..2 * arch.widths.len());
    let x = normal_tensor(rng, &[1, 8, 12], 0.3).map(|v| v + 0.5);
    let y = normal_tensor(rng, &[1, 8, 12], 0.3).map(|v| v + 0.5);
    let m = Tensor::new(vec![1, 8, 12], (0..96).map(|_| f64::from(rng.random_bool(0.3))).collect())?;
    let n = arch.widths.len();
    let get = move |net: &InpaintNet| -> Tensor {
        if layer < n {
            net.encoders()[layer].weight().clone()
        } else {
            net.decoders()[layer - n].weight().clone()
        }
    };
    let w0 = get(&net);
    let f: Scalar = Box::new(move |w| {
        let mut net = net.clone();
        let p = if layer < n { &mut net.encoders_mut()[layer] } else { &mut net.decoders_mut()[layer - n] };
        p.weight.set_value(w.clone())?;
        let cache = net.forward_cached(&x)?;
        let l = pixel_loss(cache.output(), &y, &m, 2.0)?;
        let g = net.backward(cache, &l.grad)?;
        let gw = if layer < n { g.encoders[layer].weight.clone() } else { g.decoders[layer - n].weight.clone() };
        Ok((l.value, gw))
    });
    Ok(Point { input: w0, f })
}

fn random_grid(rng: &mut Rng, h: usize, w: usize, oh: usize, ow: usize) -> Result<SampleGrid> {
    // keep samples off integer coordinates, where bilinear weights kink
    let pts = (0..oh * ow)
        .map(|_| {
            let off = |r: &mut Rng| r.random_range(0.05..0.95);
            let x = rng.random_range(-1..w as i64) as f64 + off(rng);
            let y = rng.random_range(-1..h as i64) as f64 + off(rng);
            (x, y)
        })
        .collect();
    SampleGrid::from_points(oh, ow, pts)
}

fn bilinear(rng: &mut Rng) -> Result<Point> {
    let x = probe(rng, &[2, 7, 6]);
    let grid = random_grid(rng, 7, 6, 4, 5)?;
    let v = probe(rng, &[2, 4, 5]);
    let g2 = grid.clone();
    let f = projected(
        move |x| bilinear_sample(x, &grid),
        move |x, v| bilinear_backward(v, &g2, x.shape()),
        v,
    );
    Ok(Point { input: x, f })
}

fn align(rng: &mut Rng) -> Result<Point> {
    let img = probe(rng, &[1, 20, 16]);
    let eyes = Landmarks::new(
        (rng.random_range(4.0..6.5), rng.random_range(6.0..9.0)),
        (rng.random_range(9.5..12.0), rng.random_range(6.0..9.0)),
    );
    let v = probe(rng, &[1, 10, 10]);
    let f: Scalar = Box::new(move |x| {
        let (crop, grid) = align_face(x, &eyes, 10, 10)?;
        Ok((crop.dot(&v)?, bilinear_backward(&v, &grid, x.shape())?))
    });
    Ok(Point { input: img, f })
}

fn pixel(rng: &mut Rng) -> Result<Point> {
    let p = probe(rng, &[2, 1, 4, 5]);
    let y = probe(rng, &[2, 1, 4, 5]);
    let m = Tensor::new(vec![2, 1, 4, 5], (0..40).map(|_| f64::from(rng.random_bool(0.3))).collect())?;
    let lambda = rng.random_range(0.0..3.0);
    let f: Scalar = Box::new(move |x| pixel_loss(x, &y, &m, lambda).map(|l| (l.value, l.grad)));
    Ok(Point { input: p, f })
}

fn berhu_check(rng: &mut Rng) -> Result<Point> {
    let r0 = probe(rng, &[30]);
    let c = dynamic_c(&r0, 0.2 + rng.random_range(0.0..0.6));
    // coordinates within a step of the branch point are not differentiable
    let r = r0.map(|v| if (v.abs() - c).abs() < 0.05 { v + 0.1 * v.signum() } else { v });
    let f: Scalar = Box::new(move |x| reverse_huber(x, c).map(|l| (l.value, l.grad)));
    Ok(Point { input: r, f })
}

fn phi_for_checks(seed: u64) -> Result<FeatureNet> {
    FeatureNet::fixed_random(
        PhiSpec {
            crop: 12,
            widths: vec![4, 6],
            fc: 8,
            kernel: 3,
        },
        seed,
    )
}

type Scene = (Tensor, Tensor, Tensor, Vec<Landmarks>);

fn scene(rng: &mut Rng, b: usize) -> Result<Scene> {
    let (h, w) = (16, 14);
    let y = normal_tensor(rng, &[b, 1, h, w], 0.25).map(|v| v + 0.5);
    let p = y.zip_map(&normal_tensor(rng, &[b, 1, h, w], 0.1), "scene", |a, n| a + n)?;
    let m = Tensor::new(vec![b, 1, h, w], (0..b * h * w).map(|_| f64::from(rng.random_bool(0.2))).collect())?;
    let eyes = (0..b)
        .map(|_| {
            Landmarks::new(
                (rng.random_range(3.5..5.5), rng.random_range(5.0..7.0)),
                (rng.random_range(8.5..10.5), rng.random_range(5.0..7.0)),
            )
        })
        .collect();
    Ok((p, y, m, eyes))
}

fn feature(rng: &mut Rng) -> Result<Point> {
    let phi = phi_for_checks(rng.random())?;
    let (p, y, _, eyes) = scene(rng, 2)?;
    let variant = [Variant::Fcnf, Variant::DeMeshNetE, Variant::DeMeshNet][rng.random_range(0..3)];
    let cfg = LossConfig::for_variant(variant);
    let cs = feature_loss_with(&p, &y, &eyes, &phi, &cfg, None)?.thresholds;
    let f: Scalar = Box::new(move |x| feature_loss_with(x, &y, &eyes, &phi, &cfg, Some(&cs)).map(|l| (l.loss.value, l.loss.grad)));
    Ok(Point { input: p, f })
}

fn unified(rng: &mut Rng) -> Result<Point> {
    let phi = phi_for_checks(rng.random())?;
    let (p, y, m, eyes) = scene(rng, 2)?;
    let cfg = LossConfig {
        mask_weight: rng.random_range(0.0..2.0),
        feature_weight: rng.random_range(0.1..2.0),
        ..LossConfig::default()
    };
    let cs = unified_loss_with(&p, &y, &m, &eyes, Some(&phi), &cfg, None)?.thresholds;
    let f: Scalar = Box::new(move |x| unified_loss_with(x, &y, &m, &eyes, Some(&phi), &cfg, Some(&cs)).map(|l| (l.total, l.grad)));
    Ok(Point { input: p, f })
}

const CHECKS: &[Check] = &[
    Check { name: "conv2d.input", suite: Suite::Layers, make: conv_input },
    Check { name: "conv2d.weight", suite: Suite::Layers, make: conv_weight },
    Check { name: "conv2d.bias", suite: Suite::Layers, make: conv_bias },
    Check { name: "maxpool2", suite: Suite::Layers, make: maxpool },
    Check { name: "unpool", suite: Suite::Layers, make: unpool },
    Check { name: "mfm", suite: Suite::Layers, make: mfm_check },
    Check { name: "fc.input", suite: Suite::Layers, make: fc_input },
    Check { name: "fc.weight", suite: Suite::Layers, make: fc_weight },
    Check { name: "sigmoid", suite: Suite::Layers, make: sigmoid_check },
    Check { name: "psi.weights", suite: Suite::Layers, make: psi_params },
    Check { name: "bilinear_sampler", suite: Suite::Stn, make: bilinear },
    Check { name: "align_face", suite: Suite::Stn, make: align },
    Check { name: "pixel_loss", suite: Suite::Losses, make: pixel },
    Check { name: "reverse_huber", suite: Suite::Losses, make: berhu_check },
    Check { name: "feature_loss", suite: Suite::Losses, make: feature },
    Check { name: "unified_loss", suite: Suite::Losses, make: unified },
];

/// Names of the checks a suite runs.
pub fn check_names(suite: Suite) -> Vec<&'static str> {
    CHECKS.iter().filter(|c| suite == Suite::All || c.suite == suite).map(|c| c.name).collect()
}

/// Runs a suite. `sabotage` negates the analytic gradient of the first
/// check, which must then fail.
pub fn run_suite(suite: Suite, seed: u64, sabotage: bool) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, check) in CHECKS.iter().enumerate() {
        if suite != Suite::All && check.suite != suite {
            continue;
        }
        let flip = sabotage && out.is_empty();
        let mut worst = 0.0f64;
        for i in 0..POINTS {
            let mut rng = seeded(derive_seed(seed, check.name, (k * POINTS + i) as u64));
            let Point { input, f } = (check.make)(&mut rng)?;
            let at = coords(&mut rng, input.len());
            let g = |x: &Tensor| {
                let (v, g) = f(x)?;
                Ok((v, if flip { g.scale(-1.0) } else { g }))
            };
            let rep = grad_check_at(g, &input, TOLERANCE, &at)?;
            worst = worst.max(rep.max_rel_error);
        }
        out.push(CheckResult {
            name: check.name,
            points: POINTS,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_parse() {
        assert_eq!("stn".parse::<Suite>().unwrap(), Suite::Stn);
        assert!("optim".parse::<Suite>().is_err());
        assert_eq!(check_names(Suite::Stn), vec!["bilinear_sampler", "align_face"]);
        assert_eq!(check_names(Suite::All).len(), CHECKS.len());
    }

    #[test]
    fn every_check_passes() {
        for r in run_suite(Suite::All, 7, false).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn sabotage_fails_first_check() {
        let r = run_suite(Suite::Stn, 0, true).unwrap();
        assert!(!r[0].passed());
        assert!(r[1].passed(), "{}", r[1]);
    }
}
