#![allow(dead_code)]

use gradient_remedy::net::{Network, Section};
use gradient_remedy::GradientVector;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn gv(values: Vec<f64>) -> GradientVector {
    GradientVector::from_slice(&values).unwrap()
}

/// A random pair with a strictly negative inner product and norms spread
/// over several orders of magnitude.
pub fn conflicting_pair(rng: &mut impl Rng, dim: usize) -> (GradientVector, GradientVector) {
    loop {
        let mut a = gaussian(rng, dim);
        let d = gaussian(rng, dim);
        let inner: f64 = a.iter().zip(&d).map(|(x, y)| x * y).sum();
        if inner == 0.0 {
            continue;
        }
        let flip = if inner > 0.0 { -1.0 } else { 1.0 };
        let (sa, sd) = (log_uniform(rng, 1e-3, 1e3), log_uniform(rng, 1e-3, 1e3));
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nd = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut a {
            *x *= flip * sa / na;
        }
        let d = d.into_iter().map(|x| x * sd / nd).collect();
        return (gv(a), gv(d));
    }
}

pub fn dot(a: &GradientVector, b: &GradientVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// Component of `a` orthogonal to `d`.
pub fn rejection(a: &GradientVector, d: &GradientVector) -> GradientVector {
    let c = dot(a, d) / dot(d, d);
    a.add_scaled(-c, d).unwrap()
}

pub fn distance(a: &GradientVector, b: &GradientVector) -> f64 {
    a.add_scaled(-1.0, b).unwrap().norm()
}

/// Scaled task losses `((1 − λ)·L_aux, λ·L_dom)`.
pub fn task_losses(net: &Network, x: ArrayView2<f64>, clean: ArrayView2<f64>, labels: &[usize], lambda: f64) -> (f64, f64) {
    let pass = net.forward(x).unwrap();
    let l = net.losses(&pass, clean, labels, lambda).unwrap();
    ((1.0 - lambda) * l.loss_aux, lambda * l.loss_dom)
}

/// Visits every parameter as `(section, layer, is_bias, row, col)`.
pub fn parameters(net: &Network) -> Vec<(Section, usize, bool, usize, usize)> {
    let mut out = Vec::new();
    for section in [Section::Trunk, Section::AuxHead, Section::DomHead] {
        for (i, layer) in net.section(section).iter().enumerate() {
            let (rows, cols) = layer.weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    out.push((section, i, false, r, c));
                }
                out.push((section, i, true, r, 0));
            }
        }
    }
    out
}

pub fn nudge(net: &mut Network, p: (Section, usize, bool, usize, usize), delta: f64) {
    let (section, i, bias, r, c) = p;
    let layer = &mut net.section_mut(section)[i];
    if bias {
        layer.bias[r] += delta;
    } else {
        layer.weights[[r, c]] += delta;
    }
}

pub fn entry(w: &Array2<f64>, b: &ndarray::Array1<f64>, bias: bool, r: usize, c: usize) -> f64 {
    if bias {
        b[r]
    } else {
        w[[r, c]]
    }
}
