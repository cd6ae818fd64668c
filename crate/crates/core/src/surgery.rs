//! Two-task gradient combination strategies.
//!
//! Every strategy takes one layer's pair of task gradients: the auxiliary
//! gradient (already weighted by `1 − λ`) and the dominant gradient (already
//! weighted by `λ`). It returns the pair that should actually be summed into
//! the layer update. The strategies are:
//!
//! * `NaiveSum`: plain sum, no modification.
//! * `PCGrad`: a conflicting auxiliary gradient is projected onto the normal
//!   plane of the dominant gradient.
//! * `FixedTheta`: a conflicting auxiliary gradient is moved onto the cone at a
//!   fixed acute angle θ around the dominant gradient.
//! * `GradientRemedy`: the same projection with θ = atan(‖aux‖/‖dom‖), followed
//!   by a magnitude rescale whenever the projected auxiliary gradient is more
//!   than `K` times larger than the dominant one.
//!
//! Interference flags are computed for every strategy so that baselines report
//! the same statistics as the remedy.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradvec::{angle_between, unit_angle, GradError, GradientVector, TOL_NORM};

/// Relative tolerance on the cosine used when checking whether *remedied*
/// gradients still conflict. PCGrad output is orthogonal to the dominant
/// gradient only up to rounding.
pub const TOL_CONFLICT_POST: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurgeryError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("dominant gradient norm {0:e} is below tolerance; projection angle undefined")]
    DegenerateDominant(f64),
    #[error("task gradient shapes differ: {aux:?} vs {dom:?}")]
    ShapeMismatch { aux: Vec<usize>, dom: Vec<usize> },
    #[error("invalid remedy config: {0}")]
    Config(String),
}

/// Rule choosing the rescale ratio `r` once the auxiliary gradient is found
/// wrongly dominant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum RatioRule {
    /// `r = cos θ′`, θ′ being the post-projection angle.
    CosThetaPrime,
    /// `r = 1/√K`.
    InvSqrtK,
    /// A fixed `r = c`, `0 < c < 1`.
    Constant(f64),
}

impl fmt::Display for RatioRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioRule::CosThetaPrime => write!(f, "cos-theta-prime"),
            RatioRule::InvSqrtK => write!(f, "inv-sqrt-k"),
            RatioRule::Constant(c) => write!(f, "const:{c}"),
        }
    }
}

impl FromStr for RatioRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cos-theta-prime" | "cos" => Ok(RatioRule::CosThetaPrime),
            "inv-sqrt-k" => Ok(RatioRule::InvSqrtK),
            _ => {
                let value = s
                    .strip_prefix("const:")
                    .ok_or_else(|| format!("unknown ratio rule `{s}`"))?;
                let c = parse_fraction(value)?;
                Ok(RatioRule::Constant(c))
            }
        }
    }
}

// Accepts "0.5" as well as "1/3".
fn parse_fraction(s: &str) -> Result<f64, String> {
    let bad = || format!("bad ratio constant `{s}`");
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            Ok(n / d)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Strategy {
    NaiveSum,
    #[serde(rename = "pcgrad")]
    PCGrad,
    /// Projection onto a cone with a fixed angle, in radians.
    FixedTheta { theta: f64 },
    GradientRemedy,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::NaiveSum => "naive".into(),
            Strategy::PCGrad => "pcgrad".into(),
            Strategy::FixedTheta { theta } => {
                format!("fixed-theta:{}deg", round_degrees(theta.to_degrees()))
            }
            Strategy::GradientRemedy => "gradient-remedy".into(),
        }
    }
}

fn round_degrees(d: f64) -> f64 {
    (d * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemedyConfig {
    pub strategy: Strategy,
    /// Dominance threshold `K > 1`.
    pub k: f64,
    pub ratio_rule: RatioRule,
    /// Only consulted by `GradientRemedy`.
    pub rescale_enabled: bool,
    /// Floor applied to the rescale ratio.
    pub r_min: f64,
    pub tol_norm: f64,
}

impl Default for RemedyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GradientRemedy,
            k: 5.0,
            ratio_rule: RatioRule::CosThetaPrime,
            rescale_enabled: true,
            r_min: 1e-3,
            tol_norm: TOL_NORM,
        }
    }
}

impl RemedyConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SurgeryError> {
        let err = |m: String| Err(SurgeryError::Config(m));
        if !(self.k > 1.0) || !self.k.is_finite() {
            return err("K must exceed 1".into());
        }
        if let Strategy::FixedTheta { theta } = self.strategy {
            if !(theta > 0.0 && theta <= FRAC_PI_2 + 1e-15) {
                return err(format!(
                    "fixed theta must lie in (0°, 90°], got {}°",
                    theta.to_degrees()
                ));
            }
        }
        if !(self.r_min > 0.0 && self.r_min < 1.0) {
            return err(format!("r_min must lie in (0, 1), got {}", self.r_min));
        }
        if let RatioRule::Constant(c) = self.ratio_rule {
            if !(c > 0.0 && c < 1.0) {
                return err(format!("constant ratio must lie in (0, 1), got {c}"));
            }
        }
        if !(self.tol_norm >= 0.0) {
            return err("tol_norm must be non-negative".into());
        }
        Ok(())
    }

    /// Label used for output directories and summary rows.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::GradientRemedy if !self.rescale_enabled => "projection-only".into(),
            Strategy::GradientRemedy if self.ratio_rule != RatioRule::CosThetaPrime => {
                format!("gradient-remedy[{}]", self.ratio_rule)
            }
            s => s.label(),
        }
    }
}

/// One layer's pair of task gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub layer_id: String,
    /// Auxiliary task gradient, pre-scaled by `1 − λ`.
    pub g_aux: GradientVector,
    /// Dominant task gradient, pre-scaled by `λ`.
    pub g_dom: GradientVector,
}

impl TaskGradients {
    pub fn new(
        layer_id: impl Into<String>,
        g_aux: GradientVector,
        g_dom: GradientVector,
    ) -> Result<Self, SurgeryError> {
        if g_aux.shape() != g_dom.shape() {
            return Err(SurgeryError::ShapeMismatch {
                aux: g_aux.shape().to_vec(),
                dom: g_dom.shape().to_vec(),
            });
        }
        Ok(Self {
            layer_id: layer_id.into(),
            g_aux,
            g_dom,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemedyOutcome {
    pub g_aux_out: GradientVector,
    pub g_dom_out: GradientVector,
    /// `g_aux_out + g_dom_out`.
    pub g_total: GradientVector,
    /// Angle between the input gradients, absent when degenerate.
    pub phi: Option<f64>,
    /// Inputs had a negative inner product.
    pub was_conflicting: bool,
    /// The (projected, where applicable) auxiliary gradient exceeded `K`
    /// times the dominant norm before any rescale.
    pub was_wrongly_dominant: bool,
    /// Angle between the projected auxiliary gradient and the dominant one.
    pub theta_prime: Option<f64>,
    /// Ratio applied by the rescale step, if it ran.
    pub ratio: Option<f64>,
    /// The ratio hit the `r_min` floor.
    pub ratio_clamped: bool,
    /// Outputs still conflict (beyond [`TOL_CONFLICT_POST`]).
    pub conflicting_post: bool,
    /// Outputs still satisfy the wrongly-dominant predicate.
    pub wrongly_dominant_post: bool,
    pub norm_aux_in: f64,
    pub norm_dom_in: f64,
    pub norm_aux_out: f64,
    pub norm_dom_out: f64,
}

/// Anything that can turn a task-gradient pair into an update pair. The
/// built-in strategies are driven by [`RemedyConfig`]; other combination
/// rules can be plugged into the trainer through this trait.
pub trait GradientCombiner: Send + Sync {
    fn combine(&self, grads: &TaskGradients) -> Result<RemedyOutcome, SurgeryError>;

    fn label(&self) -> String;

    /// Dominance threshold used for the interference statistics.
    fn dominance_threshold(&self) -> f64;
}

impl GradientCombiner for RemedyConfig {
    fn combine(&self, grads: &TaskGradients) -> Result<RemedyOutcome, SurgeryError> {
        remedy_layer(grads, self)
    }

    fn label(&self) -> String {
        RemedyConfig::label(self)
    }

    fn dominance_threshold(&self) -> f64 {
        self.k
    }
}

/// θ = atan(‖g_aux‖ / ‖g_dom‖).
pub fn dynamic_theta(g_aux: &GradientVector, g_dom: &GradientVector) -> Result<f64, SurgeryError> {
    let nd = g_dom.norm();
    if nd < TOL_NORM {
        return Err(SurgeryError::DegenerateDominant(nd));
    }
    Ok(g_aux.norm().atan2(nd))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub vector: GradientVector,
    /// The inputs conflicted and the correction was applied.
    pub triggered: bool,
    /// One of the inputs was (numerically) zero; `vector` is `g_aux`.
    pub degenerate: bool,
    pub phi: Option<f64>,
}

/// Moves a conflicting `g_aux` onto the cone at angle `theta` around `g_dom`:
///
/// `g_aux + ‖g_aux‖·(sin φ / tan θ − cos φ)·ĝ_dom` when φ > π/2, otherwise
/// `g_aux` unchanged. The component of `g_aux` orthogonal to `g_dom` is kept.
/// `theta = π/2` is PCGrad.
pub fn project(
    g_aux: &GradientVector,
    g_dom: &GradientVector,
    theta: f64,
) -> Result<Projection, SurgeryError> {
    project_with_tol(g_aux, g_dom, theta, TOL_NORM)
}

fn project_with_tol(
    g_aux: &GradientVector,
    g_dom: &GradientVector,
    theta: f64,
    tol_norm: f64,
) -> Result<Projection, SurgeryError> {
    if g_aux.len() != g_dom.len() {
        return Err(GradError::LengthMismatch {
            left: g_aux.len(),
            right: g_dom.len(),
        }
        .into());
    }
    if !(theta > 0.0 && theta <= FRAC_PI_2 + 1e-15) {
        return Err(SurgeryError::Config(format!(
            "projection angle {theta} outside (0, π/2]"
        )));
    }
    let na = g_aux.norm();
    let nd = g_dom.norm();
    if na < tol_norm || nd < tol_norm {
        return Ok(Projection {
            vector: g_aux.clone(),
            triggered: false,
            degenerate: true,
            phi: None,
        });
    }
    let a = g_aux.values();
    let d = g_dom.values();
    let phi = unit_angle(a, na, d, nd);
    let inner = crate::gradvec::dot(a, d);
    if inner >= 0.0 {
        return Ok(Projection {
            vector: g_aux.clone(),
            triggered: false,
            degenerate: false,
            phi: Some(phi),
        });
    }
    // ‖g_aux‖·cos φ and ‖g_aux‖·sin φ, the latter taken from the rejection of
    // g_aux from g_dom so it stays accurate when φ is close to π.
    let along = inner / nd;
    let perp = a
        .iter()
        .zip(d)
        .map(|(x, y)| {
            let r = x - along * y / nd;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    let cot = if theta >= FRAC_PI_2 {
        0.0
    } else {
        1.0 / theta.tan()
    };
    let coef = perp * cot - along;
    let vector = g_aux.add_scaled(coef / nd, g_dom)?;
    Ok(Projection {
        vector,
        triggered: true,
        degenerate: false,
        phi: Some(phi),
    })
}

/// Angle between the projected auxiliary gradient and the dominant one:
/// θ when the projection fired, φ otherwise. Absent when the projected vector
/// vanished (exactly anti-parallel inputs).
pub fn theta_prime(
    g_aux_projected: &GradientVector,
    phi_pre: f64,
    theta: f64,
    was_conflicting: bool,
) -> Option<f64> {
    if g_aux_projected.is_degenerate() {
        return None;
    }
    Some(if was_conflicting { theta } else { phi_pre })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub g_aux: GradientVector,
    pub g_dom: GradientVector,
    pub ratio: Option<f64>,
    pub clamped: bool,
}

/// Compresses the auxiliary gradient by `r` and stretches the dominant one by
/// `1/r` when `‖g_aux_projected‖ > K·‖g_dom‖`; otherwise returns both as-is.
pub fn rescale(
    g_aux_projected: &GradientVector,
    g_dom: &GradientVector,
    theta_prime: f64,
    config: &RemedyConfig,
) -> Result<Rescaled, SurgeryError> {
    if g_aux_projected.len() != g_dom.len() {
        return Err(GradError::LengthMismatch {
            left: g_aux_projected.len(),
            right: g_dom.len(),
        }
        .into());
    }
    let nd = g_dom.norm();
    if nd < config.tol_norm {
        return Err(SurgeryError::DegenerateDominant(nd));
    }
    if !(g_aux_projected.norm() > config.k * nd) {
        return Ok(Rescaled {
            g_aux: g_aux_projected.clone(),
            g_dom: g_dom.clone(),
            ratio: None,
            clamped: false,
        });
    }
    let raw = match config.ratio_rule {
        RatioRule::CosThetaPrime => theta_prime.cos(),
        RatioRule::InvSqrtK => 1.0 / config.k.sqrt(),
        RatioRule::Constant(c) => c,
    };
    let clamped = !(raw >= config.r_min);
    let r = if clamped { config.r_min } else { raw };
    Ok(Rescaled {
        g_aux: g_aux_projected.scaled(r),
        g_dom: g_dom.scaled(1.0 / r),
        ratio: Some(r),
        clamped,
    })
}

/// Applies the configured strategy to one layer.
pub fn remedy_layer(
    grads: &TaskGradients,
    config: &RemedyConfig,
) -> Result<RemedyOutcome, SurgeryError> {
    let TaskGradients { g_aux, g_dom, .. } = grads;
    let angle = angle_between(g_aux, g_dom)?;
    let norm_aux_in = g_aux.norm();
    let norm_dom_in = g_dom.norm();
    let degenerate = norm_aux_in < config.tol_norm || norm_dom_in < config.tol_norm;

    if degenerate {
        return finish(
            g_aux.clone(),
            g_dom.clone(),
            Flags {
                phi: None,
                was_conflicting: false,
                was_wrongly_dominant: false,
                theta_prime: None,
                ratio: None,
                ratio_clamped: false,
            },
            config,
            norm_aux_in,
            norm_dom_in,
        );
    }

    let phi = angle.phi.expect("non-degenerate angle");
    let was_conflicting = angle.cos_phi < 0.0;

    let theta = match config.strategy {
        Strategy::NaiveSum => None,
        Strategy::PCGrad => Some(FRAC_PI_2),
        Strategy::FixedTheta { theta } => Some(theta),
        Strategy::GradientRemedy => Some(dynamic_theta(g_aux, g_dom)?),
    };

    let (projected, theta_prime) = match theta {
        None => (g_aux.clone(), Some(phi)),
        Some(theta) => {
            let p = project_with_tol(g_aux, g_dom, theta, config.tol_norm)?;
            let tp = theta_prime(&p.vector, phi, theta, p.triggered);
            (p.vector, tp)
        }
    };

    let was_wrongly_dominant = projected.norm() > config.k * norm_dom_in;

    let rescale_active =
        matches!(config.strategy, Strategy::GradientRemedy) && config.rescale_enabled;
    let (aux_out, dom_out, ratio, ratio_clamped) = match theta_prime {
        Some(tp) if rescale_active => {
            let r = rescale(&projected, g_dom, tp, config)?;
            (r.g_aux, r.g_dom, r.ratio, r.clamped)
        }
        _ => (projected, g_dom.clone(), None, false),
    };

    finish(
        aux_out,
        dom_out,
        Flags {
            phi: Some(phi),
            was_conflicting,
            was_wrongly_dominant,
            theta_prime,
            ratio,
            ratio_clamped,
        },
        config,
        norm_aux_in,
        norm_dom_in,
    )
}

struct Flags {
    phi: Option<f64>,
    was_conflicting: bool,
    was_wrongly_dominant: bool,
    theta_prime: Option<f64>,
    ratio: Option<f64>,
    ratio_clamped: bool,
}

fn finish(
    g_aux_out: GradientVector,
    g_dom_out: GradientVector,
    flags: Flags,
    config: &RemedyConfig,
    norm_aux_in: f64,
    norm_dom_in: f64,
) -> Result<RemedyOutcome, SurgeryError> {
    let g_total = g_aux_out.add(&g_dom_out)?;
    let norm_aux_out = g_aux_out.norm();
    let norm_dom_out = g_dom_out.norm();
    let live = norm_aux_out >= config.tol_norm && norm_dom_out >= config.tol_norm;
    let conflicting_post = live
        && g_aux_out.dot(&g_dom_out)? < -TOL_CONFLICT_POST * norm_aux_out * norm_dom_out;
    let wrongly_dominant_post = live && norm_aux_out > config.k * norm_dom_out;
    Ok(RemedyOutcome {
        g_aux_out,
        g_dom_out,
        g_total,
        phi: flags.phi,
        was_conflicting: flags.was_conflicting,
        was_wrongly_dominant: flags.was_wrongly_dominant,
        theta_prime: flags.theta_prime,
        ratio: flags.ratio,
        ratio_clamped: flags.ratio_clamped,
        conflicting_post,
        wrongly_dominant_post,
        norm_aux_in,
        norm_dom_in,
        norm_aux_out,
        norm_dom_out,
    })
}
