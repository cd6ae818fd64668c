//! A wrongly dominant auxiliary gradient under each ratio rule.
//!
//!     cargo run --example rescale

use gradient_remedy::{remedy_layer, RatioRule, RemedyConfig, TaskGradients, GradientVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Nearly orthogonal and ten times larger than the dominant gradient.
    let g_aux = GradientVector::from_slice(&[1.0, 10.0])?;
    let g_dom = GradientVector::from_slice(&[1.0, 0.0])?;
    let grads = TaskGradients::new("demo", g_aux, g_dom)?;

    println!("{:<18} {:>7} {:>10} {:>10} {:>9}", "rule", "r", "‖aux‖", "‖dom‖", "ratio");
    for rule in [
        RatioRule::CosThetaPrime,
        RatioRule::InvSqrtK,
        RatioRule::Constant(0.5),
    ] {
        let config = RemedyConfig {
            ratio_rule: rule,
            ..RemedyConfig::default()
        };
        let out = remedy_layer(&grads, &config)?;
        println!(
            "{:<18} {:>7.4} {:>10.4} {:>10.4} {:>9.3}",
            rule.to_string(),
            out.ratio.unwrap_or(1.0),
            out.norm_aux_out,
            out.norm_dom_out,
            out.norm_aux_out / out.norm_dom_out
        );
    }
    println!("\nbefore: ratio {:.3} with K = {}", grads.g_aux.norm() / grads.g_dom.norm(), RemedyConfig::default().k);
    Ok(())
}
