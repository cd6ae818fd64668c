//! How a conflicting auxiliary gradient is rotated towards the dominant one.
//!
//!     cargo run --example projection

use std::f64::consts::FRAC_PI_2;

use gradient_remedy::{angle_between, dynamic_theta, project, GradientVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g_dom = GradientVector::from_slice(&[1.0, 0.0])?;
    let g_aux = GradientVector::from_slice(&[-1.0, 1.0])?;

    let phi = angle_between(&g_aux, &g_dom)?.phi.unwrap_or(f64::NAN);
    println!("g_aux = {:?}, g_dom = {:?}", g_aux.values(), g_dom.values());
    println!("angle between them: {:.1}°\n", phi.to_degrees());

    let dynamic = dynamic_theta(&g_aux, &g_dom)?;
    for (name, theta) in [
        ("PCGrad (θ = 90°)", FRAC_PI_2),
        ("fixed θ = 36°", 36f64.to_radians()),
        ("dynamic θ = atan(‖aux‖/‖dom‖)", dynamic),
    ] {
        let p = project(&g_aux, &g_dom, theta)?;
        let after = angle_between(&p.vector, &g_dom)?.phi.unwrap_or(f64::NAN);
        println!(
            "{name:<32} → {:>8.5?}  angle {:>5.1}°  norm {:.4}",
            p.vector.values(),
            after.to_degrees(),
            p.vector.norm()
        );
    }
    Ok(())
}
