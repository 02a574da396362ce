//! Adds splats that disagree with the images and shows that fitting drives
//! their opacity down, so opacity can be read as confidence.
//!
//! cargo run --release --example opacity_confidence

use rcgkit::fit::{fit_rcg, FitConfig};
use rcgkit::fixtures::{conflict_fixture, SphereFixtureSpec};

fn main() -> rcgkit::Result<()> {
    let fx = conflict_fixture(&SphereFixtureSpec::default(), 64, 0.15, 7)?;
    let cfg = FitConfig {
        iterations: 200,
        ..Default::default()
    };
    let (fitted, report) = fit_rcg(&fx.base.init, &fx.base.views, &cfg)?;
    println!("fit done, mean PSNR {:.2} dB", report.mean_psnr());

    let mut clean = Vec::new();
    let mut conflicted = Vec::new();
    for (s, c) in fitted.splats.iter().zip(&fx.conflicted) {
        if *c { conflicted.push(s.opacity) } else { clean.push(s.opacity) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("clean splats:      {:4}, mean opacity {:.3}", clean.len(), mean(&clean));
    println!("conflicted splats: {:4}, mean opacity {:.3}", conflicted.len(), mean(&conflicted));

    for threshold in [0.25, 0.5, 0.75] {
        let kept_clean = clean.iter().filter(|o| **o >= threshold).count();
        let kept_bad = conflicted.iter().filter(|o| **o >= threshold).count();
        println!("opacity >= {threshold}: keeps {kept_clean} clean and {kept_bad} conflicted");
    }
    Ok(())
}
