//! Fits splat colours, shapes and opacities on a sphere seen by eight
//! cameras, starting from grey splats scattered on its surface.
//!
//! cargo run --release --example fit_sphere -- [iterations]

use rcgkit::fit::{fit_rcg, FitConfig};
use rcgkit::fixtures::{sphere_fixture, SphereFixtureSpec};

fn main() -> rcgkit::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let fx = sphere_fixture(&SphereFixtureSpec::default())?;
    let cfg = FitConfig {
        iterations,
        ..Default::default()
    };
    println!("{} splats, {} views, {iterations} iterations", fx.init.len(), fx.views.len());

    let (fitted, report) = fit_rcg(&fx.init, &fx.views, &cfg)?;
    for (it, loss) in report.loss_total.iter().enumerate().step_by((iterations / 10).max(1)) {
        println!("  iter {it:4}: loss {loss:.5} (rgb {:.5}, alpha {:.5})", report.loss_rgb[it], report.loss_alpha[it]);
    }
    for (v, (p, s)) in report.view_psnr.iter().zip(&report.view_ssim).enumerate() {
        println!("  view {v}: PSNR {p:.2} dB, SSIM {s:.4}");
    }
    let mean_color = fitted.splats.iter().map(|s| s.color).sum::<nalgebra::Vector3<f64>>() / fitted.len() as f64;
    println!(
        "mean PSNR {:.2} dB in {:.1}s; mean splat colour {:.3} {:.3} {:.3}",
        report.mean_psnr(),
        report.wall_clock_s,
        mean_color.x,
        mean_color.y,
        mean_color.z
    );
    Ok(())
}
