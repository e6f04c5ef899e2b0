//! Designs the baseline's per-axis LQR and steady-state Kalman gains and
//! checks the Riccati residuals and closed-loop spectral radii.
use mavtrack::lqg::{LqgConfig, LqgGains};

fn main() -> mavtrack::Result<()> {
    for (name, cfg) in [
        ("2-state", LqgConfig::default()),
        (
            "3-state",
            LqgConfig {
                target_accel_state: true,
                process_noise: [0.0, 0.0, 0.5],
                ..LqgConfig::default()
            },
        ),
    ] {
        let gains = LqgGains::design(&cfg, 0.05)?;
        let (res_lqr, res_kf) = gains.residuals(&cfg);
        let (rho_reg, rho_est) = gains.closed_loop_radii();
        println!("{name}");
        println!("  LQR gain K    = {}", gains.lqr.row(0).transpose().as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "));
        println!("  Kalman gain L = {}", gains.kalman.column(0).as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "));
        println!("  DARE residuals {res_lqr:.1e} (LQR), {res_kf:.1e} (filter)");
        println!("  spectral radius {rho_reg:.4} (A - BK), {rho_est:.4} (estimator)");
    }
    Ok(())
}
