//! Open-loop flight on both plant models: hover, then a constant body-rate
//! command. Prints position and attitude drift.
use mavtrack::dynamics::{Command, ModelVariant, PhysParams, Plant, SimState};
use nalgebra::Vector3;

fn main() -> mavtrack::Result<()> {
    for alpha in [0.6, 1.0, 1.4] {
        let params = PhysParams::default().with_uncertainty(alpha, 0.02);
        for variant in [ModelVariant::Training, ModelVariant::Validation] {
            let mut plant = Plant::new(params.clone(), variant, SimState::hover(Vector3::zeros(), &params))?;
            for _ in 0..200 {
                plant.command(Command::hover());
                plant.advance()?;
            }
            let hover_drift = plant.state().position.norm();
            for _ in 0..100 {
                plant.command(Command::new(Vector3::new(0.0, 0.5, 1.0), 0.5));
                plant.advance()?;
            }
            let s = plant.state();
            println!(
                "alpha {alpha:.1} {variant:?}: hover drift {hover_drift:.1e} m, after 5 s of rate and thrust-rate commands p = [{:.2}, {:.2}, {:.2}] m, |R'R - I| = {:.1e}",
                s.position.x,
                s.position.y,
                s.position.z,
                s.orthogonality_error()
            );
        }
    }
    Ok(())
}
