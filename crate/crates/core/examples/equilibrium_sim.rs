//! Drives the `k` controller with synthetic loss curves and prints the
//! trajectory and the convergence measure.
//!
//! ```text
//! cargo run --example equilibrium_sim
//! ```

use fcgan::equilibrium::{convergence_measure, equilibrium_step};
use fcgan::EquilibriumState;

fn run(label: &str, steps: u32, losses: impl Fn(u32) -> (f64, f64)) -> fcgan::Result<()> {
    let mut state = EquilibriumState::default();
    println!("{label}");
    for t in 0..=steps {
        let (l_dr, l_g) = losses(t);
        if t % (steps / 8) == 0 {
            println!(
                "  t {t:>6}  l_dr {l_dr:.4}  l_g {l_g:.4}  k {:.5}  M_c {:.4}",
                state.k,
                convergence_measure(l_dr, l_g, state.gamma)
            );
        }
        state = equilibrium_step(&state, l_dr, l_g)?;
    }
    Ok(())
}

fn main() -> fcgan::Result<()> {
    // Generator loss falls below gamma * L_Dr, then settles on the balance line.
    run("settling onto the balance line", 40_000, |t| {
        let l_dr = 0.3;
        let l_g = 0.15 * (1.0 - 0.6 * (-(t as f64) / 4000.0).exp());
        (l_dr, l_g)
    })?;
    // Generator loss held above gamma * L_Dr: k is pushed down to zero.
    run("generator too weak", 8_000, |_| (0.2, 0.3))?;
    // A discriminator much better on real pairs: k saturates at one.
    run("discriminator dominant", 8_000, |_| (0.9, 0.1))?;
    Ok(())
}
