//! Compares the linear and uniform noise schedules and prints the reverse
//! posterior coefficients along a 10-step subset trajectory.

use unitdiff::schedule::{subset_trajectory, NoiseSchedule};

fn main() -> unitdiff::Result<()> {
    let linear = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let uniform = NoiseSchedule::uniform(1000, 0.3)?;
    println!("{:>5} {:>12} {:>12}", "t", "linear", "uniform");
    for t in [0, 1, 100, 200, 400, 600, 800, 1000] {
        println!("{t:>5} {:>12.6} {:>12.6}", linear.alpha_bar(t), uniform.alpha_bar(t));
    }

    let traj = subset_trajectory(1000, 10)?;
    println!("\n10-step trajectory: {traj:?}");
    println!("{:>5} {:>5} {:>10} {:>10} {:>10}", "t", "prev", "c_x0", "c_xt", "var");
    for (i, &t) in traj.iter().enumerate() {
        let prev = traj.get(i + 1).copied().unwrap_or(0);
        let c = uniform.posterior_coefficients(t, prev);
        println!("{t:>5} {prev:>5} {:>10.5} {:>10.5} {:>10.5}", c.x0, c.xt, c.variance);
    }
    Ok(())
}
