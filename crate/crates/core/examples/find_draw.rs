//! Regenerates the bundled measurement draw:
//! `cargo run --release --example find_draw [seed] [max_attempts]`.

use lpvsync::chaos::ChaosScenario;
use lpvsync::lmi::BarrierSolver;

fn main() {
    let sc = ChaosScenario::bundled();
    let mut args = std::env::args().skip(1);
    let seed = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(sc.draw.seed);
    let max_attempts = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    match sc.search_draw(seed, max_attempts, (0.2, 20.0), &BarrierSolver::default()) {
        Ok((draw, worst)) => {
            eprintln!("attempt {} max gamma^2 {worst}", draw.attempt);
            println!("{}", serde_json::to_string_pretty(&draw).unwrap());
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    }
}
