//! Closed-loop descent vs a single-shot plan on seeded adjacent-pair scenes,
//! then the full trace of the first episode.
//!
//! `cargo run --release --example closed_loop_sim -- [episodes]`

use hrgnet::sim::{
    compare_policies, make_scene, run_episode, trace_table, NoisyOracle, ScenePlan, ShapeFamily, SimConfig,
};

fn main() -> hrgnet::Result<()> {
    let episodes: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let cfg = SimConfig::default();
    let scenes = (0..episodes)
        .map(|seed| {
            let plan = ScenePlan {
                count: 2,
                family: ShapeFamily::Mixed,
                adjacency: 0,
                seed,
            };
            make_scene(&plan).map(|s| (seed, s))
        })
        .collect::<hrgnet::Result<Vec<_>>>()?;
    let mut model = NoisyOracle::new(1.5, 0.1, 7);
    print!("{}", compare_policies(&scenes, &mut model, &cfg)?.report());

    let ep = run_episode(&scenes[0].1, &mut model, &cfg)?;
    println!("\nscene 0: success {} collision {}", ep.success, ep.collision);
    print!("{}", trace_table(&ep.trace));
    Ok(())
}
