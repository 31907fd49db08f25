//! Prints the encoder plan and the connection pattern of one harmonic block.
//!
//!     cargo run --example inspect_topology -- 2

use blazeneo::topology::{layer_width, plan_hardnet68, render_plan, skip_sources};

fn main() -> blazeneo::Result<()> {
    let block: Option<usize> = std::env::args().nth(1).map(|a| a.parse().expect("block index"));
    let plan = plan_hardnet68();
    print!("{}", render_plan(&plan, block)?);

    // the raw rules behind the table
    println!("\nlayer  sources      width(k=16, m=1.7)");
    for l in 1..=16 {
        println!("{l:>5}  {:<12} {}", format!("{:?}", skip_sources(l)), layer_width(l, 16, 1.7)?);
    }
    Ok(())
}
