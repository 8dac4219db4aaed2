//! Prints the best exact schedule for a parameter-count target as TOML.
//!
//! cargo run --release --example calibrate -- [in_channels] [target]

use bsunet::calibrate::{exact_hits, SearchSpace};
use bsunet::network::ModelSpec;

fn main() {
    let mut args = std::env::args().skip(1);
    let ic: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let target: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6_588_139);
    let hits = exact_hits(&SearchSpace::new(ic), target);
    eprintln!("{} exact schedules", hits.len());
    match hits.first() {
        Some(h) => {
            eprintln!(
                "growth={} up_kernel={} down={:?} up={:?} free_block={:?}",
                h.growth, h.up_kernel, h.down_policy, h.up_policy, h.free_block
            );
            print!("{}", ModelSpec::BaseUnet(h.spec.clone()).to_toml_string().unwrap());
        }
        None => std::process::exit(1),
    }
}
