//! Bounded search for a base U-Net channel schedule with a prescribed number
//! of trainable parameters.
//!
//! The schedule family is the doubling layout of [`doubling_schedule`]: a stem
//! transition block, five down blocks, a dense bottleneck and five up blocks.
//! The search enumerates the growth rate, one up-block kernel size shared by
//! all up blocks and a width policy for the inner channels of each block kind.
//! One block ("the free slot") may then take any inner width; since the count
//! is affine in that width it is solved for directly instead of enumerated.

use serde::{Deserialize, Serialize};

use crate::network::{doubling_schedule, BlockEntry, NetworkSpec};

/// Widths used by the stem and the down blocks, top to bottom.
pub const DEFAULT_WIDTHS: [usize; 6] = [8, 16, 32, 64, 128, 256];

/// How the inner width `p` of a block follows from its `a` (input) and `b` (output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerPolicy {
    Input,
    Output,
    HalfInput,
    HalfOutput,
}

impl InnerPolicy {
    pub const ALL: [InnerPolicy; 4] = [
        InnerPolicy::Input,
        InnerPolicy::Output,
        InnerPolicy::HalfInput,
        InnerPolicy::HalfOutput,
    ];

    pub fn apply(self, a: usize, b: usize) -> usize {
        match self {
            InnerPolicy::Input => a,
            InnerPolicy::Output => b,
            InnerPolicy::HalfInput => (a / 2).max(1),
            InnerPolicy::HalfOutput => (b / 2).max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub growth: std::ops::RangeInclusive<usize>,
    pub up_kernels: Vec<usize>,
    pub max_inner: usize,
}

impl SearchSpace {
    pub fn new(in_channels: usize) -> Self {
        SearchSpace {
            in_channels,
            widths: DEFAULT_WIDTHS.to_vec(),
            growth: 1..=512,
            up_kernels: vec![3, 4, 5],
            max_inner: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub spec: NetworkSpec,
    pub count: usize,
    pub growth: usize,
    pub up_kernel: usize,
    pub down_policy: InnerPolicy,
    pub up_policy: InnerPolicy,
    /// Index into `spec.blocks` of the block whose inner width was solved for.
    pub free_block: Option<usize>,
    /// `|p_solved - p_policy|` for the free block (0 when there is none).
    pub perturbation: usize,
}

fn schedule(space: &SearchSpace, growth: usize, k: usize, down: InnerPolicy, up: InnerPolicy) -> NetworkSpec {
    doubling_schedule(
        space.in_channels,
        &space.widths,
        growth,
        k,
        |a, b| down.apply(a, b),
        |_, a, b| up.apply(a, b),
        true,
    )
}

fn set_inner(spec: &mut NetworkSpec, idx: usize, p: usize) -> Option<usize> {
    match &mut spec.blocks[idx] {
        BlockEntry::Down(d) => Some(std::mem::replace(&mut d.p, p)),
        BlockEntry::Up(u) => Some(std::mem::replace(&mut u.p, p)),
        _ => None,
    }
}

/// All schedules in the family whose count equals `target` exactly, best
/// first: schedules needing no free slot, then the smallest perturbation.
pub fn exact_hits(space: &SearchSpace, target: usize) -> Vec<Candidate> {
    let mut hits = Vec::new();
    for &k in &space.up_kernels {
        for down in InnerPolicy::ALL {
            for up in InnerPolicy::ALL {
                for growth in space.growth.clone() {
                    let base = schedule(space, growth, k, down, up);
                    let Ok(count) = base.num_parameters() else { continue };
                    if count == target {
                        hits.push(Candidate {
                            spec: base.clone(),
                            count,
                            growth,
                            up_kernel: k,
                            down_policy: down,
                            up_policy: up,
                            free_block: None,
                            perturbation: 0,
                        });
                    }
                    for idx in 0..base.blocks.len() {
                        let mut spec = base.clone();
                        let Some(p0) = set_inner(&mut spec, idx, 1) else {
                            continue;
                        };
                        let Ok(c1) = spec.num_parameters() else { continue };
                        set_inner(&mut spec, idx, 2);
                        let Ok(c2) = spec.num_parameters() else { continue };
                        // count(p) = c1 + (p - 1) * slope
                        let slope = c2 - c1;
                        if target < c1 || !(target - c1).is_multiple_of(slope) {
                            continue;
                        }
                        let p = 1 + (target - c1) / slope;
                        if p > space.max_inner || p == p0 {
                            continue;
                        }
                        set_inner(&mut spec, idx, p);
                        hits.push(Candidate {
                            count: spec.num_parameters().unwrap_or(0),
                            spec,
                            growth,
                            up_kernel: k,
                            down_policy: down,
                            up_policy: up,
                            free_block: Some(idx),
                            perturbation: p.abs_diff(p0),
                        });
                    }
                }
            }
        }
    }
    hits.retain(|c| c.count == target);
    hits.sort_by_key(|c| (c.free_block.is_some(), c.perturbation, c.growth));
    hits
}

/// The family member whose count is closest to `target` (no free slot).
pub fn closest(space: &SearchSpace, target: usize) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for &k in &space.up_kernels {
        for down in InnerPolicy::ALL {
            for up in InnerPolicy::ALL {
                for growth in space.growth.clone() {
                    let spec = schedule(space, growth, k, down, up);
                    let Ok(count) = spec.num_parameters() else { continue };
                    if best
                        .as_ref()
                        .is_none_or(|b| count.abs_diff(target) < b.count.abs_diff(target))
                    {
                        best = Some(Candidate {
                            spec,
                            count,
                            growth,
                            up_kernel: k,
                            down_policy: down,
                            up_policy: up,
                            free_block: None,
                            perturbation: 0,
                        });
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_count_exactly() {
        let space = SearchSpace {
            growth: 1..=8,
            ..SearchSpace::new(1)
        };
        let probe = schedule(&space, 5, 4, InnerPolicy::Input, InnerPolicy::Output);
        let target = probe.num_parameters().unwrap();
        let hits = exact_hits(&space, target);
        assert!(!hits.is_empty());
        assert_eq!(hits[0].free_block, None);
        for h in &hits {
            assert_eq!(h.spec.num_parameters().unwrap(), target);
            h.spec.validate().unwrap();
        }
    }
}
