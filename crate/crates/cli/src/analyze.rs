use std::collections::HashSet;

use nmsparse::patterns::{bits_per_element, config_count, stacked_config_count, PatternCodec};
use nmsparse::PatternShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{AnalyzeArgs, Failure};

/// Largest block for which the superset check enumerates every pattern.
const MAX_EXHAUSTIVE: u128 = 1 << 20;

#[derive(Serialize)]
struct PatternRow {
    pattern: PatternShape,
    config_count: String,
    /// Configurations reachable by stacking 2:4 blocks, when the shape allows it.
    stacked_two_four: Option<String>,
    bits_per_block: u32,
    bits_per_element: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    superset: Option<SupersetCheck>,
}

#[derive(Serialize)]
struct SupersetCheck {
    applicable: bool,
    stacked_total: u64,
    stacked_valid: u64,
    distinct_images: u64,
    patterns_enumerated: u64,
    trials: usize,
    dominance_holds: bool,
    strict_wins: usize,
    message: String,
}

fn stacked_repeats(p: PatternShape) -> Option<u32> {
    (p.m_block() % 4 == 0 && p.n_keep() * 2 == p.m_block()).then_some((p.m_block() / 4) as u32)
}

fn top_sum(scores: &[f64], kept: &[usize]) -> f64 {
    kept.iter().map(|&k| scores[k]).sum()
}

fn verify(p: PatternShape, trials: usize, seed: u64) -> Result<SupersetCheck, Failure> {
    let total = config_count(p)?;
    let not_applicable = |why: &str| SupersetCheck {
        applicable: false,
        stacked_total: 0,
        stacked_valid: 0,
        distinct_images: 0,
        patterns_enumerated: 0,
        trials: 0,
        dominance_holds: false,
        strict_wins: 0,
        message: format!("{p}: {why}"),
    };
    let Some(repeats) = stacked_repeats(p) else {
        return Ok(not_applicable("not a stack of 2:4 blocks"));
    };
    let stacked_total = stacked_config_count(PatternShape::two_four(), repeats)?;
    if total > MAX_EXHAUSTIVE || stacked_total > MAX_EXHAUSTIVE {
        return Ok(not_applicable("too many patterns to enumerate"));
    }

    let codec = PatternCodec::new(p)?;
    let base = PatternCodec::new(PatternShape::two_four())?;
    let base_patterns: Vec<Vec<usize>> = (0..6).map(|r| base.unrank(r)).collect::<Result<_, _>>()?;
    let stacked: Vec<Vec<usize>> = (0..stacked_total)
        .map(|mut idx| {
            let mut kept = Vec::with_capacity(p.n_keep());
            for g in 0..repeats as usize {
                kept.extend(base_patterns[(idx % 6) as usize].iter().map(|&c| c + 4 * g));
                idx /= 6;
            }
            kept
        })
        .collect();
    let mut images = HashSet::new();
    let mut valid = 0u64;
    for kept in &stacked {
        if let Ok(rank) = codec.rank(kept) {
            valid += 1;
            images.insert(rank);
        }
    }

    let all: Vec<Vec<usize>> = (0..total).map(|r| codec.unrank(r)).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut holds, mut strict) = (true, 0);
    for _ in 0..trials {
        let scores: Vec<f64> = (0..p.m_block()).map(|_| rng.gen::<f64>()).collect();
        let best = all.iter().map(|k| top_sum(&scores, k)).fold(f64::NEG_INFINITY, f64::max);
        let best_stacked = stacked.iter().map(|k| top_sum(&scores, k)).fold(f64::NEG_INFINITY, f64::max);
        holds &= best >= best_stacked;
        strict += usize::from(best > best_stacked);
    }

    let ok = valid == stacked_total as u64 && images.len() as u128 == stacked_total && holds;
    let message = format!(
        "{valid}/{stacked_total} stacked patterns valid, {} on {total}-pattern exhaustive check",
        if holds { "dominance holds" } else { "dominance VIOLATED" }
    );
    Ok(SupersetCheck {
        applicable: true,
        stacked_total: stacked_total as u64,
        stacked_valid: valid,
        distinct_images: images.len() as u64,
        patterns_enumerated: total as u64,
        trials,
        dominance_holds: ok,
        strict_wins: strict,
        message,
    })
}

pub fn run(a: AnalyzeArgs) -> Result<(), Failure> {
    let mut rows = Vec::with_capacity(a.patterns.len());
    for &p in &a.patterns {
        let bpe = bits_per_element(p)?;
        let stacked = stacked_repeats(p)
            .map(|r| stacked_config_count(PatternShape::two_four(), r).map(|c| c.to_string()))
            .transpose()?;
        let superset = if a.verify_superset {
            Some(verify(p, a.trials, a.seed)?)
        } else {
            None
        };
        rows.push(PatternRow {
            pattern: p,
            config_count: config_count(p)?.to_string(),
            stacked_two_four: stacked,
            bits_per_block: bpe.bits_per_block,
            bits_per_element: bpe.as_f64(),
            superset,
        });
    }

    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    } else {
        println!("{:<8} {:>28} {:>14} {:>10} {:>10}", "pattern", "configs", "stacked 2:4", "bits/blk", "bits/elt");
        for r in &rows {
            println!(
                "{:<8} {:>28} {:>14} {:>10} {:>10}",
                r.pattern.to_string(),
                r.config_count,
                r.stacked_two_four.as_deref().unwrap_or("-"),
                r.bits_per_block,
                r.bits_per_element
            );
        }
        for r in &rows {
            if let Some(s) = &r.superset {
                println!("{}", s.message);
            }
        }
    }
    let failed = rows
        .iter()
        .filter_map(|r| r.superset.as_ref())
        .any(|s| s.applicable && !s.dominance_holds);
    if failed {
        return Err(Failure::input("superset check failed"));
    }
    Ok(())
}
