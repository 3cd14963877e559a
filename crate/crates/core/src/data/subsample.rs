use rand::seq::SliceRandom;

use super::{derived_rng, Dataset};
use crate::error::{Error, Result};

const SUBSAMPLE_STREAM: u64 = 3;

/// Accepted distance between realized and requested disparity.
pub const DISPARITY_TOLERANCE: f64 = 0.01;

/// Each (group, class) cell keeps at least this fraction of its samples.
const MIN_RETAINED_FRACTION: f64 = 0.1;

/// `posrate(attribute = 1) − posrate(attribute = 0)`.
pub fn positive_rate_disparity(dataset: &Dataset, attribute: &str) -> Result<f64> {
    let idx = dataset.attribute_index(attribute)?;
    let counts = GroupCounts::tally(dataset, idx);
    let rate = |g: usize| counts.pos[g] as f64 / (counts.pos[g] + counts.neg[g]).max(1) as f64;
    Ok(rate(1) - rate(0))
}

#[derive(Debug, Clone, Copy)]
struct GroupCounts {
    pos: [usize; 2],
    neg: [usize; 2],
}

impl GroupCounts {
    fn tally(dataset: &Dataset, idx: usize) -> Self {
        let mut c = GroupCounts {
            pos: [0; 2],
            neg: [0; 2],
        };
        for s in &dataset.samples {
            let g = s.attrs.values()[idx] as usize;
            if s.label == 1 {
                c.pos[g] += 1;
            } else {
                c.neg[g] += 1;
            }
        }
        c
    }
}

fn removable(count: usize) -> usize {
    let keep = ((count as f64 * MIN_RETAINED_FRACTION).ceil() as usize).max(1);
    count.saturating_sub(keep)
}

/// Removes samples (never adds any) until the absolute positive-rate gap
/// between the two groups of `attribute` is within ±0.01 of `target`.
///
/// The group with the higher positive rate stays higher. Removals come from
/// the larger group first; the smaller group is trimmed only as far as
/// needed. Every (group, class) cell keeps at least 10% of its samples.
pub fn subsample_for_disparity(
    dataset: &Dataset,
    attribute: &str,
    target: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("target disparity {target} outside [0, 1]")));
    }
    let idx = dataset.attribute_index(attribute)?;
    let c = GroupCounts::tally(dataset, idx);
    for g in 0..2 {
        if c.pos[g] == 0 || c.neg[g] == 0 {
            return Err(Error::Data(format!(
                "group {attribute}={g} needs both positives and negatives"
            )));
        }
    }
    let rate = |p: usize, n: usize| p as f64 / (p + n) as f64;
    let r1 = rate(c.pos[1], c.neg[1]);
    let r0 = rate(c.pos[0], c.neg[0]);
    let (high, low) = if r1 >= r0 { (1, 0) } else { (0, 1) };
    let current = (r1 - r0).abs();
    if (current - target).abs() <= DISPARITY_TOLERANCE {
        return Ok(dataset.clone());
    }
    let widen = target > current;

    // Widening drops negatives from the high group and positives from the
    // low group; narrowing does the opposite.
    let (high_class, low_class) = if widen { (0u8, 1u8) } else { (1u8, 0u8) };
    let cell = |g: usize, class: u8| if class == 1 { c.pos[g] } else { c.neg[g] };
    let max_high = removable(cell(high, high_class));
    let max_low = removable(cell(low, low_class));
    let disparity = |rh: usize, rl: usize| {
        let (ph, nh) = if high_class == 0 {
            (c.pos[high], c.neg[high] - rh)
        } else {
            (c.pos[high] - rh, c.neg[high])
        };
        let (pl, nl) = if low_class == 1 {
            (c.pos[low] - rl, c.neg[low])
        } else {
            (c.pos[low], c.neg[low] - rl)
        };
        rate(ph, nh) - rate(pl, nl)
    };

    let high_is_majority = c.pos[high] + c.neg[high] >= c.pos[low] + c.neg[low];
    let (max_major, max_minor) = if high_is_majority {
        (max_high, max_low)
    } else {
        (max_low, max_high)
    };
    let split = |major: usize, minor: usize| {
        if high_is_majority {
            (major, minor)
        } else {
            (minor, major)
        }
    };

    let mut choice = None;
    let mut closest = current;
    'outer: for minor in 0..=max_minor {
        let mut best: Option<(usize, f64)> = None;
        for major in 0..=max_major {
            let (rh, rl) = split(major, minor);
            let d = disparity(rh, rl);
            let gap = (d - target).abs();
            if gap < (closest - target).abs() {
                closest = d;
            }
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((major, gap));
            }
        }
        if let Some((major, gap)) = best {
            if gap <= DISPARITY_TOLERANCE {
                choice = Some(split(major, minor));
                break 'outer;
            }
        }
    }
    let Some((remove_high, remove_low)) = choice else {
        return Err(Error::InfeasibleDisparity {
            target,
            achievable: closest,
        });
    };

    let mut drop = std::collections::HashSet::new();
    for (g, class, count) in [(high, high_class, remove_high), (low, low_class, remove_low)] {
        if count == 0 {
            continue;
        }
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.attrs.values()[idx] as usize == g && s.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut derived_rng(seed, SUBSAMPLE_STREAM, (g * 2) as u64 + class as u64));
        drop.extend(members.into_iter().take(count));
    }
    let kept = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, s)| s.clone())
        .collect();
    Ok(dataset.with_samples(kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DatasetConfig};

    fn config(rates: [f64; 2], counts: [usize; 2]) -> DatasetConfig {
        DatasetConfig {
            height: 8,
            width: 8,
            attribute_names: vec!["sex".into()],
            subgroup_counts: counts.to_vec(),
            positive_rates: rates.to_vec(),
            confound_strength: vec![0.1],
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn at_target_is_unchanged() {
        let ds = generate_synthetic(&config([0.3, 0.46], [300, 300])).unwrap();
        let out = subsample_for_disparity(&ds, "sex", 0.16, 1).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn widens_to_target_and_only_removes() {
        let ds = generate_synthetic(&config([0.30, 0.35], [800, 600])).unwrap();
        let before = positive_rate_disparity(&ds, "sex").unwrap();
        assert!((before - 0.05).abs() < 0.01);
        let out = subsample_for_disparity(&ds, "sex", 0.16, 7).unwrap();
        let after = positive_rate_disparity(&out, "sex").unwrap();
        assert!((0.15..=0.17).contains(&after), "{after}");
        let ids: std::collections::HashSet<_> = ds.samples.iter().map(|s| &s.id).collect();
        assert!(out.samples.iter().all(|s| ids.contains(&s.id)));
        assert!(out.len() < ds.len());
        // deterministic
        assert_eq!(out, subsample_for_disparity(&ds, "sex", 0.16, 7).unwrap());
    }

    #[test]
    fn narrows_when_target_is_below_current() {
        let ds = generate_synthetic(&config([0.2, 0.5], [500, 500])).unwrap();
        let out = subsample_for_disparity(&ds, "sex", 0.1, 3).unwrap();
        let after = positive_rate_disparity(&out, "sex").unwrap();
        assert!((after - 0.1).abs() <= 0.01, "{after}");
    }

    #[test]
    fn infeasible_target_reports_bound() {
        let ds = generate_synthetic(&config([0.5, 0.5], [100, 100])).unwrap();
        match subsample_for_disparity(&ds, "sex", 0.99, 1) {
            Err(Error::InfeasibleDisparity { achievable, .. }) => {
                assert!(achievable < 0.99 && achievable > 0.5)
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn requires_both_classes_per_group() {
        let ds = generate_synthetic(&config([0.0, 0.5], [100, 100])).unwrap();
        assert!(matches!(
            subsample_for_disparity(&ds, "sex", 0.2, 1),
            Err(Error::Data(_))
        ));
    }
}
