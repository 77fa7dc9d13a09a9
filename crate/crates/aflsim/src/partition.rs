//! Synthetic classification data and Dirichlet(alpha) label partitioning.

use crate::rng::RngStream;
use crate::{Error, Result};

/// A labelled dataset with dense features.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major `size x d_feat`.
    pub features: Vec<Vec<f64>>,
    /// Class ids in `[0, classes)`.
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_feat(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }
}

/// Assignment of example indices to clients.
#[derive(Debug, Clone)]
pub struct Partition {
    pub assignment: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignment.len()
    }

    /// Export as text, one `client: idx idx ...` line per client.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("alpha = {:e}\n", self.alpha));
        for (client, shard) in self.assignment.iter().enumerate() {
            let ids: Vec<String> = shard.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("{}: {}\n", client, ids.join(" ")));
        }
        out
    }
}

/// Gaussian class clusters with mean separation `sep`.
///
/// Labels are assigned round-robin so every class appears `ceil(size/C)` or
/// `floor(size/C)` times; `size == C` yields exactly one example per class.
pub fn synth_classification_dataset(
    classes: usize,
    d_feat: usize,
    size: usize,
    sep: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes (got {classes})"
        )));
    }
    if size < classes {
        return Err(Error::Config(format!(
            "size {size} must be >= number of classes {classes}"
        )));
    }
    if !(sep > 0.0) {
        return Err(Error::Config("sep must be positive".to_string()));
    }
    let half = sep / 2.0;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| crate::vecmath::scale(&rng.gen_unit_vector(d_feat), half))
        .collect();
    let mut features = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for idx in 0..size {
        let label = idx % classes;
        let x: Vec<f64> = means[label]
            .iter()
            .map(|m| m + rng.gen_standard_normal())
            .collect();
        features.push(x);
        labels.push(label);
    }
    Ok(Dataset {
        features,
        labels,
        classes,
    })
}

/// Class-conditional Dirichlet partition: for each class, proportions are
/// drawn from Dir(alpha * 1_n) and the class's examples are split with
/// largest-remainder rounding so coverage is exact.
///
/// A client ending up with zero examples overall is signalled as a
/// degenerate partition; callers re-sample with a fresh sub-seed.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    if n_clients < 1 {
        return Err(Error::Config("n_clients must be >= 1".to_string()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config("alpha must be positive".to_string()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, &label) in labels.iter().enumerate() {
        by_class[label].push(idx);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
        let proportions = dirichlet_draw(alpha, n_clients, rng);
        let counts = largest_remainder_counts(&proportions, class_indices.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&class_indices[cursor..cursor + count]);
            cursor += count;
        }
        debug_assert_eq!(cursor, class_indices.len());
    }

    if let Some(empty) = assignment.iter().position(|s| s.is_empty()) {
        return Err(Error::DegeneratePartition(empty));
    }
    Ok(Partition { assignment, alpha })
}

fn dirichlet_draw(alpha: f64, n: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| rng.gen_gamma(alpha)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All gamma draws underflowed (tiny alpha); give everything to one
        // client picked uniformly, which is the Dir(alpha -> 0) limit.
        let winner = rng.gen_index(n);
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= total);
    draws
}

/// Convert proportions to integer counts summing to `total` by handing the
/// remainder to the largest fractional parts (ties to the lower index).
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let ideal = p * total as f64;
        let floor = ideal.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((i, ideal - floor as f64));
    }
    let mut remainder = total - assigned.min(total);
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut cursor = 0;
    while remainder > 0 {
        counts[fractions[cursor % fractions.len()].0] += 1;
        remainder -= 1;
        cursor += 1;
    }
    counts
}

/// Total-variation distance between a client's label distribution and the
/// global one. Used by heterogeneity diagnostics and tests.
pub fn label_tv_distance(labels: &[usize], shard: &[usize], classes: usize) -> f64 {
    let mut global = vec![0.0; classes];
    for &l in labels {
        global[l] += 1.0;
    }
    let gn = labels.len() as f64;
    let mut local = vec![0.0; classes];
    for &i in shard {
        local[labels[i]] += 1.0;
    }
    let ln = shard.len().max(1) as f64;
    0.5 * global
        .iter()
        .zip(&local)
        .map(|(g, l)| (g / gn - l / ln).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngFactory;

    fn stream(seed: u64, label: &str) -> RngStream {
        RngFactory::new(seed).stream(label)
    }

    #[test]
    fn size_equals_classes_gives_one_each() {
        let ds =
            synth_classification_dataset(4, 3, 4, 10.0, &mut stream(1, "dataset")).unwrap();
        let mut seen = vec![0usize; 4];
        for &l in &ds.labels {
            seen[l] += 1;
        }
        assert_eq!(seen, vec![1, 1, 1, 1]);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_classification_dataset(3, 5, 50, 8.0, &mut stream(9, "dataset")).unwrap();
        let b = synth_classification_dataset(3, 5, 50, 8.0, &mut stream(9, "dataset")).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn separated_classes_are_linearly_separable() {
        // Train a softmax classifier to convergence by plain gradient descent
        // and check train accuracy; sep=10 puts the two clusters ~7 sigma
        // apart.
        let ds =
            synth_classification_dataset(2, 6, 400, 10.0, &mut stream(3, "dataset")).unwrap();
        let d = ds.d_feat();
        let c = ds.classes;
        let mut w = vec![0.0; c * d];
        for _ in 0..3000 {
            let mut grad = vec![0.0; c * d];
            for (x, &y) in ds.features.iter().zip(&ds.labels) {
                let scores: Vec<f64> = (0..c)
                    .map(|k| crate::vecmath::dot(&w[k * d..(k + 1) * d], x))
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for k in 0..c {
                    let p = exps[k] / z - if k == y { 1.0 } else { 0.0 };
                    for (g, xv) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += p * xv;
                    }
                }
            }
            let scale = 0.05 / ds.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= scale * gi;
            }
        }
        let correct = ds
            .features
            .iter()
            .zip(&ds.labels)
            .filter(|(x, &y)| {
                let scores: Vec<f64> = (0..c)
                    .map(|k| crate::vecmath::dot(&w[k * d..(k + 1) * d], x))
                    .collect();
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                best == y
            })
            .count();
        assert!(
            correct as f64 >= 0.99 * ds.len() as f64,
            "train accuracy {}/{}",
            correct,
            ds.len()
        );
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = vec![0, 1, 0, 1, 2];
        let p = dirichlet_partition(&labels, 1, 0.5, &mut stream(2, "partition")).unwrap();
        assert_eq!(p.assignment[0], vec![0, 2, 1, 3, 4]);
    }

    #[test]
    fn partition_is_exact_cover() {
        let ds =
            synth_classification_dataset(5, 4, 997, 6.0, &mut stream(11, "dataset")).unwrap();
        let p = dirichlet_partition(&ds.labels, 13, 0.5, &mut stream(11, "partition")).unwrap();
        let mut seen = vec![false; ds.len()];
        for shard in &p.assignment {
            for &i in shard {
                assert!(!seen[i], "index {i} duplicated");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn huge_alpha_matches_global_proportions() {
        let ds = synth_classification_dataset(5, 4, 10_000, 6.0, &mut stream(4, "dataset"))
            .unwrap();
        let p =
            dirichlet_partition(&ds.labels, 10, 10_000.0, &mut stream(4, "partition")).unwrap();
        for shard in &p.assignment {
            let mut counts = vec![0.0; 5];
            for &i in shard {
                counts[ds.labels[i]] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            for c in counts {
                let local = c / total;
                let global = 1.0 / 5.0;
                assert!(
                    (local - global).abs() / global < 0.05,
                    "proportion {local} vs {global}"
                );
            }
        }
    }

    fn partition_resampling(
        labels: &[usize],
        n: usize,
        alpha: f64,
        base_seed: u64,
    ) -> Partition {
        // Mirror the production policy: degenerate draws are re-sampled with
        // fresh sub-seeds.
        for attempt in 0..100 {
            if let Ok(p) =
                dirichlet_partition(labels, n, alpha, &mut stream(base_seed + attempt, "partition"))
            {
                return p;
            }
        }
        panic!("no valid partition after 100 attempts at alpha={alpha}");
    }

    #[test]
    fn low_alpha_concentrates_classes() {
        let ds = synth_classification_dataset(10, 4, 10_000, 6.0, &mut stream(5, "dataset"))
            .unwrap();
        let distinct_median = |alpha: f64, seed: u64| -> f64 {
            let p = partition_resampling(&ds.labels, 100, alpha, seed);
            let mut counts: Vec<usize> = p
                .assignment
                .iter()
                .map(|shard| {
                    let mut seen = vec![false; 10];
                    for &i in shard {
                        seen[ds.labels[i]] = true;
                    }
                    seen.iter().filter(|&&s| s).count()
                })
                .collect();
            counts.sort_unstable();
            counts[counts.len() / 2] as f64
        };
        assert!(distinct_median(0.1, 6) < distinct_median(10.0, 6));
    }

    #[test]
    fn heterogeneity_decreases_with_alpha() {
        let ds =
            synth_classification_dataset(5, 4, 1000, 6.0, &mut stream(7, "dataset")).unwrap();
        let mean_tv = |alpha: f64| -> f64 {
            let mut total = 0.0;
            for seed in 0..20u64 {
                let p = partition_resampling(&ds.labels, 20, alpha, 100 + 1000 * seed);
                let tv: f64 = p
                    .assignment
                    .iter()
                    .map(|s| label_tv_distance(&ds.labels, s, 5))
                    .sum::<f64>()
                    / 20.0;
                total += tv;
            }
            total / 20.0
        };
        let grid = [0.1, 0.3, 1.0, 10.0];
        let values: Vec<f64> = grid.iter().map(|&a| mean_tv(a)).collect();
        for pair in values.windows(2) {
            assert!(pair[0] > pair[1], "TV not decreasing: {values:?}");
        }
    }

    #[test]
    fn degenerate_partition_is_signalled() {
        // One example per class, more clients than examples: someone must
        // end up empty.
        let labels = vec![0, 1];
        let err = dirichlet_partition(&labels, 8, 0.05, &mut stream(3, "partition"));
        assert!(matches!(err, Err(Error::DegeneratePartition(_))));
    }
}
