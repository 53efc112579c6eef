use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCluster {
    pub center: f64,
    /// Sample standard deviation (0 for a single sample).
    pub width: f64,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

/// 1-D clustering of sorted samples: neighbouring groups are merged, closest
/// centres first, while their centres are less than `min_separation` apart.
/// Clusters come back sorted by centre and pairwise at least `min_separation`
/// apart.
pub fn cluster_frequencies(samples: &[f64], min_separation: f64) -> Vec<FrequencyCluster> {
    let mut s: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    // (start, end, sum) over runs of the sorted samples
    let mut groups: Vec<(usize, usize, f64)> = s.iter().enumerate().map(|(i, v)| (i, i + 1, *v)).collect();
    let centre = |g: &(usize, usize, f64)| g.2 / (g.1 - g.0) as f64;
    loop {
        let best = groups
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, centre(&w[1]) - centre(&w[0])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, d)) if d < min_separation => {
                let next = groups.remove(i + 1);
                groups[i].1 = next.1;
                groups[i].2 += next.2;
            }
            _ => break,
        }
    }
    groups
        .iter()
        .map(|g| {
            let part = &s[g.0..g.1];
            let n = part.len() as f64;
            let center = centre(g);
            let width = if part.len() > 1 {
                (part.iter().map(|v| (v - center).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            FrequencyCluster { center, width, count: part.len(), min: part[0], max: part[part.len() - 1] }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn repeated_value_is_one_cluster() {
        let c = cluster_frequencies(&[12.5; 8], 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].count, 8);
        assert_eq!(c[0].width, 0.0);
    }

    #[test]
    fn six_bath_clusters() {
        let centres = [-215.0, -130.0, -45.0, 45.0, 130.0, 215.0];
        let noise = Normal::new(0.0, 10.0).unwrap();
        let mut rng = stream(21, "cluster", 0);
        let samples: Vec<f64> = (0..300).map(|i| centres[i % 6] + noise.sample(&mut rng)).collect();
        let c = cluster_frequencies(&samples, 40.0);
        assert_eq!(c.len(), 6);
        for (got, want) in c.iter().zip(centres) {
            assert!((got.center - want).abs() < 5.0, "{got:?} vs {want}");
        }
    }

    #[test]
    fn wide_separation_merges_everything() {
        let c = cluster_frequencies(&[1.0, 5.0, 9.0, 30.0], 100.0);
        assert_eq!(c.len(), 1);
        assert!(cluster_frequencies(&[], 1.0).is_empty());
    }
}
