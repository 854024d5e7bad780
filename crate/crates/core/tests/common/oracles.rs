//! Brute-force references shared by the oracle suites and the acceptance run.
#![allow(clippy::needless_range_loop)]

use ctcn_core::features::FeatureMatrix;
use ctcn_core::grafr::DIST_EPS;
use ctcn_core::rng;
use rand::Rng;

pub fn random_instance(seed: u64) -> FeatureMatrix {
    let mut r = rng::stream(seed, "grafr.oracle", 0);
    let n = r.gen_range(2..=50);
    let d = r.gen_range(1..=32);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
    // some exact duplicates exercise the epsilon floor
    if n > 3 && r.gen_bool(0.3) {
        rows[1] = rows[0].clone();
    }
    FeatureMatrix::from_rows(&rows).unwrap()
}

pub struct Brute {
    pub dist: Vec<Vec<f64>>,
    pub sim: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub recon: Vec<Vec<f64>>,
}

pub fn brute_grafr(x: &FeatureMatrix) -> Brute {
    let n = x.rows();
    let mut dist = vec![vec![0.0; n]; n];
    let mut sim = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..x.cols() {
                let diff = x.get(u, j) - x.get(v, j);
                acc += diff * diff;
            }
            dist[u][v] = acc.sqrt();
            sim[u][v] = 1.0 / dist[u][v].max(DIST_EPS);
        }
    }
    let mut mean = vec![0.0; n];
    let mut recon = vec![vec![0.0; x.cols()]; n];
    for u in 0..n {
        let mut total = 0.0;
        for v in 0..n {
            if v != u {
                mean[u] += sim[u][v];
                total += sim[u][v];
            }
        }
        mean[u] /= (n - 1) as f64;
        for v in 0..n {
            if v != u {
                let w = sim[u][v] / total;
                for j in 0..x.cols() {
                    recon[u][j] += w * x.get(v, j);
                }
            }
        }
    }
    Brute { dist, sim, mean, recon }
}

/// Mann-Whitney form: positive/negative pairs won, ties count half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}


/// Repeated arg-max over `mean` with the lowest index winning ties.
pub fn top_k(mean: &[f64], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..mean.len()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let mut pos = 0;
        for p in 1..left.len() {
            if mean[left[p]] > mean[left[pos]] {
                pos = p;
            }
        }
        picked.push(left.remove(pos));
    }
    picked
}
