//! Spectral clustering of the client graph.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::eigen::eigensym;
use crate::graph::{ClientGraph, ClusterAssignment};
use crate::tensor::init::seeded_rng;

/// Partition the client graph into `m` clusters.
///
/// Embeds nodes with the `m` lowest eigenvectors of the symmetric
/// normalized Laplacian, row-normalizes, and runs seeded k-means. Labels
/// are canonical: clusters are numbered by their smallest member index, so
/// the result is stable across runs with the same seed.
pub fn spectral_cluster(g: &ClientGraph, m: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = g.n;
    if m < 1 || m > n {
        return Err(Error::Graph(format!("cluster count {m} not in 1..={n}")));
    }
    if m == n {
        return Ok(ClusterAssignment { m, label: (0..n).collect() });
    }
    let lap = normalized_laplacian(g);
    let (_, vecs) = eigensym(&lap, n)?;
    // Embedding: first m columns (ascending eigenvalue), row-normalized.
    let mut emb = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            emb[i * m + j] = vecs[i * n + j];
        }
        let norm = emb[i * m..(i + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for j in 0..m {
                emb[i * m + j] /= norm;
            }
        }
    }
    let raw = kmeans(&emb, n, m, seed);
    Ok(canonical_relabel(&raw, m))
}

/// L = I − D^{−1/2} A D^{−1/2}, with isolated nodes assigned degree 1.
fn normalized_laplacian(g: &ClientGraph) -> Vec<f64> {
    let n = g.n;
    let mut deg = vec![0.0; n];
    for i in 0..n {
        deg[i] = (0..n).map(|j| g.adj[i * n + j]).sum();
    }
    // Sanity on the unnormalized form: rows of D − A sum to zero.
    for i in 0..n {
        let row: f64 = (0..n).map(|j| if i == j { deg[i] } else { -g.adj[i * n + j] }).sum();
        debug_assert!(row.abs() < 1e-9, "unnormalized Laplacian row {i} sums to {row}");
    }
    let dinv: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }).collect();
    let mut lap = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = g.adj[i * n + j];
            lap[i * n + j] = if i == j { 1.0 } else { 0.0 } - dinv[i] * a * dinv[j];
        }
    }
    lap
}

/// Seeded k-means with k-means++ initialization, at most 100 iterations.
/// Ties go to the lowest centroid index; an emptied cluster steals the
/// point farthest from its current centroid.
fn kmeans(points: &[f64], n: usize, k: usize, seed: u64) -> Vec<usize> {
    let dim = points.len() / n;
    let mut rng = seeded_rng(seed);

    let dist2 = |p: usize, c: &[f64]| -> f64 {
        points[p * dim..(p + 1) * dim]
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    // k-means++: spread the initial centroids by squared-distance weighting.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(points[first * dim..(first + 1) * dim].to_vec());
    while centroids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let chosen = if total <= 0.0 {
            // All remaining points coincide with a centroid; any pick works.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (p, w) in weights.iter().enumerate() {
                if target < *w {
                    pick = p;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[chosen * dim..(chosen + 1) * dim].to_vec());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for p in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if labels[p] != best {
                labels[p] = best;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Steal the point farthest from its assigned centroid.
            let far = (0..n)
                .filter(|&p| counts[labels[p]] > 1)
                .max_by(|&a, &b| {
                    dist2(a, &centroids[labels[a]])
                        .partial_cmp(&dist2(b, &centroids[labels[b]]))
                        .unwrap()
                })
                .expect("some cluster has more than one point");
            counts[labels[far]] -= 1;
            labels[far] = c;
            counts[c] = 1;
            changed = true;
        }

        for (ci, c) in centroids.iter_mut().enumerate() {
            c.fill(0.0);
            for p in 0..n {
                if labels[p] == ci {
                    for d in 0..dim {
                        c[d] += points[p * dim + d];
                    }
                }
            }
            for d in c.iter_mut() {
                *d /= counts[ci] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Renumber clusters so cluster ids ascend with their smallest member index.
fn canonical_relabel(labels: &[usize], m: usize) -> ClusterAssignment {
    let mut remap = vec![usize::MAX; m];
    let mut next = 0;
    for &l in labels {
        if remap[l] == usize::MAX {
            remap[l] = next;
            next += 1;
        }
    }
    ClusterAssignment {
        m,
        label: labels.iter().map(|&l| remap[l]).collect(),
    }
}
