//! Density-based clustering (DBSCAN) with Euclidean distance.
//!
//! A point is core when at least `min_pts` points, itself included, lie
//! within `eps`. Clusters grow from core points; points reachable from no core
//! point are noise.

use crate::error::{Error, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster id per point, `None` for noise. Clusters are numbered in order of
/// their first core point.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if min_pts == 0 {
        return Err(Error::InvalidArgument("min_pts must be at least 1".into()));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| dist2(&points[i], &points[j]) <= eps2)
            .collect()
    };

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seeds = neighbors(start);
        if seeds.len() < min_pts {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        label[start] = Some(cluster);
        let mut queue = seeds;
        while let Some(q) = queue.pop() {
            if label[q].is_none() {
                label[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nq = neighbors(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
    }
    Ok(label)
}

/// Indices of noise points.
pub fn dbscan_outliers(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<usize>> {
    Ok(dbscan(points, eps, min_pts)?
        .into_iter()
        .enumerate()
        .filter_map(|(i, l)| l.is_none().then_some(i))
        .collect())
}
