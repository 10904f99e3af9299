/// Distance between cluster centroids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// `1 - cos` between renormalized means of unit-length members.
    Cosine,
    /// Euclidean distance between plain means.
    Euclidean,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn centroid(sum: &[f64], count: usize, metric: Metric) -> Vec<f64> {
    match metric {
        Metric::Cosine => unit(sum),
        Metric::Euclidean => sum.iter().map(|s| s / count as f64).collect(),
    }
}

fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Centroid-linkage agglomerative clustering. Merges the closest pair until
/// the smallest distance exceeds `threshold`, then moves members of clusters
/// smaller than `min_cluster_size` to the nearest remaining cluster. Labels
/// are numbered by first member.
pub fn ahc_centroid(
    embeddings: &[Vec<f64>],
    threshold: f64,
    min_cluster_size: usize,
    metric: Metric,
) -> Vec<usize> {
    let n = embeddings.len();
    if n == 0 {
        return Vec::new();
    }
    let points: Vec<Vec<f64>> = match metric {
        Metric::Cosine => embeddings.iter().map(|e| unit(e)).collect(),
        Metric::Euclidean => embeddings.to_vec(),
    };
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut sums = points.clone();
    let mut cents: Vec<Vec<f64>> = points.clone();
    let mut alive = vec![true; n];
    let mut dist = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            dist[i][j] = distance(&cents[i], &cents[j], metric);
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| alive[i]) {
            for j in (i + 1..n).filter(|&j| alive[j]) {
                if best.is_none_or(|(d, _, _)| dist[i][j] < d) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        if d > threshold {
            break;
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        let sj = std::mem::take(&mut sums[j]);
        for (a, b) in sums[i].iter_mut().zip(&sj) {
            *a += b;
        }
        alive[j] = false;
        cents[i] = centroid(&sums[i], members[i].len(), metric);
        for k in (0..n).filter(|&k| alive[k] && k != i) {
            let d = distance(&cents[i], &cents[k], metric);
            if k < i {
                dist[k][i] = d;
            } else {
                dist[i][k] = d;
            }
        }
    }
    let clusters: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let large: Vec<usize> = clusters
        .iter()
        .copied()
        .filter(|&c| members[c].len() >= min_cluster_size)
        .collect();
    let mut assign = vec![0usize; n];
    for &c in &clusters {
        for &m in &members[c] {
            assign[m] = c;
        }
    }
    if !large.is_empty() {
        for &c in clusters.iter().filter(|c| !large.contains(c)) {
            for &m in &members[c] {
                let target = large
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        distance(&points[m], &cents[a], metric)
                            .total_cmp(&distance(&points[m], &cents[b], metric))
                    })
                    .expect("non-empty");
                assign[m] = target;
            }
        }
    }
    // Renumber by first appearance.
    let mut map: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    assign
        .into_iter()
        .map(|c| {
            *map[c].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}
