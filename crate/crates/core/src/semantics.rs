//! Semantic grouping of candidate steps: cosine distance over step
//! embeddings and average-linkage agglomerative clustering cut at a fixed
//! distance threshold.

use serde::{Deserialize, Serialize};

use crate::backend::{with_retry, EmbedRequest, Embedder};
use crate::error::{invalid, Error, Result};
use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(invalid("embedding has no dimensions"));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(invalid("embedding has non-finite components"));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(invalid("zero embedding vector"));
        }
        Ok(Embedding { vector, norm })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub fn cosine_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let dot: f64 = u.vector.iter().zip(&v.vector).map(|(a, b)| a * b).sum();
    let cos = (dot / (u.norm * v.norm)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster index per input position; labels are dense and numbered in
    /// order of first appearance.
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    /// Every item in its own cluster.
    pub fn singletons(n: usize) -> Self {
        ClusterAssignment {
            labels: (0..n).collect(),
            num_clusters: n,
        }
    }

    /// Relabel arbitrary group keys densely by first appearance.
    pub fn from_groups(groups: &[usize]) -> Self {
        let mut seen: Vec<(usize, usize)> = Vec::new();
        let mut labels = Vec::with_capacity(groups.len());
        for &g in groups {
            let label = match seen.iter().find(|(k, _)| *k == g) {
                Some(&(_, l)) => l,
                None => {
                    seen.push((g, seen.len()));
                    seen.len() - 1
                }
            };
            labels.push(label);
        }
        ClusterAssignment {
            labels,
            num_clusters: seen.len(),
        }
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == cluster)
            .collect()
    }
}

/// Average-linkage clustering. Merging stops once the closest pair of
/// clusters is at distance `threshold` or more; equal distances merge the
/// pair with the lexicographically smaller (first member, first member).
pub fn agglomerative_cluster(
    embeddings: &[Embedding],
    threshold: f64,
) -> Result<ClusterAssignment> {
    if embeddings.is_empty() {
        return Err(invalid("nothing to cluster"));
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(invalid(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let n = embeddings.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&embeddings[i], &embeddings[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    // Slot i represents the cluster whose smallest member is i.
    let mut alive = vec![true; n];
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !alive[j] {
                    continue;
                }
                let d = dist[i * n + j];
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        if d >= threshold {
            break;
        }
        // Lance-Williams update for average linkage.
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let merged = (si * dist[i * n + k] + sj * dist[j * n + k]) / (si + sj);
                dist[i * n + k] = merged;
                dist[k * n + i] = merged;
            }
        }
        size[i] += size[j];
        alive[j] = false;
        parent[j] = i;
    }

    let roots: Vec<usize> = (0..n)
        .map(|mut x| {
            while parent[x] != x {
                x = parent[x];
            }
            x
        })
        .collect();
    Ok(ClusterAssignment::from_groups(&roots))
}

/// Embed the last step of each candidate leaf in one batched provider call.
/// A transport failure is retried once.
pub fn embed_last_steps(
    leaves: &[(NodeId, String)],
    provider: &dyn Embedder,
) -> Result<Vec<(NodeId, Embedding)>> {
    if leaves.is_empty() {
        return Ok(Vec::new());
    }
    let req = EmbedRequest {
        texts: leaves.iter().map(|(_, t)| t.clone()).collect(),
    };
    let resp = with_retry(|| provider.embed(&req))?;
    if resp.embeddings.len() != leaves.len() {
        return Err(Error::Backend(crate::error::BackendError::Schema(format!(
            "expected {} embeddings, got {}",
            leaves.len(),
            resp.embeddings.len()
        ))));
    }
    let mut out = Vec::with_capacity(leaves.len());
    for ((id, _), v) in leaves.iter().zip(resp.embeddings) {
        let e = Embedding::new(v)
            .map_err(|e| Error::Backend(crate::error::BackendError::Schema(e.to_string())))?;
        out.push((*id, e));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Embedding> {
        (0..n)
            .map(|_| {
                e(&(0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>())
            })
            .collect()
    }

    #[test]
    fn distance_cases() {
        let u = e(&[1.0, 2.0, 3.0]);
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&e(&[1.0, -2.0]), &e(&[-1.0, 2.0])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_errors() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
        assert!(cosine_distance(&e(&[1.0]), &e(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn tiny_threshold_keeps_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10, 5);
        assert_eq!(agglomerative_cluster(&pts, 1e-9).unwrap().num_clusters, 10);
    }

    #[test]
    fn large_threshold_merges_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 10, 5);
        assert_eq!(
            agglomerative_cluster(&pts, 2.0 + 1e-9)
                .unwrap()
                .num_clusters,
            1
        );
        assert_eq!(agglomerative_cluster(&pts, 3.0).unwrap().num_clusters, 1);
    }

    #[test]
    fn duplicates_merge_orthogonal_stays() {
        let pts = [e(&[1.0, 0.0]), e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        let c = agglomerative_cluster(&pts, 0.5).unwrap();
        assert_eq!(c.num_clusters, 2);
        assert_eq!(c.labels, vec![0, 0, 1]);
    }

    /// Naive dendrogram: recompute every cluster-pair average distance from
    /// the original points at every merge.
    fn naive(points: &[Embedding], threshold: f64) -> Vec<usize> {
        let n = points.len();
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let mut s = 0.0;
                    for &i in &clusters[a] {
                        for &j in &clusters[b] {
                            s += cosine_distance(&points[i], &points[j]).unwrap();
                        }
                    }
                    let d = s / (clusters[a].len() * clusters[b].len()) as f64;
                    if best.is_none_or(|(bd, _, _)| d < bd - 1e-12) {
                        best = Some((d, a, b));
                    }
                }
            }
            match best {
                Some((d, a, b)) if d < threshold => {
                    let moved = clusters.remove(b);
                    clusters[a].extend(moved);
                    clusters[a].sort_unstable();
                    clusters.sort_by_key(|c| c[0]);
                }
                _ => break,
            }
        }
        let mut group = vec![0; n];
        for c in &clusters {
            for &i in c {
                group[i] = c[0];
            }
        }
        ClusterAssignment::from_groups(&group).labels
    }

    #[test]
    fn matches_naive_dendrogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(1..=8);
            let pts = random_points(&mut rng, n, 3);
            let t = rng.random_range(0.05..1.5);
            assert_eq!(
                agglomerative_cluster(&pts, t).unwrap().labels,
                naive(&pts, t)
            );
        }
    }

    fn rand_index(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        if n < 2 {
            return 1.0;
        }
        let mut agree = 0;
        let mut total = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn permutation_invariant_up_to_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pts = random_points(&mut rng, 12, 4);
            let base = agglomerative_cluster(&pts, 0.4).unwrap();
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Embedding> = perm.iter().map(|&i| pts[i].clone()).collect();
            let c = agglomerative_cluster(&shuffled, 0.4).unwrap();
            let mut back = vec![0; pts.len()];
            for (pos, &i) in perm.iter().enumerate() {
                back[i] = c.labels[pos];
            }
            assert_eq!(rand_index(&base.labels, &back), 1.0);
        }
    }

    #[test]
    fn monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let pts = random_points(&mut rng, 15, 4);
            let mut prev = usize::MAX;
            for t in [0.01, 0.1, 0.2, 0.4, 0.8, 1.2, 2.5] {
                let k = agglomerative_cluster(&pts, t).unwrap().num_clusters;
                assert!(k <= prev);
                prev = k;
            }
        }
    }
}
