//! Average-linkage (UPGMA) agglomerative clustering on Euclidean distances.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Columns,
}

/// Leaves are `0..n`; the cluster formed by merge `i` gets id `n + i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTree {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl ClusterTree {
    /// Leaves in dendrogram order (left subtree first).
    pub fn leaf_order(&self) -> Vec<usize> {
        let Some(root) = self.merges.len().checked_sub(1) else {
            return (0..self.n_leaves).collect();
        };
        let mut out = Vec::with_capacity(self.n_leaves);
        let mut stack = vec![self.n_leaves + root];
        while let Some(id) = stack.pop() {
            if id < self.n_leaves {
                out.push(id);
            } else {
                let m = self.merges[id - self.n_leaves];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    }

    /// Leaf membership of the two clusters joined by the final merge.
    pub fn top_split(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let root = self.merges.last()?;
        Some((self.members(root.left), self.members(root.right)))
    }

    pub fn members(&self, id: usize) -> Vec<usize> {
        if id < self.n_leaves {
            return vec![id];
        }
        let m = self.merges[id - self.n_leaves];
        let mut v = self.members(m.left);
        v.extend(self.members(m.right));
        v.sort_unstable();
        v
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// UPGMA over points. Among equally close pairs the one with the lowest
/// (smaller id, larger id) is merged first.
pub fn upgma(points: &[Vec<f64>]) -> ClusterTree {
    let n = points.len();
    // distances between active clusters, indexed by cluster id
    let total = if n == 0 { 0 } else { 2 * n - 1 };
    let mut dist = vec![vec![f64::NAN; total]; total];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = euclidean(&points[i], &points[j]);
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                if dist[a][b] < best.0 {
                    best = (dist[a][b], a, b);
                }
            }
        }
        let (height, a, b) = best;
        let new = n + merges.len();
        size[new] = size[a] + size[b];
        active.retain(|&c| c != a && c != b);
        for &c in &active {
            let d = (size[a] as f64 * dist[a][c] + size[b] as f64 * dist[b][c]) / size[new] as f64;
            dist[new][c] = d;
            dist[c][new] = d;
        }
        active.push(new);
        merges.push(Merge {
            left: a,
            right: b,
            height,
            size: size[new],
        });
    }
    ClusterTree { n_leaves: n, merges }
}

/// Clusters the rows or columns of a row-major matrix; missing values count
/// as zero.
pub fn hcluster(values: &[f64], n_rows: usize, n_cols: usize, axis: Axis) -> ClusterTree {
    let at = |r: usize, c: usize| {
        let v = values[r * n_cols + c];
        if v.is_nan() {
            0.0
        } else {
            v
        }
    };
    let points: Vec<Vec<f64>> = match axis {
        Axis::Rows => (0..n_rows).map(|r| (0..n_cols).map(|c| at(r, c)).collect()).collect(),
        Axis::Columns => (0..n_cols).map(|c| (0..n_rows).map(|r| at(r, c)).collect()).collect(),
    };
    upgma(&points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_merge_first_at_zero() {
        let t = upgma(&[vec![0.0, 1.0], vec![5.0, 5.0], vec![0.0, 1.0]]);
        assert_eq!((t.merges[0].left, t.merges[0].right), (0, 2));
        assert_eq!(t.merges[0].height, 0.0);
        assert_eq!(t.merges.len(), 2);
        assert_eq!(t.leaf_order().len(), 3);
    }
}
