//! K-means codebook: the unit ↔ vector mappings, k-NN perturbation and
//! synthetic structured codebooks.
//!
//! `embed` maps unit ids to centroid rows, `quantize` maps vectors back to the
//! nearest centroid. Nearest-neighbour search is exact and exhaustive, in
//! double precision, with ties resolved to the lowest unit index.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{invalid, Error, Result};
use crate::seed::{self, Rng};

/// Paper-scale embedding dimension of the K-means space.
pub const PAPER_DIM: usize = 768;
/// Paper-scale number of K-means clusters.
pub const PAPER_CLUSTERS: usize = 1000;

/// Desk-scale structured codebook defaults.
pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_PER_CLASS: usize = 10;
pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_S_META: f64 = 4.0;
pub const DEFAULT_S_INTRA: f64 = 1.5;

/// A set of `K` centroids in `R^D`, optionally labelled with a semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f64>,
    meta_labels: Option<Vec<usize>>,
}

impl Codebook {
    /// Builds a codebook, checking that every centroid is finite and that the
    /// rows are pairwise distinct.
    pub fn new(centroids: Array2<f64>, meta_labels: Option<Vec<usize>>) -> Result<Self> {
        let (k, d) = centroids.dim();
        if k == 0 || d == 0 {
            return invalid("codebook needs K >= 1 and D >= 1");
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return invalid("codebook centroids must be finite");
        }
        if let Some(labels) = &meta_labels {
            if labels.len() != k {
                return invalid(format!("meta_labels has {} entries, expected {k}", labels.len()));
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; classes];
            for &l in labels {
                seen[l] = true;
            }
            if seen.iter().any(|s| !s) {
                return invalid("every meta class in [0, C) needs at least one unit");
            }
        }
        let cb = Self { centroids, meta_labels };
        if cb.min_centroid_gap() <= 0.0 {
            return invalid("codebook centroids must be pairwise distinct");
        }
        Ok(cb)
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    pub fn centroid(&self, unit: usize) -> ArrayView1<'_, f64> {
        self.centroids.row(unit)
    }

    pub fn meta_labels(&self) -> Option<&[usize]> {
        self.meta_labels.as_deref()
    }

    /// Number of meta classes (0 when the codebook is unlabelled).
    pub fn num_classes(&self) -> usize {
        self.meta_labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub(crate) fn require_meta(&self) -> Result<&[usize]> {
        match self.meta_labels.as_deref() {
            Some(l) => Ok(l),
            None => invalid("codebook has no meta_labels"),
        }
    }

    /// Unit ids belonging to each meta class.
    pub fn class_members(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.require_meta()?;
        let mut members = vec![Vec::new(); self.num_classes()];
        for (u, &c) in labels.iter().enumerate() {
            members[c].push(u);
        }
        Ok(members)
    }

    /// Maps a unit sequence to meta labels.
    pub fn meta_of(&self, units: &[usize]) -> Result<Vec<usize>> {
        let labels = self.require_meta()?;
        self.check_units(units)?;
        Ok(units.iter().map(|&u| labels[u]).collect())
    }

    /// Smallest pairwise L2 distance between centroids (infinite when K = 1).
    pub fn min_centroid_gap(&self) -> f64 {
        let k = self.len();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                best = best.min(sq_dist(self.centroids.row(i), self.centroids.row(j)).sqrt());
            }
        }
        best
    }

    pub fn check_units(&self, units: &[usize]) -> Result<()> {
        match units.iter().find(|&&u| u >= self.len()) {
            Some(u) => invalid(format!("unit {u} out of range for K = {}", self.len())),
            None => Ok(()),
        }
    }

    /// `g`: row i of the result is the centroid of `units[i]`.
    pub fn embed(&self, units: &[usize]) -> Result<Array2<f64>> {
        self.check_units(units)?;
        Ok(self.centroids.select(Axis(0), units))
    }

    /// `g⁻¹`: index of the L2-nearest centroid for every row of `vectors`.
    pub fn quantize(&self, vectors: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if vectors.ncols() != self.dim() {
            return invalid(format!(
                "vectors have {} columns, codebook dimension is {}",
                vectors.ncols(),
                self.dim()
            ));
        }
        Ok(vectors.outer_iter().map(|row| self.nearest(row)).collect())
    }

    /// Nearest centroid to a single vector; ties go to the lowest index.
    pub fn nearest(&self, v: ArrayView1<'_, f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (u, c) in self.centroids.outer_iter().enumerate() {
            let d = sq_dist(v, c);
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        best
    }

    /// The `k` nearest centroids of centroid `unit`, itself included, ordered
    /// by distance then index.
    pub fn neighbours(&self, unit: usize, k: usize) -> Vec<usize> {
        let c = self.centroids.row(unit);
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .outer_iter()
            .enumerate()
            .map(|(u, row)| (sq_dist(c, row), u))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(k).map(|(_, u)| u).collect()
    }

    /// Replaces every unit by a uniformly chosen member of its `k` nearest
    /// centroids.
    pub fn knn_perturb(&self, units: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
        if k == 0 || k > self.len() {
            return invalid(format!("k = {k} must lie in [1, {}]", self.len()));
        }
        self.check_units(units)?;
        let mut rng = seed::rng(seed);
        let mut cache: Vec<Option<Vec<usize>>> = vec![None; self.len()];
        Ok(units
            .iter()
            .map(|&u| {
                let nn = cache[u].get_or_insert_with(|| self.neighbours(u, k));
                nn[rng.gen_range(0..k)]
            })
            .collect())
    }

    /// Serializes to the versioned JSON codebook format. Floats are written
    /// with 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{{\"version\":1,\"K\":{},\"D\":{},\"centroids\":[", self.len(), self.dim());
        for (i, row) in self.centroids.outer_iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push('[');
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v:.16e}");
            }
            s.push(']');
        }
        s.push_str("],\"meta_labels\":");
        match &self.meta_labels {
            None => s.push_str("null"),
            Some(labels) => {
                s.push('[');
                for (i, l) in labels.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{l}");
                }
                s.push(']');
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            version: u32,
            #[serde(rename = "K")]
            k: usize,
            #[serde(rename = "D")]
            d: usize,
            centroids: Vec<Vec<f64>>,
            meta_labels: Option<Vec<usize>>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.version != 1 {
            return invalid(format!("unsupported codebook version {}", raw.version));
        }
        if raw.centroids.len() != raw.k || raw.centroids.iter().any(|r| r.len() != raw.d) {
            return invalid("centroid matrix does not match declared K x D");
        }
        let flat: Vec<f64> = raw.centroids.into_iter().flatten().collect();
        let centroids = Array2::from_shape_vec((raw.k, raw.d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(centroids, raw.meta_labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of [`fit_kmeans`]: the codebook plus the within-cluster sum of
/// squares after every assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Clusters that become empty are re-seeded to the point farthest from its
/// assigned centroid.
pub fn fit_kmeans(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let (m, d) = points.dim();
    if k == 0 || m < k {
        return invalid(format!("need at least K = {k} points, got {m}"));
    }
    if max_iters == 0 {
        return invalid("max_iters must be >= 1");
    }
    if points.iter().any(|v| !v.is_finite()) {
        return invalid("points must be finite");
    }
    let mut rng = seed::rng(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng)?;

    let mut assign = vec![usize::MAX; m];
    let mut objective = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        let mut changed = false;
        let mut cost = vec![0.0; m];
        for (i, p) in points.outer_iter().enumerate() {
            let (best, best_d) = nearest_row(centroids.view(), p);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            cost[i] = best_d;
        }
        objective.push(cost.iter().sum());
        if !changed {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &p);
            counts[assign[i]] += 1;
        }
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
                continue;
            }
            // Empty cluster: move it onto the worst-served point.
            let far = (0..m)
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
                .expect("m >= k leaves an untaken point");
            taken[far] = true;
            cost[far] = 0.0;
            centroids.row_mut(c).assign(&points.row(far));
        }
    }
    let codebook = Codebook::new(centroids, None)?;
    Ok(KMeansFit { codebook, objective })
}

fn nearest_row(centroids: ArrayView2<'_, f64>, p: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.outer_iter().enumerate() {
        let dist = sq_dist(p, row);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(points: ArrayView2<'_, f64>, k: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    let (m, d) = points.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..m);
    centroids.row_mut(0).assign(&points.row(first));
    let mut dist: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return invalid(format!("fewer than K = {k} distinct points"));
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = m - 1;
        for (i, &w) in dist.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // Guard against rounding landing on a zero-weight tail point.
        if dist[pick] == 0.0 {
            pick = dist.iter().rposition(|&w| w > 0.0).expect("total > 0");
        }
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, points.row(pick)));
        }
    }
    Ok(centroids)
}

/// Samples a codebook with semantic structure: `classes` means drawn at scale
/// `s_meta`, then `per_class` centroids at scale `s_intra` around each mean.
/// Unit `u` belongs to class `u / per_class`.
pub fn make_structured_codebook(
    classes: usize,
    per_class: usize,
    dim: usize,
    s_meta: f64,
    s_intra: f64,
    seed: u64,
) -> Result<Codebook> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return invalid("need classes >= 2, per_class >= 1, dim >= 1");
    }
    if !(s_meta > 0.0 && s_intra > 0.0) {
        return invalid("scales must be positive");
    }
    if s_intra >= s_meta {
        return invalid("s_meta must exceed s_intra");
    }
    let labels: Vec<usize> = (0..classes * per_class).map(|u| u / per_class).collect();
    let mut attempt_seed = seed;
    for attempt in 0u32.. {
        let mut rng = seed::rng(attempt_seed);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| s_meta * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let centroids = Array2::from_shape_fn((classes * per_class, dim), |(u, j)| {
            means[u / per_class][j] + s_intra * rng.sample::<f64, _>(StandardNormal)
        });
        match Codebook::new(centroids, Some(labels.clone())) {
            Ok(cb) => return Ok(cb),
            Err(_) if attempt < 16 => {
                attempt_seed = seed::sub_seed(seed, &format!("codebook-retry-{attempt}"));
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

/// The desk-scale default structured codebook (K = 100, D = 16).
pub fn default_codebook(seed: u64) -> Result<Codebook> {
    make_structured_codebook(
        DEFAULT_CLASSES,
        DEFAULT_PER_CLASS,
        DEFAULT_DIM,
        DEFAULT_S_META,
        DEFAULT_S_INTRA,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_point() -> Codebook {
        Codebook::new(array![[0.0, 0.0], [10.0, 10.0]], None).unwrap()
    }

    #[test]
    fn embed_is_lookup() {
        let cb = two_point();
        assert_eq!(cb.embed(&[1]).unwrap(), array![[10.0, 10.0]]);
        assert_eq!(cb.embed(&[0, 0, 1]).unwrap(), array![[0.0, 0.0], [0.0, 0.0], [10.0, 10.0]]);
        assert!(cb.embed(&[2]).is_err());
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let cb = two_point();
        assert_eq!(cb.quantize(array![[1.0, 1.0]].view()).unwrap(), vec![0]);
        assert_eq!(cb.quantize(array![[5.0, 5.0]].view()).unwrap(), vec![0]);
        assert!(cb.quantize(array![[1.0, 1.0, 1.0]].view()).is_err());
    }

    #[test]
    fn rejects_duplicate_centroids() {
        assert!(Codebook::new(array![[1.0, 2.0], [1.0, 2.0]], None).is_err());
        assert!(Codebook::new(array![[0.0], [1.0]], Some(vec![0, 2])).is_err());
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut pts = Vec::new();
        for _ in 0..4 {
            pts.extend([0.0, 0.0]);
            pts.extend([10.0, 10.0]);
        }
        let pts = Array2::from_shape_vec((8, 2), pts).unwrap();
        let fit = fit_kmeans(pts.view(), 2, 10, 3).unwrap();
        let mut rows: Vec<Vec<f64>> = fit.codebook.centroids().outer_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
    }

    #[test]
    fn kmeans_k_equals_m() {
        let pts = array![[0.0, 1.0], [3.0, -1.0], [7.5, 2.0], [-4.0, 0.5]];
        let fit = fit_kmeans(pts.view(), 4, 5, 11).unwrap();
        for p in pts.outer_iter() {
            let u = fit.codebook.nearest(p);
            assert_eq!(fit.codebook.centroid(u), p);
        }
    }

    #[test]
    fn kmeans_errors() {
        let pts = array![[0.0, 1.0], [3.0, -1.0]];
        assert!(fit_kmeans(pts.view(), 3, 5, 0).is_err());
        assert!(fit_kmeans(pts.view(), 2, 0, 0).is_err());
        let bad = array![[0.0, f64::NAN], [3.0, -1.0]];
        assert!(fit_kmeans(bad.view(), 1, 5, 0).is_err());
        let dup = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(fit_kmeans(dup.view(), 2, 5, 0).is_err());
    }

    #[test]
    fn knn_perturb_k1_identity_and_range() {
        let cb = default_codebook(1).unwrap();
        let x: Vec<usize> = (0..100).collect();
        assert_eq!(cb.knn_perturb(&x, 1, 5).unwrap(), x);
        assert!(cb.knn_perturb(&x, 0, 5).is_err());
        assert!(cb.knn_perturb(&x, 101, 5).is_err());
    }

    #[test]
    fn structured_small() {
        let cb = make_structured_codebook(2, 1, 4, 1.0, 0.1, 0).unwrap();
        assert_eq!(cb.len(), 2);
        assert_eq!(cb.meta_labels().unwrap(), &[0, 1]);
        assert!(make_structured_codebook(2, 1, 4, 0.0, 0.1, 0).is_err());
        assert!(make_structured_codebook(2, 1, 4, 1.0, -0.1, 0).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let cb = default_codebook(3).unwrap();
        let back = Codebook::from_json(&cb.to_json()).unwrap();
        assert_eq!(cb, back);
        let unlabeled = two_point();
        assert_eq!(Codebook::from_json(&unlabeled.to_json()).unwrap(), unlabeled);
    }
}
