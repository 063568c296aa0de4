//! Per-identity feature subspaces and point-to-subspace projections.
//!
//! An identity is represented by the embeddings of its images (the anchors).
//! Its subspace is either the affine hull of the anchors, their mean, or their
//! convex hull. Projections are computed in Euclidean geometry and return the
//! minimising weights `alpha` together with the hull point `anchors^T alpha`.
//!
//! * affine: equality-constrained least squares, solved in closed form with a
//!   minimum-norm pseudo-inverse so rank-deficient anchor sets are fine;
//! * convex: Wolfe's minimum-norm-point algorithm on the translated anchors;
//! * center: distance to the mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HullKind {
    Affine,
    Center,
    Convex,
}

impl std::str::FromStr for HullKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(HullKind::Affine),
            "center" => Ok(HullKind::Center),
            "convex" => Ok(HullKind::Convex),
            _ => Err(Error::Config(format!("unknown hull kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHull {
    identity: String,
    kind: HullKind,
    anchors: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HullProjection {
    pub alpha: Vec<f64>,
    pub point_on_hull: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative optimality gap at which the convex solver stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 10_000,
        }
    }
}

/// Builds a hull from unit-norm embeddings.
pub fn build_hull(identity: &str, anchors: &[Embedding], kind: HullKind) -> Result<FeatureHull> {
    FeatureHull::from_points(
        identity,
        anchors.iter().map(|e| e.as_slice().to_vec()).collect(),
        kind,
    )
}

impl FeatureHull {
    /// Builds a hull from arbitrary points (no unit-norm requirement).
    pub fn from_points(identity: &str, anchors: Vec<Vec<f64>>, kind: HullKind) -> Result<Self> {
        let first = anchors
            .first()
            .ok_or_else(|| Error::precondition("a feature hull needs at least one anchor"))?;
        let d = first.len();
        if d == 0 || anchors.iter().any(|a| a.len() != d) {
            return Err(Error::precondition("anchors must share a non-zero dimension"));
        }
        let n = anchors.len() as f64;
        let mut mean = vec![0.0; d];
        for a in &anchors {
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v / n;
            }
        }
        Ok(Self {
            identity: identity.to_string(),
            kind,
            anchors,
            mean,
        })
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn kind(&self) -> HullKind {
        self.kind
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn with_kind(&self, kind: HullKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    /// Largest pairwise anchor distance.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.anchors.iter().enumerate() {
            for b in &self.anchors[i + 1..] {
                best = best.max(euclid(a, b));
            }
        }
        best
    }

    /// `anchors^T alpha`.
    pub fn combine(&self, alpha: &[f64]) -> Vec<f64> {
        // Accumulated around the mean so large affine weights do not cancel
        // against a large common offset.
        let total: f64 = alpha.iter().sum();
        let mut p: Vec<f64> = self.mean.iter().map(|m| total * m).collect();
        for (a, w) in self.anchors.iter().zip(alpha) {
            for ((pi, ai), m) in p.iter_mut().zip(a).zip(&self.mean) {
                *pi += w * (ai - m);
            }
        }
        p
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spectral data of the centred anchors: the matrix `C` (d x n) and the
/// eigenpairs of `C^T C` that lie above the rank cutoff.
///
/// The Gram eigendecomposition is used instead of an SVD of `C`: nalgebra's
/// SVD loses accuracy on rank-deficient inputs, the symmetric solver does not.
struct CentredSpectrum {
    centred: DMatrix<f64>,
    pairs: Vec<(f64, DVector<f64>)>,
}

impl CentredSpectrum {
    fn new(points: &[&[f64]], mean: &[f64]) -> Self {
        let d = mean.len();
        let n = points.len();
        let centred = DMatrix::from_fn(d, n, |r, c| points[c][r] - mean[r]);
        let eig = (centred.transpose() * &centred).symmetric_eigen();
        // Spreads below ~1e-10 of the anchor magnitude are rounding noise.
        let magnitude: f64 = points.iter().flat_map(|p| p.iter()).map(|v| v * v).sum();
        let cutoff = (eig.eigenvalues.max() * 1e-12).max(magnitude * 1e-20).max(f64::MIN_POSITIVE);
        let pairs = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > cutoff)
            .map(|(k, &l)| (l, eig.eigenvectors.column(k).into_owned()))
            .collect();
        Self { centred, pairs }
    }
}

fn mean_of(points: &[&[f64]]) -> Vec<f64> {
    let n = points.len() as f64;
    let mut mean = vec![0.0; points[0].len()];
    for p in points {
        for (m, v) in mean.iter_mut().zip(*p) {
            *m += v / n;
        }
    }
    mean
}

/// Minimum-norm weights (summing to one) of the affine-hull point nearest `q`.
///
/// Writing `alpha = 1/n + g` with the anchors centred on their mean, the
/// constraint `sum(g) = 0` holds automatically for the least-squares
/// minimum-norm solution because the all-ones vector lies in the null space
/// of the centred anchors.
fn affine_weights(points: &[&[f64]], q: &[f64]) -> Vec<f64> {
    let n = points.len();
    if n == 1 {
        return vec![1.0];
    }
    let mean = mean_of(points);
    let spec = CentredSpectrum::new(points, &mean);
    let r = DVector::from_iterator(q.len(), q.iter().zip(&mean).map(|(a, b)| a - b));
    let ctr = spec.centred.transpose() * r;
    let mut g = DVector::zeros(n);
    for (l, v) in &spec.pairs {
        g += v * (v.dot(&ctr) / l);
    }
    let drift = g.mean();
    g.iter().map(|gi| gi - drift + 1.0 / n as f64).collect()
}

/// Nearest point of the affine hull, through an orthonormal basis of the
/// centred anchors. Unlike recombining the weights this stays accurate when
/// the anchors are nearly degenerate and the weights become large.
fn affine_projection(anchors: &[Vec<f64>], mean: &[f64], q: &[f64]) -> Vec<f64> {
    let pts: Vec<&[f64]> = anchors.iter().map(Vec::as_slice).collect();
    let spec = CentredSpectrum::new(&pts, mean);
    let r = DVector::from_iterator(q.len(), q.iter().zip(mean).map(|(a, b)| a - b));
    let mut p = DVector::from_column_slice(mean);
    for (l, v) in &spec.pairs {
        let u = &spec.centred * v / l.sqrt();
        p += &u * u.dot(&r);
    }
    p.iter().copied().collect()
}

/// Wolfe's minimum-norm-point algorithm over the convex hull of `points`.
fn min_norm_point(points: &[Vec<f64>], opts: &SolverOptions) -> Result<Vec<f64>> {
    const ZERO: f64 = 1e-12;
    let n = points.len();
    let sq: Vec<f64> = points.iter().map(|p| dot(p, p)).collect();
    let scale = sq.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let start = (0..n)
        .min_by(|&a, &b| sq[a].total_cmp(&sq[b]))
        .expect("non-empty");
    let mut support = vec![start];
    let mut weights = vec![1.0];
    let mut x = points[start].clone();
    let combine = |support: &[usize], w: &[f64]| {
        let mut x = vec![0.0; points[0].len()];
        for (&s, &ws) in support.iter().zip(w) {
            for (xi, pi) in x.iter_mut().zip(&points[s]) {
                *xi += ws * pi;
            }
        }
        x
    };
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let xx = dot(&x, &x);
        let (j, xp) = (0..n)
            .map(|i| (i, dot(&points[i], &x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        residual = xx - xp;
        if residual <= opts.tolerance * scale || support.contains(&j) {
            let mut alpha = vec![0.0; n];
            for (&s, &w) in support.iter().zip(&weights) {
                alpha[s] += w;
            }
            return Ok(alpha);
        }
        support.push(j);
        weights.push(0.0);
        loop {
            let pts: Vec<&[f64]> = support.iter().map(|&s| points[s].as_slice()).collect();
            let zero = vec![0.0; points[0].len()];
            let mu = affine_weights(&pts, &zero);
            if mu.iter().all(|&m| m > ZERO) {
                weights = mu;
                break;
            }
            let theta = weights
                .iter()
                .zip(&mu)
                .filter(|(_, &m)| m <= ZERO)
                .map(|(&w, &m)| if w - m > 0.0 { w / (w - m) } else { 0.0 })
                .fold(1.0, f64::min)
                .clamp(0.0, 1.0);
            for (w, m) in weights.iter_mut().zip(&mu) {
                *w = theta * m + (1.0 - theta) * *w;
            }
            let drop = weights
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty");
            let keep: Vec<bool> = weights
                .iter()
                .enumerate()
                .map(|(i, &w)| i != drop && w > ZERO)
                .collect();
            let mut k = 0;
            support.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            let mut k = 0;
            weights.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
        }
        if !support.contains(&j) {
            // The entering point was dropped again: no further progress is possible.
            let mut alpha = vec![0.0; n];
            for (&s, &w) in support.iter().zip(&weights) {
                alpha[s] += w;
            }
            return Ok(alpha);
        }
        x = combine(&support, &weights);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual,
    })
}

/// Projects an arbitrary point onto the hull with explicit solver options.
pub fn project_point(hull: &FeatureHull, query: &[f64], opts: &SolverOptions) -> Result<HullProjection> {
    if query.len() != hull.dim() {
        return Err(Error::shape(hull.dim(), query.len()));
    }
    let alpha = match hull.kind {
        HullKind::Center => {
            let n = hull.anchors.len();
            vec![1.0 / n as f64; n]
        }
        HullKind::Affine => {
            let pts: Vec<&[f64]> = hull.anchors.iter().map(Vec::as_slice).collect();
            affine_weights(&pts, query)
        }
        HullKind::Convex => {
            let shifted: Vec<Vec<f64>> = hull
                .anchors
                .iter()
                .map(|a| a.iter().zip(query).map(|(x, y)| x - y).collect())
                .collect();
            min_norm_point(&shifted, opts)?
        }
    };
    let point_on_hull = match hull.kind {
        HullKind::Center => hull.mean.clone(),
        HullKind::Affine => affine_projection(&hull.anchors, &hull.mean, query),
        HullKind::Convex => hull.combine(&alpha),
    };
    let distance = euclid(query, &point_on_hull);
    Ok(HullProjection {
        alpha,
        point_on_hull,
        distance,
    })
}

/// Euclidean distance from `query` to the hull and the minimising weights.
pub fn hull_distance(hull: &FeatureHull, query: &Embedding) -> Result<HullProjection> {
    project_point(hull, query.as_slice(), &SolverOptions::default())
}

/// Natural KKT residual of the simplex-constrained problem at `alpha`:
/// `max_i |min(alpha_i, g_i - lambda)|` with `g` the gradient and `lambda = alpha^T g`.
pub fn kkt_residual(hull: &FeatureHull, query: &[f64], alpha: &[f64]) -> f64 {
    let p = hull.combine(alpha);
    let r: Vec<f64> = p.iter().zip(query).map(|(a, b)| a - b).collect();
    let g: Vec<f64> = hull.anchors.iter().map(|a| dot(a, &r)).collect();
    let lambda = dot(alpha, &g);
    alpha
        .iter()
        .zip(&g)
        .map(|(&a, &gi)| a.min(gi - lambda).abs())
        .fold(0.0, f64::max)
}

/// Weight range searched by the grid oracle for affine hulls.
pub const ORACLE_AFFINE_BOX: f64 = 4.0;

/// Exhaustive grid search for the hull distance, used as a verification oracle.
///
/// All but the last two weights run over a grid with step `grid_resolution`;
/// the remaining mass is split between the last two anchors by exact
/// minimisation along that segment (clamped to the feasible range). Affine
/// weights are searched inside `[-AFFINE_BOX, AFFINE_BOX]`.
pub fn oracle_hull_distance(hull: &FeatureHull, query: &[f64], grid_resolution: f64) -> Result<f64> {
    let n = hull.anchors.len();
    if n > 4 {
        return Err(Error::precondition(format!(
            "grid oracle supports at most 4 anchors, got {n}"
        )));
    }
    if query.len() != hull.dim() {
        return Err(Error::shape(hull.dim(), query.len()));
    }
    if !(grid_resolution > 0.0) {
        return Err(Error::precondition("grid resolution must be positive"));
    }
    if hull.kind == HullKind::Center {
        return Ok(euclid(query, &hull.mean));
    }
    if n == 1 {
        return Ok(euclid(query, &hull.anchors[0]));
    }
    let a = &hull.anchors;
    let (lo, hi) = match hull.kind {
        HullKind::Convex => (0.0, 1.0),
        _ => (-ORACLE_AFFINE_BOX, ORACLE_AFFINE_BOX),
    };
    let steps = ((hi - lo) / grid_resolution).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * grid_resolution).collect();
    let (u, v) = (&a[n - 2], &a[n - 1]);
    let seg: Vec<f64> = u.iter().zip(v).map(|(x, y)| x - y).collect();
    let seg_sq = dot(&seg, &seg);

    // Best distance for a fixed partial point `base` with remaining mass `rest`
    // split as t*u + (rest - t)*v.
    let line_min = |base: &[f64], rest: f64| -> f64 {
        let r: Vec<f64> = base
            .iter()
            .zip(v)
            .zip(query)
            .map(|((b, vi), qi)| b + rest * vi - qi)
            .collect();
        let (t_lo, t_hi) = match hull.kind {
            HullKind::Convex => (0.0, rest),
            _ => (lo, hi),
        };
        let t = if seg_sq > 0.0 {
            (-dot(&r, &seg) / seg_sq).clamp(t_lo, t_hi)
        } else {
            t_lo
        };
        r.iter().zip(&seg).map(|(ri, si)| (ri + t * si).powi(2)).sum::<f64>().sqrt()
    };

    let d = hull.dim();
    let mut best = f64::INFINITY;
    let mut base = vec![0.0; d];
    let mut visit = |weights: &[f64], best: &mut f64| {
        let used: f64 = weights.iter().sum();
        let rest = 1.0 - used;
        if hull.kind == HullKind::Convex && rest < -1e-12 {
            return;
        }
        base.iter_mut().for_each(|b| *b = 0.0);
        for (w, anchor) in weights.iter().zip(a) {
            for (b, x) in base.iter_mut().zip(anchor) {
                *b += w * x;
            }
        }
        *best = best.min(line_min(&base, rest.max(if hull.kind == HullKind::Convex { 0.0 } else { f64::NEG_INFINITY })));
    };
    match n {
        2 => visit(&[], &mut best),
        3 => {
            for &w0 in &grid {
                visit(&[w0], &mut best);
            }
        }
        _ => {
            for &w0 in &grid {
                for &w1 in &grid {
                    visit(&[w0, w1], &mut best);
                }
            }
        }
    }
    Ok(best)
}

/// Worst-case gap between the grid oracle and the exact distance.
pub fn oracle_error_bound(hull: &FeatureHull, grid_resolution: f64) -> f64 {
    let free = hull.anchors.len().saturating_sub(2) as f64;
    free * grid_resolution * hull.diameter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hull(points: &[&[f64]], kind: HullKind) -> FeatureHull {
        FeatureHull::from_points("k", points.iter().map(|p| p.to_vec()).collect(), kind).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Embedding::from_raw(v).unwrap().into_vec()
    }

    #[test]
    fn center_is_mean() {
        let h = hull(&[&[1.0, 0.0], &[0.0, 1.0]], HullKind::Center);
        assert_eq!(h.mean(), &[0.5, 0.5]);
        let p = project_point(&h, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(p.point_on_hull, vec![0.5, 0.5]);
        assert!((p.distance - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_anchor_degenerates_to_point() {
        for kind in [HullKind::Affine, HullKind::Convex, HullKind::Center] {
            let h = hull(&[&[0.6, 0.8]], kind);
            let p = project_point(&h, &[1.0, 0.0], &SolverOptions::default()).unwrap();
            assert_eq!(p.alpha, vec![1.0]);
            assert!((p.distance - euclid(&[0.6, 0.8], &[1.0, 0.0])).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_line_example() {
        let h = hull(&[&[1.0, 0.0], &[0.0, 1.0]], HullKind::Affine);
        let p = project_point(&h, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!((p.distance - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((p.alpha[0] - 0.5).abs() < 1e-12 && (p.alpha[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn convex_vertex_and_outside_examples() {
        let h = hull(&[&[1.0, 0.0], &[0.0, 1.0]], HullKind::Convex);
        let p = project_point(&h, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        assert!(p.distance < 1e-12);
        assert!((p.alpha[0] - 1.0).abs() < 1e-12 && p.alpha[1].abs() < 1e-12);

        // brute force over alpha in the simplex at resolution 1e-3
        let q = [-1.0, -1.0];
        let brute = (0..=1000)
            .map(|k| {
                let t = k as f64 / 1000.0;
                euclid(&q, &[t, 1.0 - t])
            })
            .fold(f64::INFINITY, f64::min);
        let p = project_point(&h, &q, &SolverOptions::default()).unwrap();
        assert!((p.distance - brute).abs() < 1e-3, "{} vs {brute}", p.distance);
    }

    #[test]
    fn duplicate_anchors_accepted() {
        let h = hull(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], HullKind::Convex);
        let p = project_point(&h, &[2.0, 2.0], &SolverOptions::default()).unwrap();
        assert!((p.distance - euclid(&[2.0, 2.0], &[0.5, 0.5])).abs() < 1e-9);
        assert!((p.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let a = project_point(&h.with_kind(HullKind::Affine), &[2.0, 2.0], &SolverOptions::default()).unwrap();
        assert!((a.distance - p.distance).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(FeatureHull::from_points("k", vec![], HullKind::Convex).is_err());
        let h = hull(&[&[1.0, 0.0]], HullKind::Convex);
        assert!(project_point(&h, &[1.0, 0.0, 0.0], &SolverOptions::default()).is_err());
        let big = hull(&[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]], HullKind::Convex);
        assert!(oracle_hull_distance(&big, &[0.0], 0.1).is_err());
        let stingy = SolverOptions {
            tolerance: 0.0,
            max_iterations: 0,
        };
        let h = hull(&[&[1.0, 0.0], &[0.0, 1.0]], HullKind::Convex);
        assert!(matches!(
            project_point(&h, &[-1.0, -1.0], &stingy),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn oracle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..=4);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
            let h = FeatureHull::from_points("k", pts.clone(), HullKind::Convex).unwrap();
            let o = oracle_hull_distance(&h, &pts[0], 0.01).unwrap();
            assert!(o <= oracle_error_bound(&h, 0.01) + 1e-12);
            let c = h.with_kind(HullKind::Center);
            let q = random_unit(&mut rng, 5);
            assert_eq!(
                oracle_hull_distance(&c, &q, 0.01).unwrap(),
                project_point(&c, &q, &SolverOptions::default()).unwrap().distance
            );
        }
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(1..=4);
            let d = rng.random_range(1..=8);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let q = random_unit(&mut rng, d);
            for kind in [HullKind::Affine, HullKind::Convex] {
                let h = FeatureHull::from_points("k", pts.clone(), kind).unwrap();
                let res = 0.01;
                let proj = project_point(&h, &q, &SolverOptions::default()).unwrap();
                let exact = proj.distance;
                let oracle = oracle_hull_distance(&h, &q, res).unwrap();
                let tol = 1e-3f64.max(oracle_error_bound(&h, res));
                // the affine grid is boxed, so it only bounds from above when
                // the optimal weights leave the box
                let inside = proj.alpha.iter().all(|a| a.abs() <= ORACLE_AFFINE_BOX);
                assert!(oracle >= exact - 1e-9, "{kind:?}: oracle {oracle} below exact {exact}");
                assert!(
                    !inside || (oracle - exact).abs() <= tol,
                    "{kind:?} n={n} d={d}: oracle {oracle} exact {exact}"
                );
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn invariants_hold(seed in 0u64..u64::MAX, n in 1usize..10, d in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let q = random_unit(&mut rng, d);
            let opts = SolverOptions::default();
            let proj = |kind| {
                let h = FeatureHull::from_points("k", pts.clone(), kind).unwrap();
                (project_point(&h, &q, &opts).unwrap(), h)
            };
            let (aff, _) = proj(HullKind::Affine);
            let (con, hc) = proj(HullKind::Convex);
            let (cen, _) = proj(HullKind::Center);
            // nesting
            proptest::prop_assert!(aff.distance <= con.distance + 1e-9);
            proptest::prop_assert!(con.distance <= cen.distance + 1e-9);
            // feasibility
            for p in [&aff, &con, &cen] {
                proptest::prop_assert!((p.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            proptest::prop_assert!(con.alpha.iter().all(|&a| (-1e-6..=1.0 + 1e-6).contains(&a)));
            // optimality certificate
            proptest::prop_assert!(kkt_residual(&hc, &q, &con.alpha) <= 1e-5);
            // translation equivariance
            let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let mq: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
            for kind in [HullKind::Affine, HullKind::Convex, HullKind::Center] {
                let h0 = FeatureHull::from_points("k", pts.clone(), kind).unwrap();
                let h1 = FeatureHull::from_points("k", moved.clone(), kind).unwrap();
                let d0 = project_point(&h0, &q, &opts).unwrap().distance;
                let d1 = project_point(&h1, &mq, &opts).unwrap().distance;
                proptest::prop_assert!((d0 - d1).abs() < 1e-9, "{:?}: {} vs {}", kind, d0, d1);
            }
        }
    }
}
