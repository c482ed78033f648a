//! 2D embedding of per-material latents (UMAP: fuzzy kNN graph, spectral layout,
//! stochastic optimization of the cross entropy) with kernel-based forward and
//! inverse maps so that points in the plane can be dragged back into latent space.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae_model::LatentCode;

pub const MIN_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub seed: u64,
    /// Fractional margin around the bounding box inside which queries are not
    /// reported as extrapolated.
    pub extrapolation_margin: f64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: 500,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            seed: 0,
            extrapolation_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub config: ManifoldConfig,
    pub names: Vec<String>,
    pub latents: Vec<Vec<f64>>,
    pub embedding: Vec<[f64; 2]>,
    /// Low-dimensional kernel `1 / (1 + a d^(2b))`.
    pub a: f64,
    pub b: f64,
    /// Per-point distance to the nearest neighbor and smooth-kNN bandwidth.
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InverseResult {
    pub latent: LatentCode,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSample {
    pub row: usize,
    pub col: usize,
    pub point: [f64; 2],
    pub latent: LatentCode,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices and distances of the `k` nearest points to `q` (ties broken by index).
fn knn(points: &[Vec<f64>], q: &[f64], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, p)| (i, dist(p, q)))
        .collect();
    d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    d.truncate(k);
    d
}

/// `rho` and `sigma` such that `sum_j exp(-(d_j - rho) / sigma) = log2(k)`.
fn smooth_knn(dists: &[f64]) -> (f64, f64) {
    let k = dists.len();
    let target = (k as f64).log2();
    let rho = dists.iter().copied().find(|d| *d > 0.0).unwrap_or(0.0);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut mid = 1.0;
    for _ in 0..64 {
        let psum: f64 = dists
            .iter()
            .map(|d| {
                let r = d - rho;
                if r > 0.0 { (-r / mid).exp() } else { 1.0 }
            })
            .sum();
        if (psum - target).abs() < 1e-5 {
            break;
        }
        if psum > target {
            hi = mid;
            mid = 0.5 * (lo + hi);
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
        }
    }
    let mean = dists.iter().sum::<f64>() / k.max(1) as f64;
    (rho, mid.max(1e-3 * mean).max(1e-12))
}

/// Fits `a`, `b` of `1 / (1 + a x^(2b))` to the target curve set by `min_dist` and
/// `spread` (Levenberg-Marquardt on 300 samples over `[0, 3 spread]`).
pub fn fit_ab(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let residuals = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                (f - y) * (f - y)
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut cost = residuals(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let f = 1.0 / den;
            let da = -p / (den * den);
            let db = -a * p * 2.0 * x.ln() / (den * den);
            let r = f - y;
            let j = [da, db];
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let m = [
            [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
            [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let sa = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let sb = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
        let (na, nb) = (a + sa, b + sb);
        let nc = if na > 0.0 && nb > 0.0 { residuals(na, nb) } else { f64::INFINITY };
        if nc < cost {
            let done = (cost - nc) < 1e-15 * cost.max(1e-300);
            a = na;
            b = nb;
            cost = nc;
            lambda *= 0.3;
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// Fuzzy-union symmetrized membership graph as (i, j, weight) with i < j.
/// Symmetric edge list with per-point `rho` and `sigma`.
type FuzzyGraph = (Vec<(usize, usize, f64)>, Vec<f64>, Vec<f64>);

fn fuzzy_graph(latents: &[Vec<f64>], k: usize) -> FuzzyGraph {
    let n = latents.len();
    let mut w = vec![0.0; n * n];
    let mut rhos = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for (i, p) in latents.iter().enumerate() {
        let nn = knn(latents, p, k, Some(i));
        let ds: Vec<f64> = nn.iter().map(|x| x.1).collect();
        let (rho, sigma) = smooth_knn(&ds);
        for (j, d) in nn {
            w[i * n + j] = (-(d - rho).max(0.0) / sigma).exp();
        }
        rhos.push(rho);
        sigmas.push(sigma);
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (w[i * n + j], w[j * n + i]);
            let s = a + b - a * b;
            if s > 0.0 {
                edges.push((i, j, s));
            }
        }
    }
    (edges, rhos, sigmas)
}

/// Eigenvectors 2 and 3 of the normalized graph Laplacian, scaled to `[-10, 10]`.
fn spectral_init(n: usize, edges: &[(usize, usize, f64)], rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for &(i, j, w) in edges {
        adj[(i, j)] = w;
        adj[(j, i)] = w;
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                lap[(i, j)] -= adj[(i, j)] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let mut coords: Vec<[f64; 2]> = (0..n)
        .map(|i| [eig.eigenvectors[(i, order[1])], eig.eigenvectors[(i, order[2])]])
        .collect();
    let max = coords
        .iter()
        .flat_map(|c| c.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if !(max > 1e-12) || !max.is_finite() {
        return (0..n)
            .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
            .collect();
    }
    for c in &mut coords {
        for v in c.iter_mut() {
            *v = *v * 10.0 / max + rng.random_range(-1e-4..1e-4);
        }
    }
    coords
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

fn optimize_layout(
    emb: &mut [[f64; 2]],
    edges: &[(usize, usize, f64)],
    a: f64,
    b: f64,
    cfg: &ManifoldConfig,
    rng: &mut ChaCha8Rng,
) {
    let n = emb.len();
    let wmax = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let kept: Vec<(usize, usize, f64)> = edges
        .iter()
        .copied()
        .filter(|e| e.2 >= wmax / cfg.n_epochs as f64)
        .map(|(i, j, w)| (i, j, wmax / w))
        .collect();
    let neg_rate = cfg.negative_sample_rate as f64;
    let mut next_sample: Vec<f64> = kept.iter().map(|e| e.2).collect();
    let mut next_negative: Vec<f64> = kept.iter().map(|e| e.2 / neg_rate).collect();
    for epoch in 0..cfg.n_epochs {
        let alpha = cfg.learning_rate * (1.0 - epoch as f64 / cfg.n_epochs as f64);
        let ep = epoch as f64;
        for (e, &(i, j, period)) in kept.iter().enumerate() {
            if next_sample[e] > ep {
                continue;
            }
            let (head, tail) = (i, j);
            let d2 = (emb[head][0] - emb[tail][0]).powi(2) + (emb[head][1] - emb[tail][1]).powi(2);
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..2 {
                    let g = clip(coef * (emb[head][c] - emb[tail][c])) * alpha;
                    emb[head][c] += g;
                    emb[tail][c] -= g;
                }
            }
            next_sample[e] += period;
            let neg_period = period / neg_rate;
            let n_neg = ((ep - next_negative[e]) / neg_period).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                if other == head {
                    continue;
                }
                let d2 = (emb[head][0] - emb[other][0]).powi(2)
                    + (emb[head][1] - emb[other][1]).powi(2);
                let coef = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)))
                } else {
                    0.0
                };
                for c in 0..2 {
                    let g = if coef > 0.0 { clip(coef * (emb[head][c] - emb[other][c])) } else { 4.0 };
                    emb[head][c] += g * alpha;
                }
            }
            next_negative[e] += n_neg as f64 * neg_period;
        }
    }
}

/// Fits the embedding. Requires at least [`MIN_POINTS`] latents of equal length.
pub fn fit_manifold(
    names: Vec<String>,
    latents: Vec<Vec<f64>>,
    config: ManifoldConfig,
) -> Result<ManifoldModel> {
    let n = latents.len();
    if n < MIN_POINTS {
        return Err(Error::Precondition(format!(
            "manifold fitting needs at least {MIN_POINTS} latents, got {n}"
        )));
    }
    if names.len() != n {
        return Err(Error::Precondition("names and latents differ in length".into()));
    }
    let dim = latents[0].len();
    if dim == 0 || latents.iter().any(|l| l.len() != dim || l.iter().any(|v| !v.is_finite())) {
        return Err(Error::Precondition("latents must be finite and of equal length".into()));
    }
    if config.n_neighbors < 2 || config.n_epochs == 0 || !(config.min_dist >= 0.0) || !(config.spread > 0.0) {
        return Err(Error::Config(format!("invalid manifold config {config:?}")));
    }
    let k = config.n_neighbors.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (edges, rho, sigma) = fuzzy_graph(&latents, k);
    let (a, b) = fit_ab(config.spread, config.min_dist);
    let mut embedding = spectral_init(n, &edges, &mut rng);
    optimize_layout(&mut embedding, &edges, a, b, &config, &mut rng);
    Ok(ManifoldModel {
        config,
        names,
        latents,
        embedding,
        a,
        b,
        rho,
        sigma,
    })
}

impl ManifoldModel {
    fn k(&self) -> usize {
        self.config.n_neighbors.min(self.latents.len() - 1)
    }

    /// `[xmin, ymin, xmax, ymax]` of the fitted embedding.
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &self.embedding {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }

    pub fn is_extrapolated(&self, point: [f64; 2]) -> bool {
        let [x0, y0, x1, y1] = self.bounds();
        let mx = self.config.extrapolation_margin * (x1 - x0);
        let my = self.config.extrapolation_margin * (y1 - y0);
        !(point[0] >= x0 - mx && point[0] <= x1 + mx && point[1] >= y0 - my && point[1] <= y1 + my)
    }

    /// Embeds a latent. Training latents map to their fitted positions; other points
    /// to the membership-weighted mean of their nearest training neighbors.
    pub fn forward(&self, latent: &[f64]) -> Result<[f64; 2]> {
        self.check_dim(latent.len())?;
        if let Some(i) = self.latents.iter().position(|l| l.as_slice() == latent) {
            return Ok(self.embedding[i]);
        }
        let nn = knn(&self.latents, latent, self.k(), None);
        let ds: Vec<f64> = nn.iter().map(|x| x.1).collect();
        let (rho, sigma) = smooth_knn(&ds);
        let mut acc = [0.0; 2];
        let mut wsum = 0.0;
        for (i, d) in nn {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            acc[0] += w * self.embedding[i][0];
            acc[1] += w * self.embedding[i][1];
            wsum += w;
        }
        Ok([acc[0] / wsum, acc[1] / wsum])
    }

    /// Maps a point of the plane back to latent space by inverse-distance weighting
    /// (power 2) of the latents of the nearest embedded points. Exact at fitted points.
    pub fn inverse(&self, point: [f64; 2]) -> Result<InverseResult> {
        self.inverse_excluding(point, None)
    }

    fn inverse_excluding(&self, point: [f64; 2], skip: Option<usize>) -> Result<InverseResult> {
        if !point.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("point must be finite".into()));
        }
        let pts: Vec<Vec<f64>> = self.embedding.iter().map(|p| p.to_vec()).collect();
        let nn = knn(&pts, &point, self.k(), skip);
        let latent = if nn[0].1 == 0.0 {
            self.latents[nn[0].0].clone()
        } else {
            let mut acc = vec![0.0; self.latents[0].len()];
            let mut wsum = 0.0;
            for (i, d) in nn {
                let w = 1.0 / (d * d);
                for (a, l) in acc.iter_mut().zip(&self.latents[i]) {
                    *a += w * l;
                }
                wsum += w;
            }
            acc.iter_mut().for_each(|a| *a /= wsum);
            acc
        };
        Ok(InverseResult {
            latent: LatentCode(latent),
            extrapolated: self.is_extrapolated(point),
        })
    }

    /// `rows x cols` points spanning the bounding box (row 0 at the top, i.e. max y),
    /// each mapped through [`Self::inverse`]. Row-major.
    pub fn sample_grid(&self, rows: usize, cols: usize) -> Result<Vec<GridSample>> {
        if rows < 2 || cols < 2 {
            return Err(Error::Precondition("grid needs at least 2 rows and 2 columns".into()));
        }
        let [x0, y0, x1, y1] = self.bounds();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let y = if r == rows - 1 { y0 } else { y1 - r as f64 * (y1 - y0) / (rows - 1) as f64 };
            for c in 0..cols {
                let x = if c == cols - 1 { x1 } else { x0 + c as f64 * (x1 - x0) / (cols - 1) as f64 };
                out.push(GridSample {
                    row: r,
                    col: c,
                    point: [x, y],
                    latent: self.inverse([x, y])?.latent,
                });
            }
        }
        Ok(out)
    }

    /// RMS over training points of `|inverse(forward(mu)) - mu|`.
    pub fn round_trip_rms(&self) -> Result<f64> {
        let mut sum = 0.0;
        for l in &self.latents {
            let back = self.inverse(self.forward(l)?)?.latent;
            sum += dist(&back.0, l).powi(2);
        }
        Ok((sum / self.latents.len() as f64).sqrt())
    }

    /// Like [`Self::round_trip_rms`], but each point is reconstructed from its
    /// neighbors only; measures how well the plane interpolates between materials.
    pub fn leave_one_out_rms(&self) -> Result<f64> {
        let mut sum = 0.0;
        for (i, l) in self.latents.iter().enumerate() {
            let back = self.inverse_excluding(self.embedding[i], Some(i))?.latent;
            sum += dist(&back.0, l).powi(2);
        }
        Ok((sum / self.latents.len() as f64).sqrt())
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.latents[0].len() {
            return Err(Error::Precondition(format!(
                "latent must have length {}, got {n}",
                self.latents[0].len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: ManifoldModel = serde_json::from_slice(&fs::read(path)?)?;
        if m.latents.len() < MIN_POINTS || m.embedding.len() != m.latents.len() {
            return Err(Error::Format("manifold file is inconsistent".into()));
        }
        Ok(m)
    }
}
