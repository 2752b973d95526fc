//! k-means codebook over target feature vectors and a chunked lookup
//! vocoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::lookup;
use crate::numerics::{ParamSet, Tensor};
use crate::{Error, Result};

pub const PREFIX: &str = "cb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Number of codes.
    pub codes: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves further than this.
    pub tol: f64,
    /// Independent k-means runs; the lowest-inertia one is kept.
    pub restarts: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codes: 16,
            max_iter: 100,
            tol: 1e-9,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[codes, dim]`.
    pub entries: Tensor,
    /// Time per code, equal to the input frame hop.
    pub hop: f64,
    /// Largest point-to-centroid distance over the fitting set.
    pub max_fit_distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids`, lowest index on ties.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn distinct_rows(points: &Tensor) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<u64>> = (0..points.rows())
        .map(|i| points.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.into_iter()
        .map(|r| r.into_iter().map(f64::from_bits).collect())
        .collect()
}

fn kmeans_pp(points: &[Vec<f64>], codes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < codes {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from `centroids`; returns the inertia.
fn lloyd(points: &[Vec<f64>], centroids: &mut [Vec<f64>], cfg: &QuantizerConfig) -> f64 {
    let dim = points[0].len();
    let mut assign = vec![0; points.len()];
    for _ in 0..cfg.max_iter {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..centroids.len() {
            let next = if counts[c] == 0 {
                // re-seed from the point worst served by its centroid
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                assign[far] = c;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            moved = moved.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if moved <= cfg.tol {
            break;
        }
    }
    points.iter().map(|p| nearest(centroids, p).1).sum()
}

/// Fit a codebook of `cfg.codes` entries to the rows of `points`.
pub fn fit_codebook(points: &Tensor, cfg: &QuantizerConfig, hop: f64, seed: u64) -> Result<Codebook> {
    if cfg.codes == 0 || cfg.restarts == 0 {
        return Err(Error::Config("codebook needs at least one code and one restart".into()));
    }
    if points.rank() != 2 {
        return Err(Error::dims("fit_codebook", points.shape(), &[0, 0]));
    }
    let distinct = distinct_rows(points);
    if distinct.len() < cfg.codes {
        return Err(Error::contract(format!(
            "{} distinct points for {} codes",
            distinct.len(),
            cfg.codes
        )));
    }
    let all: Vec<Vec<f64>> = (0..points.rows()).map(|i| points.row(i).to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..cfg.restarts {
        let mut centroids = kmeans_pp(&distinct, cfg.codes, &mut rng);
        let inertia = lloyd(&all, &mut centroids, cfg);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centroids));
        }
    }
    let (_, centroids) = best.expect("at least one restart");
    let max_fit_distance = all
        .iter()
        .map(|p| nearest(&centroids, p).1.sqrt())
        .fold(0.0, f64::max);
    Ok(Codebook {
        entries: Tensor::from_rows(&centroids)?,
        hop,
        max_fit_distance,
    })
}

impl Codebook {
    pub fn codes(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn quantize(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::dims("quantize", &[x.len()], &[self.dim()]));
        }
        let mut best = (0, f64::INFINITY);
        for i in 0..self.codes() {
            let d = sq_dist(self.entries.row(i), x);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// Code of every row of `features`.
    pub fn quantize_rows(&self, features: &Tensor) -> Result<Vec<usize>> {
        (0..features.rows()).map(|i| self.quantize(features.row(i))).collect()
    }

    pub fn dequantize(&self, codes: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(codes.len() * self.dim());
        for &c in codes {
            if c >= self.codes() {
                return Err(Error::Index {
                    what: "code",
                    index: c,
                    len: self.codes(),
                });
            }
            data.extend_from_slice(self.entries.row(c));
        }
        Tensor::new(vec![codes.len(), self.dim()], data)
    }

    /// Store as `cb.entries`, `cb.hop` and `cb.max_fit`.
    pub fn write_into(&self, set: &mut ParamSet) -> Result<()> {
        set.insert(format!("{PREFIX}.entries"), self.entries.clone())?;
        set.insert(format!("{PREFIX}.hop"), Tensor::vector(vec![self.hop]))?;
        set.insert(format!("{PREFIX}.max_fit"), Tensor::vector(vec![self.max_fit_distance]))?;
        Ok(())
    }

    pub fn read_from(set: &ParamSet) -> Result<Self> {
        let name = format!("{PREFIX}.entries");
        let entries = set
            .by_name(&name)
            .ok_or_else(|| Error::contract(format!("checkpoint is missing {name}")))?
            .clone();
        if entries.rank() != 2 {
            return Err(Error::contract(format!("{name} must be a matrix")));
        }
        let hop = set.get(lookup(set, &format!("{PREFIX}.hop"), &[1])?).item();
        let max_fit_distance = set.get(lookup(set, &format!("{PREFIX}.max_fit"), &[1])?).item();
        Ok(Self {
            entries,
            hop,
            max_fit_distance,
        })
    }
}

/// Buffers codes and releases dequantized features `chunk_size` codes at a
/// time.
#[derive(Debug, Clone)]
pub struct ChunkVocoder {
    chunk_size: usize,
    pending: Vec<usize>,
}

impl ChunkVocoder {
    pub fn new(chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::contract("chunk_size must be at least 1"));
        }
        Ok(Self {
            chunk_size,
            pending: Vec::with_capacity(chunk_size),
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    pub fn push(&mut self, cb: &Codebook, code: usize) -> Result<Option<Tensor>> {
        if code >= cb.codes() {
            return Err(Error::Index {
                what: "code",
                index: code,
                len: cb.codes(),
            });
        }
        self.pending.push(code);
        if self.pending.len() < self.chunk_size {
            return Ok(None);
        }
        let chunk = cb.dequantize(&self.pending)?;
        self.pending.clear();
        Ok(Some(chunk))
    }

    /// Flush a short final chunk, if any codes are pending.
    pub fn finish(&mut self, cb: &Codebook) -> Result<Option<Tensor>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let chunk = cb.dequantize(&self.pending)?;
        self.pending.clear();
        Ok(Some(chunk))
    }
}

/// Whole-stream chunking: the chunks [`ChunkVocoder`] would emit.
pub fn chunk_vocode(cb: &Codebook, codes: &[usize], chunk_size: usize) -> Result<Vec<Tensor>> {
    let mut voc = ChunkVocoder::new(chunk_size)?;
    let mut out = Vec::new();
    for &c in codes {
        out.extend(voc.push(cb, c)?);
    }
    out.extend(voc.finish(cb)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn cfg(codes: usize) -> QuantizerConfig {
        QuantizerConfig {
            codes,
            ..Default::default()
        }
    }

    fn book(rows: &[Vec<f64>]) -> Codebook {
        Codebook {
            entries: Tensor::from_rows(rows).unwrap(),
            hop: 1.0,
            max_fit_distance: 0.0,
        }
    }

    fn concat(chunks: &[Tensor], dim: usize) -> Tensor {
        let data: Vec<f64> = chunks.iter().flat_map(|c| c.data().to_vec()).collect();
        let rows = data.len() / dim;
        Tensor::new(vec![rows, dim], data).unwrap()
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![10.0 * (i % 3) as f64, 10.0 * (i / 3) as f64, 5.0 * i as f64])
            .collect();
        let mut rows = Vec::new();
        for _ in 0..40 {
            for m in &means {
                rows.push(
                    m.iter()
                        .map(|v| v + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let cb = fit_codebook(&Tensor::from_rows(&rows).unwrap(), &cfg(6), 1.0, 7).unwrap();
        for m in &means {
            let c = cb.quantize(m).unwrap();
            assert!(sq_dist(cb.entries.row(c), m).sqrt() < 0.1, "{m:?}");
        }
    }

    #[test]
    fn exact_fit_returns_the_points() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 3.0], vec![0.0, 1.0]];
        let cb = fit_codebook(&Tensor::from_rows(&pts).unwrap(), &cfg(3), 1.0, 0).unwrap();
        let mut got: Vec<Vec<f64>> = (0..3).map(|i| cb.entries.row(i).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![vec![-1.0, 3.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        assert_eq!(cb.max_fit_distance, 0.0);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(fit_codebook(&pts, &cfg(3), 1.0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn fit_is_deterministic() {
        let pts = Tensor::randn(&[200, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = fit_codebook(&pts, &cfg(8), 1.0, 11).unwrap();
        let b = fit_codebook(&pts, &cfg(8), 1.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entries_are_distinct() {
        let pts = Tensor::randn(&[60, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let cb = fit_codebook(&pts, &cfg(16), 1.0, 2).unwrap();
        assert_eq!(distinct_rows(&cb.entries).len(), 16);
    }

    #[test]
    fn quantize_ties_and_fixed_points() {
        let cb = book(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(cb.quantize(&[1.0, 0.0]).unwrap(), 0);
        assert_eq!(cb.quantize(&[1.0, 1.0]).unwrap(), 0);
        assert_eq!(cb.quantize(&[1.5, 1.0]).unwrap(), 1);
        for i in 0..3 {
            assert_eq!(cb.quantize(cb.entries.row(i)).unwrap(), i);
        }
        let round = cb.dequantize(&[2, 0, 1]).unwrap();
        assert_eq!(cb.quantize_rows(&round).unwrap(), vec![2, 0, 1]);
        assert!(matches!(cb.dequantize(&[3]), Err(Error::Index { .. })));
        assert!(matches!(cb.quantize(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fit_distance_bounds_training_error() {
        let pts = Tensor::randn(&[120, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let cb = fit_codebook(&pts, &cfg(5), 1.0, 9).unwrap();
        for i in 0..pts.rows() {
            let c = cb.quantize(pts.row(i)).unwrap();
            assert!(sq_dist(cb.entries.row(c), pts.row(i)).sqrt() <= cb.max_fit_distance);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cb = book(&[vec![0.5, 1.5], vec![-2.0, 0.25]]);
        let mut set = ParamSet::new();
        cb.write_into(&mut set).unwrap();
        let back = ParamSet::from_bytes(&set.to_bytes(), std::path::Path::new("mem")).unwrap();
        assert_eq!(Codebook::read_from(&back).unwrap(), cb);
    }

    #[test]
    fn chunking_examples() {
        let cb = book(&[vec![0.0], vec![1.0], vec![2.0]]);
        let codes = [2, 0, 1, 1, 2];
        let offline = cb.dequantize(&codes).unwrap();
        let one = chunk_vocode(&cb, &codes, 9).unwrap();
        assert_eq!(one, vec![offline.clone()]);
        let singles = chunk_vocode(&cb, &codes, 1).unwrap();
        assert_eq!(singles.len(), 5);
        let threes = chunk_vocode(&cb, &codes, 3).unwrap();
        assert_eq!(threes.iter().map(Tensor::rows).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(concat(&threes, 1), offline);
        assert!(ChunkVocoder::new(0).is_err());
    }

    proptest! {
        #[test]
        fn nearest_matches_linear_scan(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 3)) {
            let cb_rows = Tensor::randn(&[7, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let cb = Codebook { entries: cb_rows, hop: 1.0, max_fit_distance: 0.0 };
            let dists: Vec<f64> = (0..7)
                .map(|i| (0..3).map(|d| (cb.entries.row(i)[d] - x[d]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&d| d == min).unwrap();
            prop_assert_eq!(cb.quantize(&x).unwrap(), want);
        }

        #[test]
        fn chunks_concatenate_to_offline(
            codes in prop::collection::vec(0usize..4, 1..40),
            chunk in 1usize..12,
        ) {
            let cb = book(&[vec![0.1, 1.0], vec![0.2, -1.0], vec![3.0, 0.0], vec![-0.5, 0.5]]);
            let chunks = chunk_vocode(&cb, &codes, chunk).unwrap();
            prop_assert!(chunks.iter().take(chunks.len() - 1).all(|c| c.rows() == chunk));
            prop_assert_eq!(concat(&chunks, 2), cb.dequantize(&codes).unwrap());
        }
    }
}
