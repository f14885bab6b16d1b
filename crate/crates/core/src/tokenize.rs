//! Tokenizers: the k-means semantic quantizer, the desk-scale toy codec,
//! and the plugin traits real feature extractors and codecs implement.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::domain::{FeatureMatrix, TokenSequence, ACOUSTIC_VOCAB, SEMANTIC_VOCAB};
use crate::error::{Error, Result};
use crate::seed;

/// Waveform to frame-embedding extractor (the SSL-encoder role).
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, waveform: &[f64]) -> Result<FeatureMatrix>;

    fn dim(&self) -> usize;

    /// Encoder layer the embeddings are read from, for layered models.
    fn layer(&self) -> Option<usize> {
        None
    }
}

/// Single-codebook audio codec.
///
/// Implementations must satisfy `encode(decode(encode(x))) == encode(x)`.
pub trait Codec: Send + Sync {
    fn codebook_size(&self) -> usize;

    /// Waveform samples produced per token by `decode`.
    fn samples_per_token(&self) -> usize;

    fn feature_dim(&self) -> usize;

    fn encode(&self, waveform: &[f64]) -> Result<TokenSequence>;

    fn decode(&self, tokens: &TokenSequence) -> Result<Vec<f64>>;

    /// Continuous per-frame encoder features (the acoustic conditioning stream).
    fn frame_features(&self, waveform: &[f64]) -> Result<FeatureMatrix>;
}

// ---------------------------------------------------------------------------
// Toy codec

/// Frame-mean uniform quantizer over `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    pub frame_len: usize,
    pub levels: usize,
    pub feature_dim: usize,
}

impl Default for ToyCodec {
    fn default() -> Self {
        Self {
            frame_len: 4,
            levels: 64,
            feature_dim: 8,
        }
    }
}

impl Codec for ToyCodec {
    fn codebook_size(&self) -> usize {
        self.levels
    }

    fn samples_per_token(&self) -> usize {
        self.frame_len
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, waveform: &[f64]) -> Result<TokenSequence> {
        toy_codec_encode(waveform, self.frame_len, self.levels)
    }

    fn decode(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        toy_codec_decode(tokens, self.frame_len, self.levels)
    }

    fn frame_features(&self, waveform: &[f64]) -> Result<FeatureMatrix> {
        toy_frame_features(waveform, self.frame_len, self.feature_dim)
    }
}

/// Zero-padded frames of `frame_len` samples.
fn frames(waveform: &[f64], frame_len: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    waveform.chunks(frame_len).map(move |c| {
        let mut f = c.to_vec();
        f.resize(frame_len, 0.0);
        f
    })
}

fn check_waveform(waveform: &[f64], frame_len: usize) -> Result<()> {
    if waveform.is_empty() {
        return Err(Error::invalid("waveform", "empty waveform"));
    }
    if frame_len == 0 {
        return Err(Error::invalid("frame_len", "must be positive"));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("waveform", "non-finite sample"));
    }
    Ok(())
}

/// Bin index of `x` among `levels` uniform bins over `[-1, 1]`.
pub fn toy_bin(x: f64, levels: usize) -> u32 {
    let b = ((x + 1.0) * levels as f64 / 2.0).floor();
    b.clamp(0.0, (levels - 1) as f64) as u32
}

/// Amplitude at the center of bin `token`.
pub fn toy_bin_center(token: u32, levels: usize) -> f64 {
    -1.0 + (2.0 * f64::from(token) + 1.0) / levels as f64
}

/// One token per `frame_len` samples: the bin of the frame mean.
/// Out-of-range means clamp to the edge bins.
pub fn toy_codec_encode(waveform: &[f64], frame_len: usize, levels: usize) -> Result<TokenSequence> {
    check_waveform(waveform, frame_len)?;
    if levels < 2 {
        return Err(Error::invalid("levels", "need at least 2 levels"));
    }
    let ids = frames(waveform, frame_len)
        .map(|f| toy_bin(f.iter().sum::<f64>() / frame_len as f64, levels))
        .collect();
    Ok(TokenSequence::new(ACOUSTIC_VOCAB, ids))
}

pub fn toy_codec_decode(tokens: &TokenSequence, frame_len: usize, levels: usize) -> Result<Vec<f64>> {
    if let Some((i, &t)) = tokens
        .ids
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= levels)
    {
        return Err(Error::invalid(
            format!("tokens.ids[{i}]"),
            format!("token {t} >= levels {levels}"),
        ));
    }
    let mut out = Vec::with_capacity(tokens.len() * frame_len);
    for &t in &tokens.ids {
        out.extend(std::iter::repeat(toy_bin_center(t, levels)).take(frame_len));
    }
    Ok(out)
}

/// Per frame: mean, energy (mean square), mean first difference, then zeros
/// up to `dim`.
pub fn toy_frame_features(waveform: &[f64], frame_len: usize, dim: usize) -> Result<FeatureMatrix> {
    check_waveform(waveform, frame_len)?;
    if dim < 3 {
        return Err(Error::invalid("dim", "toy frame features need dim >= 3"));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for f in frames(waveform, frame_len) {
        let len = f.len() as f64;
        let mean = f.iter().sum::<f64>() / len;
        let energy = f.iter().map(|x| x * x).sum::<f64>() / len;
        let diff = if f.len() > 1 {
            f.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (len - 1.0)
        } else {
            0.0
        };
        values.extend([mean, energy, diff]);
        values.extend(std::iter::repeat(0.0).take(dim - 3));
        n += 1;
    }
    FeatureMatrix::new(n, dim, values)
}

// ---------------------------------------------------------------------------
// K-means quantizer

const QUANTIZER_FORMAT_VERSION: u32 = 1;

/// Nearest-centroid quantizer over frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    trained: bool,
}

impl Quantizer {
    /// Quantizer from explicit centroid rows.
    pub fn from_centroids(centroids: &FeatureMatrix) -> Result<Self> {
        centroids.validate("centroids")?;
        Ok(Self {
            k: centroids.frames(),
            dim: centroids.dim(),
            centroids: centroids.values().to_vec(),
            trained: true,
        })
    }

    /// Placeholder awaiting `fit_kmeans`; quantizing with it is an error.
    pub fn untrained(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            centroids: vec![0.0; k * dim],
            trained: false,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, x)
    }

    pub fn quantize(&self, feats: &FeatureMatrix) -> Result<TokenSequence> {
        if !self.trained {
            return Err(Error::Config("quantizer is not trained".into()));
        }
        if feats.dim() != self.dim {
            return Err(Error::Shape(format!(
                "features have dim {}, quantizer expects {}",
                feats.dim(),
                self.dim
            )));
        }
        let ids = feats.rows().map(|r| self.nearest(r).0 as u32).collect();
        Ok(TokenSequence::new(SEMANTIC_VOCAB, ids))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "format_version\t{QUANTIZER_FORMAT_VERSION}");
        let _ = writeln!(s, "k\t{}", self.k);
        let _ = writeln!(s, "dim\t{}", self.dim);
        for row in self.centroids.chunks_exact(self.dim) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{}", cells.join("\t"));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<usize> {
            let (i, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            match l.split_once('\t') {
                Some((k, v)) if k == key => v.parse().map_err(|_| err(i + 1, "bad header value")),
                _ => Err(err(i + 1, &format!("expected `{key}`"))),
            }
        };
        let version = header("format_version")?;
        if version != QUANTIZER_FORMAT_VERSION as usize {
            return Err(err(1, "unsupported format version"));
        }
        let k = header("k")?;
        let dim = header("dim")?;
        let mut centroids = Vec::with_capacity(k * dim);
        for (i, l) in lines {
            let row: std::result::Result<Vec<f64>, _> = l.split('\t').map(str::parse).collect();
            let row = row.map_err(|_| err(i + 1, "bad centroid value"))?;
            if row.len() != dim {
                return Err(err(i + 1, "centroid row has wrong width"));
            }
            centroids.extend(row);
        }
        if centroids.len() != k * dim {
            return Err(err(0, "centroid count does not match k"));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            trained: true,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Outcome of a k-means fit, with the inertia after every assignment pass.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub quantizer: Quantizer,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding under squared Euclidean distance.
pub fn fit_kmeans(
    features: &[FeatureMatrix],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Quantizer> {
    fit_kmeans_traced(features, k, seed, max_iters, tol).map(|f| f.quantizer)
}

pub fn fit_kmeans_traced(
    features: &[FeatureMatrix],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    if features.is_empty() {
        return Err(Error::invalid("features", "empty input"));
    }
    if k == 0 {
        return Err(Error::invalid("k", "need at least one cluster"));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("feature matrices disagree on dim".into()));
    }
    for (i, f) in features.iter().enumerate() {
        f.validate(&format!("features[{i}]"))?;
    }
    let points: Vec<&[f64]> = features.iter().flat_map(FeatureMatrix::rows).collect();
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::invalid(
            "features",
            format!("{} distinct frames, fewer than k = {k}", distinct.len()),
        ));
    }

    let mut rng = seed::rng(seed);
    let mut centroids = plus_plus_init(&points, k, dim, &mut rng);
    let mut assign = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(&points) {
            let (j, d) = nearest(&centroids, dim, p);
            *a = j;
            inertia += d;
        }
        history.push(inertia);
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (&j, p) in assign.iter().zip(&points) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let n = counts[j] as f64;
            let new: Vec<f64> = sums[j * dim..(j + 1) * dim].iter().map(|s| s / n).collect();
            shift = shift.max(sq_dist(&new, &centroids[j * dim..(j + 1) * dim]).sqrt());
            centroids[j * dim..(j + 1) * dim].copy_from_slice(&new);
        }
        if shift < tol {
            // Final assignment pass against the converged centroids.
            let inertia: f64 = points.iter().map(|p| nearest(&centroids, dim, p).1).sum();
            history.push(inertia);
            break;
        }
    }
    Ok(KMeansFit {
        quantizer: Quantizer {
            k,
            dim,
            centroids,
            trained: true,
        },
        inertia_history: history,
        iterations,
    })
}

fn plus_plus_init(points: &[&[f64]], k: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        // Fall back to the last positive-weight point if rounding overshoots.
        let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        let c = points[chosen];
        centroids.extend_from_slice(c);
        for (dd, p) in d2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, c));
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ACOUSTIC_VOCAB, ids.to_vec())
    }

    #[test]
    fn zero_signal_lands_in_middle_bin() {
        let t = toy_codec_encode(&[0.0; 12], 4, 8).unwrap();
        assert_eq!(t.ids, vec![4, 4, 4]);
    }

    #[test]
    fn full_scale_clamps_to_top_bin() {
        let t = toy_codec_encode(&[1.0; 8], 4, 8).unwrap();
        assert_eq!(t.ids, vec![7, 7]);
        let t = toy_codec_encode(&[-1.0; 8], 4, 8).unwrap();
        assert_eq!(t.ids, vec![0, 0]);
    }

    #[test]
    fn encode_pads_last_frame_and_rejects_empty() {
        assert_eq!(toy_codec_encode(&[0.5; 9], 4, 8).unwrap().len(), 3);
        assert!(toy_codec_encode(&[], 4, 8).is_err());
        assert!(toy_codec_encode(&[0.0], 4, 1).is_err());
    }

    #[test]
    fn decode_emits_bin_centers() {
        // Odd level count puts a bin center at exactly zero.
        assert_eq!(toy_codec_decode(&seq(&[4]), 5, 9).unwrap(), vec![0.0; 5]);
        let levels = 8;
        let w = toy_codec_decode(&seq(&[0, 7]), 2, levels).unwrap();
        let lo = -1.0 + 1.0 / levels as f64;
        let hi = 1.0 - 1.0 / levels as f64;
        assert_eq!(w, vec![lo, lo, hi, hi]);
        assert_eq!(toy_codec_decode(&seq(&[1, 2, 3]), 6, 8).unwrap().len(), 18);
        assert!(toy_codec_decode(&seq(&[8]), 2, 8).is_err());
    }

    #[test]
    fn frame_feature_laws() {
        let z = toy_frame_features(&[0.0; 10], 4, 6).unwrap();
        assert_eq!(z.frames(), 3);
        assert!(z.values().iter().all(|&v| v == 0.0));
        let c = toy_frame_features(&[0.25; 8], 4, 4).unwrap();
        for r in c.rows() {
            assert_eq!(r[0], 0.25);
            assert_eq!(r[1], 0.0625);
            assert_eq!(r[2], 0.0);
            assert_eq!(r[3], 0.0);
        }
        assert!(toy_frame_features(&[], 4, 4).is_err());
    }

    #[test]
    fn quantize_identity_and_tie_break() {
        let mut rows = vec![vec![0.0, 0.0]; 8];
        for (j, r) in rows.iter_mut().enumerate() {
            r[0] = j as f64;
        }
        // Centroids 2 and 7 made equidistant from the probe below.
        rows[2] = vec![-1.0, 5.0];
        rows[7] = vec![1.0, 5.0];
        let q = Quantizer::from_centroids(&FeatureMatrix::from_rows(&rows).unwrap()).unwrap();
        let probe = FeatureMatrix::from_rows(&[rows[5].clone(), vec![0.0, 5.0]]).unwrap();
        assert_eq!(q.quantize(&probe).unwrap().ids, vec![5, 2]);
        let bad = FeatureMatrix::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(q.quantize(&bad).is_err());
        assert!(Quantizer::untrained(2, 2).quantize(&probe).is_err());
    }

    #[test]
    fn k_distinct_points_fit_exactly() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 3.0, (i * i) as f64]).collect();
        let feats = FeatureMatrix::from_rows(&rows).unwrap();
        let fit = fit_kmeans_traced(&[feats], 6, 3, 50, 1e-9).unwrap();
        assert_eq!(*fit.inertia_history.last().unwrap(), 0.0);
        let mut cs: Vec<Vec<f64>> = (0..6).map(|j| fit.quantizer.centroid(j).to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, rows);
    }

    #[test]
    fn too_few_distinct_frames_is_an_error() {
        let feats = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(fit_kmeans(&[feats], 3, 0, 10, 1e-6).is_err());
        assert!(fit_kmeans(&[], 1, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn quantizer_file_round_trip() {
        let feats = FeatureMatrix::from_rows(&[vec![0.1, -2.0], vec![1.0 / 3.0, 7.5]]).unwrap();
        let q = Quantizer::from_centroids(&feats).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.txt");
        q.save(&path).unwrap();
        assert_eq!(Quantizer::load(&path).unwrap(), q);
    }
}
