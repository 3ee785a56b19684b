//! Distance kernels on raw inputs and embeddings.

use crate::data::{FrameSequence, ImageGrid};
use crate::error::{Error, Result};

/// Cosine distance `1 - u·v / (|u||v|)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine_generic(u, v)
}

fn cosine_generic<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine distance between vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector in cosine distance".into()));
    }
    // sqrt(x*x) == x exactly, so identical inputs give exactly 0
    Ok((1.0 - dot / (uu * vv).sqrt()).clamp(0.0, 2.0))
}

/// Per-frame cosine distances, row-major `a.len() x b.len()`.
fn frame_costs(a: &FrameSequence, b: &FrameSequence) -> Result<Vec<f64>> {
    let mut costs = Vec::with_capacity(a.len() * b.len());
    for fa in a.frames() {
        for fb in b.frames() {
            costs.push(cosine_generic(fa, fb)?);
        }
    }
    Ok(costs)
}

fn check_sequences(a: &FrameSequence, b: &FrameSequence) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyItem("DTW on an empty sequence".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "DTW between frame dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Dynamic time warping with cosine frame cost and steps (1,0), (0,1), (1,1).
///
/// Returns the smallest mean per-step cost over all warping paths from the
/// first frame pair to the last. The table is indexed by path length as well
/// as position, so the minimum is exact rather than a normalized
/// minimum-total path.
pub fn dtw_distance(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    check_sequences(a, b)?;
    let (n, m) = (a.len(), b.len());
    let costs = frame_costs(a, b)?;
    let max_len = n + m - 1;
    // best[(i*m + j) * (max_len+1) + l]: cheapest total of an l-step path ending at (i, j)
    let stride = max_len + 1;
    let mut best = vec![f64::INFINITY; n * m * stride];
    best[1] = costs[0];
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let c = costs[i * m + j];
            let here = (i * m + j) * stride;
            let lo = i.max(j) + 1;
            let hi = i + j + 1;
            for l in lo..=hi {
                let mut prev = f64::INFINITY;
                if i > 0 {
                    prev = prev.min(best[((i - 1) * m + j) * stride + l - 1]);
                }
                if j > 0 {
                    prev = prev.min(best[(i * m + j - 1) * stride + l - 1]);
                }
                if i > 0 && j > 0 {
                    prev = prev.min(best[((i - 1) * m + j - 1) * stride + l - 1]);
                }
                best[here + l] = prev + c;
            }
        }
    }
    let end = ((n - 1) * m + (m - 1)) * stride;
    let mut result = f64::INFINITY;
    for l in n.max(m)..=max_len {
        result = result.min(best[end + l] / l as f64);
    }
    Ok(result)
}

/// Cosine distance between flattened 28×28 images.
pub fn pixel_distance(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    cosine_generic(a.pixels(), b.pixels())
}

/// A distance over items of type `T`.
pub trait Metric<T: ?Sized> {
    fn distance(&self, a: &T, b: &T) -> Result<f64>;

    /// Short human-readable name recorded in manifests.
    fn descriptor(&self) -> String;
}

/// The kinds of distance the pipeline can be configured with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    CosineVectors,
    DtwSequences,
    CosinePixels,
    EmbeddingBacked,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::CosineVectors => "cosine-on-vectors",
            MetricKind::DtwSequences => "dtw-on-sequences",
            MetricKind::CosinePixels => "cosine-on-pixels",
            MetricKind::EmbeddingBacked => "embedding-backed",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CosineMetric;

impl Metric<[f64]> for CosineMetric {
    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        cosine_distance(a, b)
    }

    fn descriptor(&self) -> String {
        MetricKind::CosineVectors.name().to_string()
    }
}

impl Metric<Vec<f64>> for CosineMetric {
    fn distance(&self, a: &Vec<f64>, b: &Vec<f64>) -> Result<f64> {
        cosine_distance(a, b)
    }

    fn descriptor(&self) -> String {
        MetricKind::CosineVectors.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DtwMetric;

impl Metric<FrameSequence> for DtwMetric {
    fn distance(&self, a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
        dtw_distance(a, b)
    }

    fn descriptor(&self) -> String {
        MetricKind::DtwSequences.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PixelMetric;

impl Metric<ImageGrid> for PixelMetric {
    fn distance(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        pixel_distance(a, b)
    }

    fn descriptor(&self) -> String {
        MetricKind::CosinePixels.name().to_string()
    }
}

/// Cosine distance between the embeddings an encoder assigns to two items.
pub struct EmbeddingMetric<F> {
    encode: F,
    name: String,
}

impl<F> EmbeddingMetric<F> {
    pub fn new(name: impl Into<String>, encode: F) -> Self {
        EmbeddingMetric {
            encode,
            name: name.into(),
        }
    }
}

impl<T: ?Sized, F: Fn(&T) -> Result<Vec<f64>>> Metric<T> for EmbeddingMetric<F> {
    fn distance(&self, a: &T, b: &T) -> Result<f64> {
        cosine_distance(&(self.encode)(a)?, &(self.encode)(b)?)
    }

    fn descriptor(&self) -> String {
        format!("{}:{}", MetricKind::EmbeddingBacked.name(), self.name)
    }
}

/// Index and distance of the closest candidate; ties go to the lowest index.
pub fn nearest<'a, T, M, I>(query: &T, candidates: I, metric: &M) -> Result<(usize, f64)>
where
    T: ?Sized + 'a,
    M: Metric<T> + ?Sized,
    I: IntoIterator<Item = &'a T>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.into_iter().enumerate() {
        let d = metric.distance(query, c)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or_else(|| Error::Argument("nearest neighbour over an empty candidate list".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IMAGE_PIXELS;
    use proptest::prelude::*;

    fn seq(frames: &[&[f32]]) -> FrameSequence {
        FrameSequence::from_frames(&frames.iter().map(|f| f.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_table() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        // naive recomputation
        let (u, v) = ([1.0f64, 1.0], [1.0f64, 0.0]);
        let dot = u[0] * v[0] + u[1] * v[1];
        let expected = 1.0 - dot / ((u[0] * u[0] + u[1] * u[1]).sqrt() * 1.0);
        let got = cosine_distance(&u, &v).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.292_893_218_813_452_5).abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(cosine_distance(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn dtw_examples() {
        let a = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = seq(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 0.0);
        let x = seq(&[&[1.0, 0.0]]);
        let y = seq(&[&[0.0, 1.0]]);
        assert_eq!(dtw_distance(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn dtw_prefers_lower_mean_over_lower_total() {
        // diagonal path: costs 0 + 1 = 1 over 2 steps (mean 0.5)
        // detour path through (0,1) then (1,1): 0 + 0 + 1 = 1 over 3 steps (mean 1/3)
        let a = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = seq(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let d = dtw_distance(&a, &b).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dtw_errors() {
        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(dtw_distance(&a, &b), Err(Error::Shape(_))));
        let z = seq(&[&[0.0, 0.0]]);
        assert!(matches!(dtw_distance(&a, &z), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn pixel_examples() {
        let mut px = vec![0.0f32; IMAGE_PIXELS];
        px[3] = 0.2;
        px[400] = 0.4;
        let a = ImageGrid::new(px.clone()).unwrap();
        assert_eq!(pixel_distance(&a, &a).unwrap(), 0.0);
        let scaled = ImageGrid::new(px.iter().map(|p| p * 2.0).collect()).unwrap();
        assert!(pixel_distance(&a, &scaled).unwrap().abs() < 1e-12);

        let mut p1 = vec![0.0f32; IMAGE_PIXELS];
        p1[10] = 1.0;
        let mut p2 = vec![0.0f32; IMAGE_PIXELS];
        p2[20] = 0.5;
        let d = pixel_distance(&ImageGrid::new(p1).unwrap(), &ImageGrid::new(p2).unwrap()).unwrap();
        assert_eq!(d, 1.0);
        assert!(matches!(
            pixel_distance(&ImageGrid::zeros(), &a),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn nearest_ties_and_exact_hits() {
        let cands: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.5, 0.5],
        ];
        let (i, d) = nearest(&vec![1.0, 0.0], &cands, &CosineMetric).unwrap();
        assert_eq!((i, d), (2, 0.0));
        // candidates 1 and 4 point the same way
        let (i, _) = nearest(&vec![1.0, 1.0], &cands, &CosineMetric).unwrap();
        assert_eq!(i, 1);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(nearest(&vec![1.0], &empty, &CosineMetric).is_err());
    }

    #[test]
    fn embedding_metric_delegates_to_encoder() {
        let m = EmbeddingMetric::new("double", |x: &Vec<f64>| Ok(x.iter().map(|v| v * 2.0).collect()));
        assert_eq!(m.distance(&vec![1.0, 0.0], &vec![0.0, 3.0]).unwrap(), 1.0);
        assert!(m.descriptor().starts_with("embedding-backed"));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            u in proptest::collection::vec(-5.0f64..5.0, 1..20),
            seed in any::<u64>(),
        ) {
            let v: Vec<f64> = u.iter().enumerate()
                .map(|(i, x)| x * ((seed >> (i % 60)) & 7) as f64 - 1.5)
                .collect();
            if u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0) {
                let d1 = cosine_distance(&u, &v).unwrap();
                let d2 = cosine_distance(&v, &u).unwrap();
                prop_assert!((d1 - d2).abs() <= 1e-12);
                prop_assert!((0.0..=2.0).contains(&d1));
            }
        }

        #[test]
        fn dtw_is_symmetric(
            a in proptest::collection::vec(proptest::collection::vec(0.1f32..1.0, 3), 1..7),
            b in proptest::collection::vec(proptest::collection::vec(-1.0f32..-0.1, 3), 1..7),
        ) {
            let (a, b) = (FrameSequence::from_frames(&a).unwrap(), FrameSequence::from_frames(&b).unwrap());
            let d1 = dtw_distance(&a, &b).unwrap();
            let d2 = dtw_distance(&b, &a).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12);
            prop_assert!(d1 >= 0.0);
        }
    }
}
