//! Exhaustive retrieval evaluation: mAP and rank-k accuracy, pairwise
//! distance-distribution summaries, and the margin suggestion derived from
//! them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::numerics::{Embedding, RngState};

/// The k values reported in every rank-k table.
pub const RANK_KS: [usize; 4] = [1, 2, 4, 8];

/// Histogram bin count for distance distributions, over the unit-sphere
/// distance range [0, 2].
pub const HISTOGRAM_BINS: usize = 50;

/// Database side of an evaluation: unit embeddings with class labels.
/// Ranking ties are broken by insertion order, so results are reproducible.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    embeddings: Vec<Embedding>,
    labels: Vec<u32>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn new(embeddings: Vec<Embedding>, labels: Vec<u32>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::BadSpec { context: "retrieval index needs at least one item".into() });
        }
        if embeddings.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: format!("{} embeddings, {} labels", embeddings.len(), labels.len()),
            });
        }
        let dim = embeddings[0].dim();
        if embeddings.iter().any(|e| e.dim() != dim) {
            return Err(Error::ShapeMismatch { context: "mixed embedding dimensions in index".into() });
        }
        Ok(Self { embeddings, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn relevant_count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Retrieval quality over a query set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Mean of the per-query average precisions.
    pub map: f64,
    /// Fraction of queries with a same-class item among the k nearest.
    pub rank_k: BTreeMap<usize, f64>,
    pub per_query_ap: Vec<f64>,
    pub query_count: usize,
}

/// Average precision of one ranked relevance list:
/// mean over the relevant ranks of precision-at-that-rank, divided by the
/// total number of relevant items (raw, uninterpolated).
pub fn average_precision(ranked_relevance: &[bool], total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::NoRelevant { class: u32::MAX });
    }
    let ones = ranked_relevance.iter().filter(|r| **r).count();
    if ones > total_relevant {
        return Err(Error::BadSpec {
            context: format!("{ones} relevant results but only {total_relevant} relevant items exist"),
        });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

/// Evaluate queries against a database index by exhaustive ranking on
/// ascending Euclidean distance.
///
/// Queries are assumed absent from the database (disjoint query/database
/// contract); a query whose class has no database item is a hard error
/// rather than a silent zero.
pub fn evaluate(index: &RetrievalIndex, queries: &[(Embedding, u32)]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut per_query_ap = Vec::with_capacity(queries.len());
    let mut rank_hits: BTreeMap<usize, usize> = RANK_KS.iter().map(|&k| (k, 0)).collect();

    for (embedding, class) in queries {
        if embedding.dim() != index.dim() {
            return Err(Error::DimMismatch { expected: index.dim(), got: embedding.dim() });
        }
        let total_relevant = index.relevant_count(*class);
        if total_relevant == 0 {
            return Err(Error::NoRelevant { class: *class });
        }

        let mut order: Vec<(f64, usize)> = index
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (embedding.distance(e).expect("index dims are uniform"), i))
            .collect();
        // ascending distance, ties by insertion order
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));

        let relevance: Vec<bool> = order.iter().map(|&(_, i)| index.labels[i] == *class).collect();
        per_query_ap.push(average_precision(&relevance, total_relevant)?);

        for &k in &RANK_KS {
            if relevance.iter().take(k).any(|r| *r) {
                *rank_hits.get_mut(&k).unwrap() += 1;
            }
        }
    }

    let query_count = queries.len();
    let map = per_query_ap.iter().sum::<f64>() / query_count as f64;
    let rank_k: BTreeMap<usize, f64> = rank_hits
        .into_iter()
        .map(|(k, hits)| (k, hits as f64 / query_count as f64))
        .collect();

    // rank-k accuracy is non-decreasing in k, always
    let accs: Vec<f64> = rank_k.values().copied().collect();
    for pair in accs.windows(2) {
        assert!(pair[0] <= pair[1] + 1e-15, "rank-k accuracy must be non-decreasing");
    }

    Ok(EvalReport { map, rank_k, per_query_ap, query_count })
}

/// Which side of the pair population a summary describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// Moments and a fixed-range histogram of sampled pair distances.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceDistributionSummary {
    pub polarity: Polarity,
    pub sample_count: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Counts over [`HISTOGRAM_BINS`] uniform bins spanning [0, 2].
    pub histogram: Vec<u64>,
}

impl DistanceDistributionSummary {
    /// (bin_left, bin_right) edges of bin `i`.
    pub fn bin_edges(i: usize) -> (f64, f64) {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        (i as f64 * width, (i + 1) as f64 * width)
    }

    /// CSV rows `bin_left,bin_right,count,polarity`, no header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (i, count) in self.histogram.iter().enumerate() {
            let (left, right) = Self::bin_edges(i);
            out.push_str(&format!("{left},{right},{count},{}\n", self.polarity.as_str()));
        }
        out
    }
}

fn summarize(polarity: Polarity, distances: &[f64]) -> DistanceDistributionSummary {
    let n = distances.len();
    let mean = distances.iter().sum::<f64>() / n as f64;
    let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &d in distances {
        let bin = ((d / 2.0) * HISTOGRAM_BINS as f64) as usize;
        histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    DistanceDistributionSummary { polarity, sample_count: n, mean, std_dev: var.sqrt(), histogram }
}

/// Sample `sample_pairs` positive and `sample_pairs` negative labeled pairs
/// uniformly (rejection sampling over unordered index pairs, exact) and
/// summarize their embedding distances.
pub fn distance_distributions(
    embeddings: &[Embedding],
    labels: &[u32],
    sample_pairs: usize,
    rng: &mut RngState,
) -> Result<(DistanceDistributionSummary, DistanceDistributionSummary)> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: format!("{} embeddings, {} labels", embeddings.len(), labels.len()),
        });
    }
    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *per_class.entry(l).or_default() += 1;
    }
    if per_class.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    if let Some((&class, _)) = per_class.iter().find(|(_, &n)| n < 2) {
        return Err(Error::SingletonClass { class });
    }
    if sample_pairs == 0 {
        return Err(Error::BadSpec { context: "sample_pairs must be >= 1".into() });
    }

    let n = embeddings.len();
    let mut positive = Vec::with_capacity(sample_pairs);
    let mut negative = Vec::with_capacity(sample_pairs);
    while positive.len() < sample_pairs || negative.len() < sample_pairs {
        let i = rng.index(n);
        let mut j = rng.index(n - 1);
        if j >= i {
            j += 1;
        }
        let same = labels[i] == labels[j];
        if same && positive.len() < sample_pairs {
            positive.push(embeddings[i].distance(&embeddings[j])?);
        } else if !same && negative.len() < sample_pairs {
            negative.push(embeddings[i].distance(&embeddings[j])?);
        }
    }

    Ok((summarize(Polarity::Positive, &positive), summarize(Polarity::Negative, &negative)))
}

/// Starting margins from the two distance distributions: (alpha1, alpha2) =
/// (positive mean, negative mean). Fails when the distributions are
/// inverted or coincident, i.e. the model separates classes no better than
/// chance.
pub fn suggest_margins(
    pos: &DistanceDistributionSummary,
    neg: &DistanceDistributionSummary,
) -> Result<MarginConfig> {
    if !(pos.mean < neg.mean) {
        return Err(Error::InvertedDistributions { pos_mean: pos.mean, neg_mean: neg.mean });
    }
    MarginConfig::new(pos.mean, neg.mean.min(2.0))
}
