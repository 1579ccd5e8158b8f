use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::Result;
use crate::protopnet::{predict, Model};
use crate::tensor::Tensor;

use super::codec::{compress_decompress, CodecConfig};

/// One protocol-eligible test image: its compressed version `x̄` is
/// classified correctly, and `l` is the top prototype on `x̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub image_id: usize,
    pub class: usize,
    pub prototype: usize,
    pub score_compressed: f64,
    pub score_clean: f64,
    /// 1-based rank of `prototype` among all pooled scores on the clean image.
    pub rank_on_clean: usize,
    pub predicted_compressed: usize,
    pub predicted_clean: usize,
}

impl ConsistencyRecord {
    /// `(s(x̄) − s(x)) / s(x̄)`
    pub fn relative_drop(&self) -> f64 {
        (self.score_compressed - self.score_clean) / self.score_compressed
    }

    pub fn top1_changed(&self) -> bool {
        self.rank_on_clean != 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub count: usize,
    pub median_relative_drop: f64,
    pub mean_relative_drop: f64,
    pub top1_change_fraction: f64,
}

/// 1-based rank of `index` under descending score, lower index first on ties.
fn rank_of(scores: &[f64], index: usize) -> usize {
    let s = scores[index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < index))
        .count()
}

/// Runs the compressed-versus-clean protocol over test images of the
/// corrupted classes. `x` is the clean image and `x̄` its codec output;
/// images whose `x̄` is misclassified are skipped.
pub fn consistency_experiment(
    model: &Model,
    test: &[LabeledImage],
    corrupted_classes: &[usize],
    codec: &CodecConfig,
) -> Result<Vec<ConsistencyRecord>> {
    let eligible: Vec<&LabeledImage> = test.iter().filter(|i| corrupted_classes.contains(&i.label)).collect();
    let records: Vec<Option<ConsistencyRecord>> = eligible
        .par_iter()
        .map(|img| -> Result<Option<ConsistencyRecord>> {
            let clean = img.clean_image();
            let compressed = compress_decompress(clean, codec)?;
            let on_compressed = predict(model, &compressed)?;
            if on_compressed.classification.class != img.label {
                return Ok(None);
            }
            let on_clean = predict(model, clean)?;
            let l = crate::tensor::argmax(&on_compressed.pooled.scores);
            Ok(Some(ConsistencyRecord {
                image_id: img.id,
                class: img.label,
                prototype: l,
                score_compressed: on_compressed.pooled.scores[l],
                score_clean: on_clean.pooled.scores[l],
                rank_on_clean: rank_of(&on_clean.pooled.scores, l),
                predicted_compressed: on_compressed.classification.class,
                predicted_clean: on_clean.classification.class,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(records.into_iter().flatten().collect())
}

/// Median and mean relative drop plus the top-1 change fraction. An empty
/// input gives NaN statistics.
pub fn summarize(records: &[ConsistencyRecord]) -> ConsistencySummary {
    let mut drops: Vec<f64> = records.iter().map(ConsistencyRecord::relative_drop).collect();
    drops.sort_by(f64::total_cmp);
    let n = drops.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => drops[n / 2],
        _ => 0.5 * (drops[n / 2 - 1] + drops[n / 2]),
    };
    ConsistencySummary {
        count: n,
        median_relative_drop: median,
        mean_relative_drop: if n == 0 {
            f64::NAN
        } else {
            drops.iter().sum::<f64>() / n as f64
        },
        top1_change_fraction: if n == 0 {
            f64::NAN
        } else {
            records.iter().filter(|r| r.top1_changed()).count() as f64 / n as f64
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub prototype: usize,
    pub score_compressed: f64,
    pub score_clean: f64,
}

/// Paired pooled scores of the strongest prototypes, ranked once on the
/// compressed image and once on the clean image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub ranked_on_compressed: Vec<HistogramEntry>,
    pub ranked_on_clean: Vec<HistogramEntry>,
}

fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// `n` is clamped to the number of prototypes.
pub fn top_similarity_histogram(
    model: &Model,
    compressed: &Tensor,
    clean: &Tensor,
    n: usize,
) -> Result<SimilarityHistogram> {
    let a = predict(model, compressed)?.pooled.scores;
    let b = predict(model, clean)?.pooled.scores;
    let entries = |order: Vec<usize>| {
        order
            .into_iter()
            .map(|l| HistogramEntry {
                prototype: l,
                score_compressed: a[l],
                score_clean: b[l],
            })
            .collect()
    };
    let n = n.min(a.len());
    Ok(SimilarityHistogram {
        ranked_on_compressed: entries(top_n(&a, n)),
        ranked_on_clean: entries(top_n(&b, n)),
    })
}
