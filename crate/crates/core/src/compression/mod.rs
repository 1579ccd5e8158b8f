//! Lossy codec and the artefact-consistency experiment.

mod codec;
mod experiment;

pub use codec::{
    compress_decompress, dct8x8, psnr, scaled_quant_tables, CodecConfig, DctDirection, QuantTables, BASE_CHROMA,
    BASE_LUMA, BLOCK,
};
pub use experiment::{
    consistency_experiment, summarize, top_similarity_histogram, ConsistencyRecord, ConsistencySummary, HistogramEntry,
    SimilarityHistogram,
};

use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, tags};

/// Passes every train and test image of a seeded random `fraction` of the
/// classes through the codec. Originals are kept in `LabeledImage::clean`.
pub fn corrupt_dataset(dataset: &Dataset, fraction: f64, quality: u8, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if dataset.classes < 2 {
        return Err(Error::InvalidArgument("corruption needs at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0,1]")));
    }
    let count = (fraction * dataset.classes as f64).round() as usize;
    let mut classes: Vec<usize> = (0..dataset.classes).collect();
    classes.shuffle(&mut stream(seed, tags::CORRUPT, 0));
    let mut chosen: Vec<usize> = classes.into_iter().take(count).collect();
    chosen.sort_unstable();

    let codec = CodecConfig::new(quality);
    let mut out = dataset.clone();
    for img in out.train.iter_mut().chain(out.test.iter_mut()) {
        if chosen.binary_search(&img.label).is_ok() {
            let clean = img.clean.take().unwrap_or_else(|| img.image.clone());
            img.image = compress_decompress(&clean, &codec)?;
            img.clean = Some(clean);
        }
    }
    let mut all = out.corrupted_classes.clone();
    all.extend(&chosen);
    all.sort_unstable();
    all.dedup();
    out.corrupted_classes = all;
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SynthConfig};

    fn ds() -> Dataset {
        generate(&SynthConfig {
            classes: 10,
            train_per_class: 2,
            test_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn half_of_ten_classes() {
        let (out, classes) = corrupt_dataset(&ds(), 0.5, 20, 3).unwrap();
        assert_eq!(classes.len(), 5);
        assert_eq!(out.corrupted_classes, classes);
        for img in out.train.iter().chain(&out.test) {
            assert_eq!(img.clean.is_some(), classes.contains(&img.label));
        }
    }

    #[test]
    fn fraction_zero_is_identity() {
        let d = ds();
        let (out, classes) = corrupt_dataset(&d, 0.0, 20, 3).unwrap();
        assert!(classes.is_empty());
        assert_eq!(out, d);
    }

    #[test]
    fn fraction_one_changes_every_image() {
        let d = ds();
        let (out, _) = corrupt_dataset(&d, 1.0, 20, 3).unwrap();
        for (a, b) in out.train.iter().chain(&out.test).zip(d.train.iter().chain(&d.test)) {
            assert!(a.image.max_abs_diff(&b.image) > 0.0);
            assert_eq!(a.clean.as_ref(), Some(&b.image));
        }
    }

    #[test]
    fn single_class_rejected() {
        let mut d = ds();
        d.classes = 1;
        assert!(corrupt_dataset(&d, 0.5, 20, 1).is_err());
    }
}
