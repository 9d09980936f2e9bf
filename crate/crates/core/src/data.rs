//! Datasets, synthetic task generators and label-noise injection.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgoifError};
use crate::model::Example;
use crate::snapshot::{ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 8] = b"SGOIFDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Flip uniformly to one of the other classes.
    Symmetric,
    /// Flip class `c` to `(c + 1) mod C`.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, classes: usize) -> Result<Self> {
        let p = examples.first().map_or(0, |e| e.features.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != p {
                return Err(SgoifError::DimensionMismatch {
                    expected: p,
                    got: ex.features.len(),
                });
            }
            if ex.observed_label >= classes.max(1) || ex.true_label >= classes.max(1) {
                return Err(SgoifError::Format(format!(
                    "example {i} has a label outside 0..{classes}"
                )));
            }
        }
        Ok(Self { examples, classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    /// Ground-truth noise indicator per example.
    pub fn noise_indicator(&self) -> Vec<bool> {
        self.examples.iter().map(Example::is_noisy).collect()
    }

    pub fn noisy_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_noisy()).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.feature_dim();
        let mut header: Vec<String> = (0..p).map(|i| format!("feature_{i}")).collect();
        header.push("observed_label".into());
        header.push("true_label".into());
        w.write_record(&header).map_err(csv_err)?;
        for ex in &self.examples {
            let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(ex.observed_label.to_string());
            row.push(ex.true_label.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`Dataset::write_csv`]. The class count
    /// is one more than the largest label seen unless `classes` is given.
    pub fn read_csv<R: Read>(input: R, classes: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let cols = header.len();
        if cols < 2
            || &header[cols - 2] != "observed_label"
            || &header[cols - 1] != "true_label"
        {
            return Err(SgoifError::Format(
                "dataset CSV must end with observed_label,true_label".into(),
            ));
        }
        let mut examples = Vec::new();
        let mut max_label = 0;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let features = (0..cols - 2)
                .map(|i| parse_f64(&rec[i]))
                .collect::<Result<Vec<_>>>()?;
            let observed_label = parse_usize(&rec[cols - 2])?;
            let true_label = parse_usize(&rec[cols - 1])?;
            max_label = max_label.max(observed_label).max(true_label);
            examples.push(Example {
                features,
                observed_label,
                true_label,
            });
        }
        Dataset::new(examples, classes.unwrap_or(max_label + 1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(DATASET_MAGIC);
        w.put_u64(self.len() as u64);
        w.put_u64(self.feature_dim() as u64);
        w.put_u64(self.classes as u64);
        for ex in &self.examples {
            for v in &ex.features {
                w.put_f64(*v);
            }
            w.put_u64(ex.observed_label as u64);
            w.put_u64(ex.true_label as u64);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, DATASET_MAGIC)?;
        let n = r.get_u64()? as usize;
        let p = r.get_u64()? as usize;
        let classes = r.get_u64()? as usize;
        let mut examples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut features = Vec::with_capacity(p);
            for _ in 0..p {
                features.push(r.get_f64()?);
            }
            let observed_label = r.get_u64()? as usize;
            let true_label = r.get_u64()? as usize;
            examples.push(Example {
                features,
                observed_label,
                true_label,
            });
        }
        r.expect_end()?;
        Dataset::new(examples, classes)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, classes)
    }
}

fn csv_err(e: csv::Error) -> SgoifError {
    SgoifError::Format(e.to_string())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| SgoifError::Format(format!("not a number: {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| SgoifError::Format(format!("not a label: {s:?}")))
}

/// Isotropic Gaussian class blobs: class means are random directions scaled
/// by `separation`, features are `mean + N(0, I)`. Labels are clean.
pub fn gaussian_blobs<R: Rng>(
    rng: &mut R,
    n: usize,
    features: usize,
    classes: usize,
    separation: f64,
) -> Dataset {
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let raw: Vec<f64> = (0..features).map(|_| StandardNormal.sample(rng)).collect();
            let nrm = crate::numerics::norm(&raw).max(1e-12);
            raw.iter().map(|v| separation * v / nrm).collect()
        })
        .collect();
    let examples = (0..n)
        .map(|i| {
            let label = i % classes;
            let features = means[label]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z
                })
                .collect();
            Example {
                features,
                observed_label: label,
                true_label: label,
            }
        })
        .collect();
    Dataset { examples, classes }
}

/// Corrupts exactly `round(rate * n)` observed labels.
///
/// A fraction `sparsity` of the classes (chosen at random, `floor(sparsity *
/// C)` of them) receives no noise; the flips are concentrated in the remaining
/// classes. Features and `n` are never touched.
pub fn inject_label_noise<R: Rng>(
    clean: &Dataset,
    rate: f64,
    mode: NoiseMode,
    sparsity: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) || !(0.0..=1.0).contains(&sparsity) {
        return Err(SgoifError::InfeasibleNoise(format!(
            "rate {rate} and sparsity {sparsity} must lie in [0, 1]"
        )));
    }
    let n = clean.len();
    let mut out = clean.clone();
    for ex in &mut out.examples {
        ex.observed_label = ex.true_label;
    }
    if rate == 0.0 {
        return Ok(out);
    }
    if rate * n as f64 <= 1.0 - 1e-12 {
        return Err(SgoifError::InfeasibleNoise(format!(
            "rate {rate} on {n} examples flips fewer than one label"
        )));
    }
    let classes = clean.classes;
    if classes < 2 {
        return Err(SgoifError::InfeasibleNoise("label noise needs at least two classes".into()));
    }
    let target = (rate * n as f64).round() as usize;

    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(rng);
    let exempt_count = (sparsity * classes as f64).floor() as usize;
    let exempt = &class_order[..exempt_count.min(classes)];

    let mut eligible: Vec<usize> = (0..n)
        .filter(|&i| !exempt.contains(&clean.examples[i].true_label))
        .collect();
    if eligible.len() < target {
        return Err(SgoifError::InfeasibleNoise(format!(
            "{} examples outside the {} exempt classes cannot host {target} flips",
            eligible.len(),
            exempt.len()
        )));
    }
    eligible.shuffle(rng);
    for &i in &eligible[..target] {
        let ex = &mut out.examples[i];
        ex.observed_label = match mode {
            NoiseMode::Asymmetric => (ex.true_label + 1) % classes,
            NoiseMode::Symmetric => {
                let k = rng.random_range(0..classes - 1);
                if k >= ex.true_label {
                    k + 1
                } else {
                    k
                }
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_blobs(&mut rng, n, 5, classes, 2.0)
    }

    #[test]
    fn zero_rate_is_identity() {
        let d = blobs(100, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = inject_label_noise(&d, 0.0, NoiseMode::Symmetric, 0.0, &mut rng).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn exact_flip_count() {
        let d = blobs(1000, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = inject_label_noise(&d, 0.2, NoiseMode::Symmetric, 0.0, &mut rng).unwrap();
        assert_eq!(out.noisy_count(), 200);
        assert_eq!(out.len(), d.len());
        for (a, b) in out.examples.iter().zip(&d.examples) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.true_label, b.true_label);
        }
    }

    #[test]
    fn asymmetric_two_class_flips() {
        let d = blobs(200, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = inject_label_noise(&d, 0.3, NoiseMode::Asymmetric, 0.0, &mut rng).unwrap();
        for ex in out.examples.iter().filter(|e| e.is_noisy()) {
            assert_eq!(ex.observed_label, 1 - ex.true_label);
        }
        assert_eq!(out.noisy_count(), 60);
    }

    #[test]
    fn sparsity_exempts_classes() {
        let d = blobs(1000, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = inject_label_noise(&d, 0.2, NoiseMode::Asymmetric, 0.6, &mut rng).unwrap();
        assert_eq!(out.noisy_count(), 200);
        let noisy_classes: std::collections::BTreeSet<usize> = out
            .examples
            .iter()
            .filter(|e| e.is_noisy())
            .map(|e| e.true_label)
            .collect();
        assert_eq!(noisy_classes.len(), 2);
    }

    #[test]
    fn infeasible_noise_reported() {
        let d = blobs(100, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // one class exempt, 90 flips cannot fit in the 50 remaining examples
        let err = inject_label_noise(&d, 0.9, NoiseMode::Symmetric, 0.5, &mut rng);
        assert!(matches!(err, Err(SgoifError::InfeasibleNoise(_))));
        let err = inject_label_noise(&d, 0.001, NoiseMode::Symmetric, 0.0, &mut rng);
        assert!(matches!(err, Err(SgoifError::InfeasibleNoise(_))));
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let d = blobs(20, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = inject_label_noise(&d, 0.25, NoiseMode::Symmetric, 0.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feature_0,feature_1,feature_2,feature_3,feature_4,observed_label,true_label\n"));
        assert_eq!(Dataset::read_csv(&buf[..], Some(3)).unwrap(), d);

        let bytes = d.to_bytes();
        assert_eq!(&bytes[..8], b"SGOIFDS1");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
