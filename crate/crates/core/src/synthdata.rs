//! Seeded synthetic two-task data.
//!
//! Each class owns a fixed random unit "template". A clean sample is its
//! class template plus small Gaussian jitter; the noisy sample adds white
//! Gaussian noise scaled to a requested SNR. The clean vector is the
//! reconstruction target and the class is the classification label.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Standard deviation of the per-coordinate intra-class jitter.
pub const JITTER_STD: f64 = 0.05;
/// Minimum pairwise angle between class templates, in degrees, when the
/// dimension allows it.
pub const MIN_TEMPLATE_ANGLE_DEG: f64 = 30.0;

const TEMPLATE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need dimension at least 2, got {0}")]
    DimTooSmall(usize),
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("snr_db must be finite")]
    BadSnr,
    #[error("could not place {classes} templates in {dim} dimensions at least {min_deg}° apart")]
    TemplatesInfeasible {
        classes: usize,
        dim: usize,
        min_deg: f64,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `batch × dim`, `clean` plus noise.
    pub noisy: Array2<f64>,
    /// `batch × dim`.
    pub clean: Array2<f64>,
    pub labels: Vec<usize>,
    pub snr_db: f64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `10·log10(‖clean‖² / ‖noisy − clean‖²)` over the whole batch.
    pub fn empirical_snr_db(&self) -> f64 {
        let signal: f64 = self.clean.iter().map(|v| v * v).sum();
        let noise: f64 = self
            .noisy
            .iter()
            .zip(&self.clean)
            .map(|(n, c)| (n - c) * (n - c))
            .sum();
        10.0 * (signal / noise).log10()
    }

    /// Writes one row per sample: `label,clean_0..clean_{d-1},noisy_0..noisy_{d-1}`,
    /// preceded by that header.
    pub fn write_csv(&self, out: impl Write) -> Result<(), DataError> {
        let dim = self.clean.ncols();
        let mut w = csv::Writer::from_writer(out);
        let header = std::iter::once("label".to_string())
            .chain((0..dim).map(|i| format!("clean_{i}")))
            .chain((0..dim).map(|i| format!("noisy_{i}")));
        w.write_record(header)?;
        for (i, &label) in self.labels.iter().enumerate() {
            let (clean, noisy) = (self.clean.row(i), self.noisy.row(i));
            let row = std::iter::once(label.to_string())
                .chain(clean.iter().map(|v| format!("{v:?}")))
                .chain(noisy.iter().map(|v| format!("{v:?}")));
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class templates fixed by a seed, from which any number of batches can be
/// drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    templates: Array2<f64>,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(seed: u64, num_classes: usize, dim: usize) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::TooFewClasses(num_classes));
        }
        if dim < 2 {
            return Err(DataError::DimTooSmall(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_cos = MIN_TEMPLATE_ANGLE_DEG.to_radians().cos();
        let mut templates: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        let mut attempts = 0;
        while templates.len() < num_classes {
            attempts += 1;
            if attempts > TEMPLATE_ATTEMPTS {
                return Err(DataError::TemplatesInfeasible {
                    classes: num_classes,
                    dim,
                    min_deg: MIN_TEMPLATE_ANGLE_DEG,
                });
            }
            let candidate = random_unit(&mut rng, dim);
            let far_enough = templates.iter().all(|t| {
                let c: f64 = t.iter().zip(&candidate).map(|(a, b)| a * b).sum();
                c <= min_cos
            });
            if far_enough {
                templates.push(candidate);
            }
        }
        let flat: Vec<f64> = templates.into_iter().flatten().collect();
        Ok(Self {
            templates: Array2::from_shape_vec((num_classes, dim), flat).expect("template shape"),
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.templates.nrows()
    }

    pub fn dim(&self) -> usize {
        self.templates.ncols()
    }

    pub fn templates(&self) -> &Array2<f64> {
        &self.templates
    }

    pub fn template(&self, class: usize) -> ArrayView1<'_, f64> {
        self.templates.row(class)
    }

    /// Draws batch number `stream`. Different streams are independent;
    /// the same stream always yields the same batch.
    pub fn sample(&self, stream: u64, batch: usize, snr_db: f64) -> Result<SampleBatch, DataError> {
        if batch == 0 {
            return Err(DataError::EmptyBatch);
        }
        if !snr_db.is_finite() {
            return Err(DataError::BadSnr);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        let (classes, dim) = self.templates.dim();

        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let mut clean = Array2::zeros((batch, dim));
        for (mut row, &label) in clean.rows_mut().into_iter().zip(&labels) {
            for (v, t) in row.iter_mut().zip(self.templates.row(label)) {
                let jitter: f64 = StandardNormal.sample(&mut rng);
                *v = t + JITTER_STD * jitter;
            }
        }
        // Noise variance follows from the batch's own signal power.
        let signal_power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
        let sigma = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
        let noisy = clean.mapv(|c| {
            let n: f64 = StandardNormal.sample(&mut rng);
            c + sigma * n
        });
        Ok(SampleBatch {
            noisy,
            clean,
            labels,
            snr_db,
        })
    }

    /// Index of the template nearest (Euclidean) to `x`.
    pub fn nearest_template(&self, x: ArrayView1<'_, f64>) -> usize {
        self.templates
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let d: f64 = t.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("at least two templates")
    }
}

/// One batch from a task whose templates come from the same seed.
pub fn generate(
    seed: u64,
    num_classes: usize,
    dim: usize,
    batch: usize,
    snr_db: f64,
) -> Result<SampleBatch, DataError> {
    SyntheticTask::new(seed, num_classes, dim)?.sample(0, batch, snr_db)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
