//! Cisoid mixtures in circular complex white noise, and their filtered states.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfilter::{circular_distance, wrap_angle, GFilter};
use crate::numerics::{c64, CVector, C64};

/// Frequencies and complex amplitudes of a sum of cisoids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSpectrum {
    pub freqs: Vec<f64>,
    pub amps: Vec<C64>,
}

impl LineSpectrum {
    pub fn new(freqs: Vec<f64>, amps: Vec<C64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Empty("line spectrum"));
        }
        if freqs.len() != amps.len() {
            return Err(Error::Dimension(format!(
                "{} frequencies but {} amplitudes",
                freqs.len(),
                amps.len()
            )));
        }
        let freqs: Vec<f64> = freqs.into_iter().map(wrap_angle).collect();
        for i in 0..freqs.len() {
            for j in i + 1..freqs.len() {
                if circular_distance(freqs[i], freqs[j]) == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "frequency {} appears twice",
                        freqs[i]
                    )));
                }
            }
        }
        Ok(LineSpectrum { freqs, amps })
    }

    pub fn m(&self) -> usize {
        self.freqs.len()
    }

    /// Noiseless sample at time `t`.
    pub fn sample(&self, t: f64) -> C64 {
        self.freqs
            .iter()
            .zip(&self.amps)
            .map(|(&th, &a)| a * C64::from_polar(1.0, th * t))
            .sum()
    }
}

/// Samples `y(0), …, y(L-1)` and the noise variance used to make them.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub samples: Vec<C64>,
    pub sigma2: f64,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    #[serde(rename = "L")]
    len: usize,
    sigma2: f64,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    t: usize,
    re: f64,
    im: f64,
}

impl SignalRecord {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (t, z) in self.samples.iter().enumerate() {
            wr.serialize(CsvRow { t, re: z.re, im: z.im })?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads `t,re,im` rows. Rows may come in any order but must cover
    /// `0..L` exactly once. The noise variance is unknown and set to 0.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows: Vec<CsvRow> = Vec::new();
        for row in rd.deserialize() {
            rows.push(row?);
        }
        rows.sort_by_key(|r| r.t);
        for (k, row) in rows.iter().enumerate() {
            if row.t != k {
                return Err(Error::Config(format!("signal CSV is missing sample t = {k}")));
            }
        }
        Ok(SignalRecord {
            samples: rows.iter().map(|r| c64(r.re, r.im)).collect(),
            sigma2: 0.0,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RecordJson {
            len: self.len(),
            sigma2: self.sigma2,
            re: self.samples.iter().map(|z| z.re).collect(),
            im: self.samples.iter().map(|z| z.im).collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RecordJson = serde_json::from_str(text)?;
        if raw.re.len() != raw.len || raw.im.len() != raw.len {
            return Err(Error::Dimension(format!(
                "record declares L = {} but stores {} / {} parts",
                raw.len,
                raw.re.len(),
                raw.im.len()
            )));
        }
        Ok(SignalRecord {
            samples: raw.re.iter().zip(&raw.im).map(|(&a, &b)| c64(a, b)).collect(),
            sigma2: raw.sigma2,
        })
    }
}

/// One draw of circular complex Gaussian noise with total variance `sigma2`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, sigma2: f64) -> C64 {
    let s = (sigma2 / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c64(s * re, s * im)
}

/// `y(t) = Σ a_k e^{iθ_k t} + w(t)` for `t = 0..L`, drawing noise from `rng`.
pub fn synthesize_with<R: Rng + ?Sized>(
    spec: &LineSpectrum,
    len: usize,
    sigma2: f64,
    rng: &mut R,
) -> SignalRecord {
    let samples = (0..len)
        .map(|t| {
            let clean = spec.sample(t as f64);
            if sigma2 > 0.0 {
                clean + complex_gaussian(rng, sigma2)
            } else {
                clean
            }
        })
        .collect();
    SignalRecord { samples, sigma2 }
}

/// Seeded version of [`synthesize_with`].
pub fn synthesize(spec: &LineSpectrum, len: usize, sigma2: f64, seed: u64) -> SignalRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize_with(spec, len, sigma2, &mut rng)
}

/// Noise variance giving `snr_db` relative to a cisoid of modulus `ref_amp`.
pub fn snr_to_sigma2(snr_db: f64, ref_amp: f64) -> f64 {
    ref_amp * ref_amp * 10f64.powf(-snr_db / 10.0)
}

/// Runs the filter from a zero state and keeps `x(L_s), …, x(L-1)`.
pub fn filter_record(filter: &GFilter, record: &SignalRecord, epsilon: f64) -> Result<Vec<CVector>> {
    let ls = filter.truncation_length(epsilon);
    if record.len() <= ls {
        return Err(Error::InsufficientData {
            required: ls + 1,
            got: record.len(),
        });
    }
    let mut x = CVector::zeros(filter.n());
    let mut out = Vec::with_capacity(record.len() - ls);
    for (t, &y) in record.samples.iter().enumerate() {
        x = filter.a() * x + filter.b() * y;
        if t >= ls {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// The filter state a noiseless input would have at time `t` had it started
/// in the infinite past: `Σ a_k e^{iθ_k t} G(e^{iθ_k})`.
pub fn steady_state_output(filter: &GFilter, spec: &LineSpectrum, t: f64) -> CVector {
    let mut x = CVector::zeros(filter.n());
    for (&th, &a) in spec.freqs.iter().zip(&spec.amps) {
        x += filter.atom_vector(th) * (a * C64::from_polar(1.0, th * t));
    }
    x
}
