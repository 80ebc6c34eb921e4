//! Synthetic tri-modal identity corpus, its DMPTDS1 file format, and the
//! identity-balanced PK batch sampler.
//!
//! Each identity owns a shared signature pattern visible in all three
//! modalities, plus one code per modality drawn from a small per-modality
//! codebook. Code tuples are distinct across identities but every single
//! code is shared by several identities, so at `rho = 1` no single modality
//! identifies a sample while the three codes together do.
//!
//! `x_m = sqrt(1 - rho) * s_id + sqrt(rho) * B_m[c_m(id)] + noise_sigma * n`
//!
//! where the noise `n = sqrt(1 - nuisance) * e + sqrt(nuisance) * U a` mixes
//! i.i.d. pixel noise `e` with a low-rank nuisance: `U` holds a few
//! corpus-wide patterns and `a` is drawn afresh per sample and modality.
//! The nuisance is what a trained model can learn to ignore.
//!
//! File layout: one UTF-8 header line
//! `DMPTDS1 grid=G num_ids=N samples_per_id=S train=A query=B gallery=C seed=X rho=R noise=Z nuisance=U`
//! followed by `A + B + C` records in train, query, gallery order. A record
//! is `u32 sample_id`, `u32 identity`, then `G*G` little-endian `f32` per
//! modality in RGB, NIR, TIR order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::NUM_MODALITIES;
use crate::error::{Error, Result};

pub const MAGIC: &str = "DMPTDS1";

/// Number of corpus-wide nuisance patterns.
pub const NUISANCE_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// Pixels per image side.
    pub grid: usize,
    pub noise_sigma: f64,
    /// Complementarity: weight of the modality-private component.
    pub rho: f64,
    /// Share of the noise variance carried by the low-rank nuisance.
    pub nuisance: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_ids: 16,
            samples_per_id: 8,
            grid: 8,
            noise_sigma: 0.6,
            rho: 0.5,
            nuisance: 0.95,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.nuisance) {
            return Err(Error::Config(format!("nuisance must be in [0, 1], got {}", self.nuisance)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.num_ids < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.samples_per_id < 4 {
            return Err(Error::Config(
                "samples_per_id must be >= 4 so train keeps 2 and query and gallery 1 each".into(),
            ));
        }
        if self.grid == 0 {
            return Err(Error::Config("grid must be positive".into()));
        }
        Ok(())
    }

    /// Codebook size per modality: the smallest `K >= 2` with `K^3 >= num_ids`.
    pub fn codebook_size(&self) -> usize {
        let mut k: usize = 2;
        while k.pow(NUM_MODALITIES as u32) < self.num_ids {
            k += 1;
        }
        k
    }

    /// `(train, query, gallery)` samples per identity.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_id;
        let train = n / 2;
        let query = (n - train) / 2;
        (train, query, n - train - query)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySample {
    pub sample_id: u32,
    pub identity: u32,
    /// One `grid×grid` image per modality.
    pub images: [Vec<f32>; NUM_MODALITIES],
}

impl IdentitySample {
    pub fn images_f64(&self) -> [Vec<f64>; NUM_MODALITIES] {
        self.images
            .clone()
            .map(|img| img.into_iter().map(f64::from).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<IdentitySample>,
    pub query: Vec<IdentitySample>,
    pub gallery: Vec<IdentitySample>,
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixels = spec.grid * spec.grid;
    let k = spec.codebook_size();

    let signatures: Vec<Vec<f64>> = (0..spec.num_ids).map(|_| gaussian(pixels, &mut rng)).collect();
    let codebooks: Vec<Vec<Vec<f64>>> = (0..NUM_MODALITIES)
        .map(|_| (0..k).map(|_| gaussian(pixels, &mut rng)).collect())
        .collect();
    let mut tuples: Vec<usize> = (0..k.pow(NUM_MODALITIES as u32)).collect();
    tuples.shuffle(&mut rng);
    let codes: Vec<[usize; NUM_MODALITIES]> = tuples[..spec.num_ids]
        .iter()
        .map(|&t| [t % k, (t / k) % k, t / (k * k)])
        .collect();

    let nuisance: Vec<Vec<f64>> = (0..NUISANCE_RANK).map(|_| gaussian(pixels, &mut rng)).collect();
    let (shared_w, private_w) = ((1.0 - spec.rho).sqrt(), spec.rho.sqrt());
    let (iid_w, low_rank_w) = (
        spec.noise_sigma * (1.0 - spec.nuisance).sqrt(),
        spec.noise_sigma * (spec.nuisance / NUISANCE_RANK as f64).sqrt(),
    );
    let (n_train, n_query, _) = spec.split_sizes();
    let mut corpus = Corpus {
        spec: *spec,
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    let mut next_id = 0u32;
    for id in 0..spec.num_ids {
        for j in 0..spec.samples_per_id {
            let images = std::array::from_fn(|m| {
                let private = &codebooks[m][codes[id][m]];
                let coeffs = gaussian(NUISANCE_RANK, &mut rng);
                (0..pixels)
                    .map(|i| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        let u: f64 = coeffs.iter().zip(&nuisance).map(|(a, p)| a * p[i]).sum();
                        (shared_w * signatures[id][i] + private_w * private[i] + iid_w * e + low_rank_w * u) as f32
                    })
                    .collect()
            });
            let sample = IdentitySample {
                sample_id: next_id,
                identity: id as u32,
                images,
            };
            next_id += 1;
            if j < n_train {
                corpus.train.push(sample);
            } else if j < n_train + n_query {
                corpus.query.push(sample);
            } else {
                corpus.gallery.push(sample);
            }
        }
    }
    Ok(corpus)
}

fn header(c: &Corpus) -> String {
    let s = &c.spec;
    format!(
        "{MAGIC} grid={} num_ids={} samples_per_id={} train={} query={} gallery={} seed={} rho={} noise={} nuisance={}\n",
        s.grid,
        s.num_ids,
        s.samples_per_id,
        c.train.len(),
        c.query.len(),
        c.gallery.len(),
        s.seed,
        s.rho,
        s.noise_sigma,
        s.nuisance
    )
}

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut out = header(corpus).into_bytes();
    for s in corpus.train.iter().chain(&corpus.query).chain(&corpus.gallery) {
        out.extend_from_slice(&s.sample_id.to_le_bytes());
        out.extend_from_slice(&s.identity.to_le_bytes());
        for img in &s.images {
            for x in img {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn field<T: std::str::FromStr>(fields: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::Format(format!("header lacks {key}")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("header field {key}={raw} is malformed")))
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(MAGIC) => {}
        other => return Err(Error::Format(format!("bad magic {other:?}, expected {MAGIC}"))),
    }
    let fields: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
    let spec = CorpusSpec {
        grid: field(&fields, "grid")?,
        num_ids: field(&fields, "num_ids")?,
        samples_per_id: field(&fields, "samples_per_id")?,
        seed: field(&fields, "seed")?,
        rho: field(&fields, "rho")?,
        noise_sigma: field(&fields, "noise")?,
        nuisance: field(&fields, "nuisance")?,
    };
    let counts: [usize; 3] = [field(&fields, "train")?, field(&fields, "query")?, field(&fields, "gallery")?];
    let pixels = spec.grid * spec.grid;
    let record = 8 + NUM_MODALITIES * pixels * 4;
    let payload = &bytes[nl + 1..];
    let expected = counts.iter().sum::<usize>() * record;
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            actual: payload.len(),
        });
    }

    let mut records = payload.chunks_exact(record).map(|r| {
        let u32_at = |o: usize| u32::from_le_bytes(r[o..o + 4].try_into().expect("4 bytes"));
        let images = std::array::from_fn(|m| {
            let base = 8 + m * pixels * 4;
            r[base..base + pixels * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        });
        IdentitySample {
            sample_id: u32_at(0),
            identity: u32_at(4),
            images,
        }
    });
    let mut take = |n: usize| (&mut records).take(n).collect::<Vec<_>>();
    let corpus = Corpus {
        spec,
        train: take(counts[0]),
        query: take(counts[1]),
        gallery: take(counts[2]),
    };
    if let Some(s) = corpus
        .train
        .iter()
        .chain(&corpus.query)
        .chain(&corpus.gallery)
        .find(|s| s.identity as usize >= spec.num_ids)
    {
        return Err(Error::Format(format!(
            "sample {} has identity {} >= num_ids {}",
            s.sample_id, s.identity, spec.num_ids
        )));
    }
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, encode_corpus(corpus)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

/// Position of a PK sampler: the epoch and the next batch within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Identity-balanced sampler: P identities × K samples per batch, without
/// replacement within an epoch. The epoch plan is a pure function of
/// `(seed, epoch)`, so the state is two integers.
#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    seed: u64,
    /// Sample indices grouped by identity, ascending.
    by_identity: Vec<(u32, Vec<usize>)>,
    state: SamplerState,
    plan: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(samples: &[IdentitySample], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Sampling("P and K must be positive".into()));
        }
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(s.identity).or_default().push(i);
        }
        let eligible = groups.values().filter(|v| v.len() >= k).count();
        if eligible < p {
            return Err(Error::Sampling(format!(
                "need {p} identities with >= {k} samples, found {eligible}"
            )));
        }
        let mut sampler = PkSampler {
            p,
            k,
            seed,
            by_identity: groups.into_iter().collect(),
            state: SamplerState::default(),
            plan: Vec::new(),
        };
        sampler.plan = sampler.epoch_plan(0);
        Ok(sampler)
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.plan = self.epoch_plan(state.epoch);
        self.state = state;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan.len()
    }

    fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .by_identity
            .iter()
            .map(|(_, idx)| {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                idx.chunks_exact(self.k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut plan = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if open.len() < self.p {
                break;
            }
            open.shuffle(&mut rng);
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &i in &open[..self.p] {
                batch.extend(chunks[i].pop().expect("open identity"));
            }
            plan.push(batch);
        }
        plan
    }

    /// Next batch of sample indices, `K` consecutive entries per identity.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.state.cursor >= self.plan.len() {
            self.state = SamplerState {
                epoch: self.state.epoch + 1,
                cursor: 0,
            };
            self.plan = self.epoch_plan(self.state.epoch);
        }
        let batch = self.plan[self.state.cursor].clone();
        self.state.cursor += 1;
        batch
    }
}
