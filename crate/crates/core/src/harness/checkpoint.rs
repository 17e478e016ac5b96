//! Binary checkpoints: little-endian, magic `DPS2`, a u32 format version, then
//! length-prefixed named sections in a fixed order. The encoding is canonical,
//! so saving the same state twice gives the same bytes.

use std::path::Path;

use thiserror::Error;

use super::config::{ExperimentConfig, Mode, Plan};
use super::metrics::Provenance;
use crate::accountant::{default_orders, Accountant};
use crate::corpus::Vocab;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{RngState, RNG_STATE_BYTES};
use crate::sampling::{Method, SamplerConfig, SamplerState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DPS2";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 10] = [
    "experiment",
    "plan",
    "model_config",
    "params",
    "step",
    "sampler",
    "noise_rng",
    "accountant",
    "vocab",
    "provenance",
];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {0:?}, expected \"DPS2\"")]
    BadMagic(Vec<u8>),
    #[error("checkpoint format version {found} is not supported by this build (version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint section {found:?} where {expected:?} was expected")]
    Section { expected: String, found: String },
    #[error("malformed checkpoint section {section}: {why}")]
    Malformed { section: String, why: String },
    #[error("{0} trailing bytes after the last checkpoint section")]
    Trailing(usize),
}

/// Accountant ledger as stored; the RDP curve is recomputed on load.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccountantState {
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub steps: u64,
}

impl AccountantState {
    pub fn capture(acc: &Accountant) -> Self {
        Self {
            q: acc.q(),
            sigma: acc.sigma(),
            delta: acc.delta(),
            steps: acc.steps(),
        }
    }

    pub fn restore(&self) -> Result<Accountant, crate::accountant::AccountantError> {
        Ok(Accountant::new(self.q, self.sigma, self.delta, &default_orders())?.with_steps(self.steps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration with `out` cleared and `mode` set to train, so the
    /// bytes do not depend on where or how the run was launched.
    pub experiment: ExperimentConfig,
    pub plan: Plan,
    pub params: ModelParams,
    pub step: u64,
    pub sampler_config: SamplerConfig,
    pub sampler: SamplerState,
    pub noise_rng: RngState,
    pub accountant: Option<AccountantState>,
    pub vocab: Vocab,
    /// The privacy claim of the parameters as saved; `None` when non-private.
    pub provenance: Option<Provenance>,
}

pub fn canonical_experiment(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out = Default::default();
    c.mode = Mode::Train;
    c
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(self.what.to_string()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.malformed(format!("count {v} does not fit in memory")))
    }
    /// A count of items of at least `min_item` bytes each, checked against the
    /// remaining input before anything is allocated.
    fn count(&mut self, min_item: usize) -> Result<usize, CheckpointError> {
        let n = self.usize()?;
        if n.saturating_mul(min_item) > self.buf.len() {
            return Err(CheckpointError::Truncated(self.what.to_string()));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("invalid UTF-8"))
    }
    fn malformed(&self, why: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            section: self.what.to_string(),
            why: why.into(),
        }
    }
    fn finish(&self) -> Result<(), CheckpointError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} unread bytes", self.buf.len())))
        }
    }
}

fn rng_bytes(w: &mut Writer, state: &RngState) {
    w.0.extend_from_slice(&state.to_bytes());
}

fn read_rng(r: &mut Reader) -> Result<RngState, CheckpointError> {
    Ok(RngState::from_bytes(&r.array::<RNG_STATE_BYTES>()?))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bodies: Vec<Writer> = (0..SECTIONS.len()).map(|_| Writer::default()).collect();
        let [experiment, plan, model_config, params, step, sampler, noise, accountant, vocab, provenance] = &mut bodies[..] else {
            unreachable!()
        };

        let json = serde_json::to_vec(&canonical_experiment(&self.experiment)).expect("config serializes");
        experiment.0 = json;

        plan.usize(self.plan.n);
        plan.f64(self.plan.q);
        plan.u64(self.plan.lots_per_epoch);
        plan.u64(self.plan.steps);
        plan.f64(self.plan.sigma);

        let c = self.params.config();
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len] {
            model_config.usize(v);
        }

        params.usize(self.params.tensors().len());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            params.str(name);
            params.usize(t.shape().len());
            t.shape().iter().for_each(|&d| params.usize(d));
            t.data().iter().for_each(|&x| params.f64(x));
        }

        step.u64(self.step);

        let sc = &self.sampler_config;
        sampler.u8(match sc.method {
            Method::Poisson => 0,
            Method::Shuffle => 1,
        });
        for v in [sc.n, sc.lot_size, sc.physical_batch] {
            sampler.usize(v);
        }
        sampler.u64(sc.seed);
        sampler.u64(self.sampler.step);
        rng_bytes(sampler, &self.sampler.rng);
        sampler.usize(self.sampler.cursor);
        sampler.usize(self.sampler.permutation.len());
        self.sampler.permutation.iter().for_each(|&i| sampler.usize(i));

        rng_bytes(noise, &self.noise_rng);

        match &self.accountant {
            None => accountant.u8(0),
            Some(a) => {
                accountant.u8(1);
                accountant.f64(a.q);
                accountant.f64(a.sigma);
                accountant.f64(a.delta);
                accountant.u64(a.steps);
            }
        }

        vocab.usize(self.vocab.words().len());
        self.vocab.words().iter().for_each(|w| vocab.str(w));

        provenance.0 = serde_json::to_vec(&self.provenance).expect("provenance serializes");

        let mut out = Writer::default();
        out.0.extend_from_slice(&MAGIC);
        out.u32(VERSION);
        out.u32(SECTIONS.len() as u32);
        for (name, body) in SECTIONS.iter().zip(&bodies) {
            out.str(name);
            out.bytes(&body.0);
        }
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, what: "header" };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(r.malformed(format!("{count} sections, expected {}", SECTIONS.len())));
        }
        let mut bodies = Vec::with_capacity(count);
        for expected in SECTIONS {
            r.what = expected;
            let name = r.str()?;
            if name != expected {
                return Err(CheckpointError::Section {
                    expected: expected.into(),
                    found: name,
                });
            }
            bodies.push(Reader { buf: r.bytes()?, what: expected });
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Trailing(r.buf.len()));
        }
        let [experiment, plan, model_config, params, step, sampler, noise, accountant, vocab, provenance] = &mut bodies[..] else {
            unreachable!()
        };

        let experiment_cfg: ExperimentConfig =
            serde_json::from_slice(experiment.buf).map_err(|e| experiment.malformed(e.to_string()))?;

        let plan_v = Plan {
            n: plan.usize()?,
            q: plan.f64()?,
            lots_per_epoch: plan.u64()?,
            steps: plan.u64()?,
            sigma: plan.f64()?,
        };
        plan.finish()?;

        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = model_config.usize()?;
        }
        model_config.finish()?;
        let [vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len] = dims;
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len,
        };
        config.validate().map_err(|e| model_config.malformed(e.to_string()))?;

        let shapes = config.param_shapes();
        let n_tensors = params.count(1)?;
        if n_tensors != shapes.len() {
            return Err(params.malformed(format!("{n_tensors} tensors, model needs {}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (want_name, want_shape) in &shapes {
            let name = params.str()?;
            if &name != want_name {
                return Err(params.malformed(format!("tensor {name:?} where {want_name:?} was expected")));
            }
            let rank = params.count(8)?;
            let shape = (0..rank).map(|_| params.usize()).collect::<Result<Vec<_>, _>>()?;
            if &shape != want_shape {
                return Err(params.malformed(format!("{name} has shape {shape:?}, expected {want_shape:?}")));
            }
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > params.buf.len() {
                return Err(CheckpointError::Truncated("params".into()));
            }
            let data = (0..len).map(|_| params.f64()).collect::<Result<Vec<_>, _>>()?;
            tensors.push(Tensor::new(shape, data).map_err(|e| params.malformed(format!("{name}: {e}")))?);
        }
        params.finish()?;
        let model = ModelParams::from_tensors(config, tensors).map_err(|e| params.malformed(e.to_string()))?;

        let step_v = step.u64()?;
        step.finish()?;

        let method = match sampler.u8()? {
            0 => Method::Poisson,
            1 => Method::Shuffle,
            m => return Err(sampler.malformed(format!("unknown iteration method tag {m}"))),
        };
        let sampler_config = SamplerConfig {
            method,
            n: sampler.usize()?,
            lot_size: sampler.usize()?,
            physical_batch: sampler.usize()?,
            seed: sampler.u64()?,
        };
        let sampler_step = sampler.u64()?;
        let sampler_rng = read_rng(sampler)?;
        let cursor = sampler.usize()?;
        let perm_len = sampler.count(8)?;
        let permutation = (0..perm_len).map(|_| sampler.usize()).collect::<Result<Vec<_>, _>>()?;
        sampler.finish()?;

        let noise_rng = read_rng(noise)?;
        noise.finish()?;

        let acc = match accountant.u8()? {
            0 => None,
            1 => Some(AccountantState {
                q: accountant.f64()?,
                sigma: accountant.f64()?,
                delta: accountant.f64()?,
                steps: accountant.u64()?,
            }),
            t => return Err(accountant.malformed(format!("unknown presence tag {t}"))),
        };
        accountant.finish()?;

        let n_words = vocab.count(8)?;
        let words = (0..n_words).map(|_| vocab.str()).collect::<Result<Vec<_>, _>>()?;
        vocab.finish()?;
        let vocab_v = Vocab::try_from_tokens(words).map_err(|why| vocab.malformed(why))?;

        let provenance_v: Option<Provenance> =
            serde_json::from_slice(provenance.buf).map_err(|e| provenance.malformed(e.to_string()))?;

        Ok(Self {
            experiment: experiment_cfg,
            plan: plan_v,
            params: model,
            step: step_v,
            sampler_config,
            sampler: SamplerState {
                step: sampler_step,
                rng: sampler_rng,
                permutation,
                cursor,
            },
            noise_rng,
            accountant: acc,
            vocab: vocab_v,
            provenance: provenance_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), super::HarnessError> {
        // Write to a sibling and rename, so a crash never leaves half a file.
        let tmp = path.with_extension("dps2.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| super::HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| super::HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, super::HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| super::HarnessError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
