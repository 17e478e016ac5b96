//! Experiment orchestration: train, resume, infer, account, calibrate, synth.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::{canonical_experiment, AccountantState, Checkpoint};
use super::config::{DataSection, ExperimentConfig, Mode, Plan};
use super::metrics::{MetricsWriter, Provenance, Record};
use super::HarnessError;
use crate::accountant::{calibrate_sigma, default_orders, delta_warning, rdp_single_step, compose, to_epsilon, Accountant};
use crate::corpus::{
    encode_split, load_parallel, synth_reversal, write_parallel, DatasetSplit, Encoded, Format, SplitName, Vocab,
};
use crate::evaluation::{evaluate, BleuReport, Translation};
use crate::model::{init_params, ModelParams};
use crate::optimizer::{self, DpConfig, StopReason, TrainConfig, TrainState};
use crate::rng::{stream, Stream};
use crate::sampling::{Method, Sampler, SamplerConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.dps2";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRANSLATIONS_FILE: &str = "translations.jsonl";

pub struct Dataset {
    pub train: DatasetSplit,
    pub test: Option<DatasetSplit>,
}

fn split_file(dir: &Path, name: &str, format: Format) -> PathBuf {
    dir.join(format!("{name}.{format}"))
}

/// Loads the training split and, when present, the test split.
pub fn load_dataset(data: &DataSection) -> Result<Dataset, HarnessError> {
    let path = data
        .dataset
        .as_deref()
        .ok_or_else(|| HarnessError::Config("no dataset given".into()))?;
    let (train, mut test) = if path.is_dir() {
        let test_path = split_file(path, "test", data.format);
        let test = match test_path.exists() {
            true => Some(load_parallel(&test_path, data.format, SplitName::Test)?),
            false => None,
        };
        (load_parallel(split_file(path, "train", data.format), data.format, SplitName::Train)?, test)
    } else {
        (load_parallel(path, data.format, SplitName::Train)?, None)
    };
    if let Some(t) = &data.test {
        test = Some(load_parallel(t, data.format, SplitName::Test)?);
    }
    Ok(Dataset { train, test })
}

/// What a train or resume call produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub plan: Plan,
    pub stop: StopReason,
    pub provenance: Option<Provenance>,
    /// Test-set BLEU, when the run completed and a test split was available.
    pub bleu: Option<BleuReport>,
    pub warnings: Vec<String>,
}

struct Session {
    cfg: ExperimentConfig,
    plan: Plan,
    vocab: Vocab,
    data: Vec<Encoded>,
    test: Option<DatasetSplit>,
    state: TrainState,
}

impl Session {
    fn train_config(&self) -> TrainConfig {
        let p = &self.cfg.privacy;
        TrainConfig {
            dp: DpConfig {
                private: p.private,
                clip: p.clip,
                sigma: self.plan.sigma,
                lot_size: self.cfg.sampler.lot_size,
                learning_rate: self.cfg.train.lr,
                divisor: p.divisor,
            },
            physical_batch: self.cfg.sampler.physical_batch,
            total_steps: self.plan.steps,
            target_epsilon: if p.private { p.epsilon } else { None },
        }
    }

    fn provenance(&self) -> Option<Provenance> {
        self.state
            .accountant
            .as_ref()
            .map(|a| provenance_of(a, a.steps(), self.cfg.sampler.method))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            experiment: canonical_experiment(&self.cfg),
            plan: self.plan,
            params: self.state.params.clone(),
            step: self.state.step,
            sampler_config: *self.state.sampler.config(),
            sampler: self.state.sampler.state(),
            noise_rng: crate::rng::RngState::capture(&self.state.noise_rng),
            accountant: self.state.accountant.as_ref().map(AccountantState::capture),
            vocab: self.vocab.clone(),
            provenance: self.provenance(),
        }
    }
}

fn provenance_of(acc: &Accountant, steps: u64, method: Method) -> Provenance {
    Provenance::new(acc.epsilon_after(steps).0, acc.delta(), acc.sigma(), acc.q(), steps, method)
}

fn warnings_for(cfg: &ExperimentConfig, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    if cfg.privacy.private {
        out.extend(delta_warning(cfg.privacy.delta, n));
    }
    out
}

fn encode_train(cfg: &ExperimentConfig, train: &DatasetSplit, vocab: &Vocab) -> Result<Vec<Encoded>, HarnessError> {
    Ok(encode_split(train, vocab, cfg.data.max_seq_len)?)
}

fn create_out(out: &Path) -> Result<(), HarnessError> {
    if out.as_os_str().is_empty() {
        return Err(HarnessError::Config("no output directory given".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

/// Starts a fresh run. `stop_after` halts (and checkpoints) early without
/// changing the plan, so a later `resume` continues the same run.
pub fn train(cfg: &ExperimentConfig, stop_after: Option<u64>) -> Result<RunOutcome, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Train;
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let vocab = Vocab::build(&data.train, cfg.data.vocab_size);
    let model_config = cfg.model_config(vocab.len());
    let plan = cfg.plan(data.train.len())?;
    let encoded = encode_train(&cfg, &data.train, &vocab)?;
    let params = init_params(&model_config, cfg.seed)?;
    let sampler = Sampler::new(SamplerConfig {
        method: cfg.sampler.method,
        n: plan.n,
        lot_size: cfg.sampler.lot_size,
        physical_batch: cfg.sampler.physical_batch,
        seed: cfg.seed,
    })?;
    let accountant = match cfg.privacy.private {
        true => Some(Accountant::new(plan.q, plan.sigma, cfg.privacy.delta, &default_orders())?),
        false => None,
    };
    let session = Session {
        plan,
        vocab,
        data: encoded,
        test: data.test,
        state: TrainState {
            params,
            sampler,
            noise_rng: stream(cfg.seed, Stream::Noise),
            accountant,
            step: 0,
        },
        cfg,
    };
    run_session(session, false, stop_after)
}

#[derive(Clone, Debug, Default)]
pub struct ResumeOptions {
    /// Output directory; defaults to the checkpoint's directory.
    pub out: Option<PathBuf>,
    /// Replacement dataset location, for data that moved since training.
    pub dataset: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub stop_after: Option<u64>,
}

/// Continues a run from a checkpoint to its planned length.
pub fn resume(checkpoint: &Path, opts: &ResumeOptions) -> Result<RunOutcome, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.experiment.clone();
    cfg.mode = Mode::Resume;
    cfg.out = match &opts.out {
        Some(o) => o.clone(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if let Some(d) = &opts.dataset {
        cfg.data.dataset = Some(d.clone());
    }
    if let Some(t) = &opts.test {
        cfg.data.test = Some(t.clone());
    }
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    if data.train.len() != ck.plan.n {
        return Err(HarnessError::Config(format!(
            "checkpoint was trained on {} pairs but the dataset has {}",
            ck.plan.n,
            data.train.len()
        )));
    }
    if ck.params.config().vocab_size != ck.vocab.len() {
        return Err(HarnessError::Config("checkpoint vocabulary does not match its model".into()));
    }
    let encoded = encode_train(&cfg, &data.train, &ck.vocab)?;
    let session = Session {
        state: TrainState {
            params: ck.params,
            sampler: Sampler::restore(ck.sampler_config, ck.sampler)?,
            noise_rng: ck.noise_rng.restore(),
            accountant: ck.accountant.map(|a| a.restore()).transpose()?,
            step: ck.step,
        },
        cfg,
        plan: ck.plan,
        vocab: ck.vocab,
        data: encoded,
        test: data.test,
    };
    run_session(session, true, opts.stop_after)
}

fn run_session(mut s: Session, append: bool, stop_after: Option<u64>) -> Result<RunOutcome, HarnessError> {
    let warnings = warnings_for(&s.cfg, s.plan.n);
    let out = s.cfg.out.clone();
    create_out(&out)?;
    let tcfg = s.train_config();
    optimizer::check_budget(&s.state, &tcfg)?;

    let mut metrics = MetricsWriter::open(&out.join(METRICS_FILE), append)?;
    metrics.write(&Record::Run {
        private: s.cfg.privacy.private,
        n: s.plan.n,
        lot_size: s.cfg.sampler.lot_size,
        planned_steps: s.plan.steps,
        start_step: s.state.step,
        provenance: s
            .state
            .accountant
            .as_ref()
            .map(|a| provenance_of(a, s.plan.steps, s.cfg.sampler.method)),
    })?;

    let until = stop_after.unwrap_or(s.plan.steps);
    let mut write_err = None;
    let stop = optimizer::train(&mut s.state, &s.data, &tcfg, until, |rec| {
        if write_err.is_none() {
            write_err = metrics.write(&Record::Lot(rec.clone())).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    metrics.write(&Record::Stop {
        step: s.state.step,
        reason: match (stop, s.state.step == s.plan.steps) {
            (StopReason::Budget, _) => "budget",
            (StopReason::Completed, true) => "completed",
            (StopReason::Completed, false) => "paused",
        }
        .into(),
    })?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    s.checkpoint().save(&checkpoint)?;

    let provenance = s.provenance();
    let finished = stop == StopReason::Budget || s.state.step == s.plan.steps;
    let bleu = match (&s.test, finished) {
        (Some(test), true) => {
            let report = evaluate_into(&s.state.params, test, &s.vocab, &out, s.state.step, provenance.clone(), &mut metrics)?;
            Some(report)
        }
        _ => None,
    };
    metrics.flush()?;
    Ok(RunOutcome {
        checkpoint,
        step: s.state.step,
        plan: s.plan,
        stop,
        provenance,
        bleu,
        warnings,
    })
}

fn evaluate_into(
    params: &ModelParams,
    test: &DatasetSplit,
    vocab: &Vocab,
    out: &Path,
    step: u64,
    provenance: Option<Provenance>,
    metrics: &mut MetricsWriter,
) -> Result<BleuReport, HarnessError> {
    let (translations, report) = evaluate(params, test, vocab)?;
    write_translations(&out.join(TRANSLATIONS_FILE), &translations, provenance.as_ref())?;
    metrics.write(&Record::Eval {
        step,
        split: "test".into(),
        report: report.clone(),
        provenance,
    })?;
    Ok(report)
}

/// One JSON object per line; private runs lead with a provenance line.
pub fn write_translations(
    path: &Path,
    translations: &[Translation],
    provenance: Option<&Provenance>,
) -> Result<(), HarnessError> {
    let io = |e| HarnessError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    if let Some(p) = provenance {
        let line = serde_json::json!({ "provenance": p });
        writeln!(w, "{line}").map_err(io)?;
    }
    for t in translations {
        writeln!(w, "{}", serde_json::to_string(t).expect("translations serialize")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Decodes a test split with a checkpoint's model, writing translations and
/// an evaluation record under `out`.
pub fn infer(checkpoint: &Path, test: &DatasetSplit, out: &Path) -> Result<(BleuReport, Option<Provenance>), HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    create_out(out)?;
    let provenance = ck.provenance.clone();
    let mut metrics = MetricsWriter::open(&out.join(METRICS_FILE), true)?;
    let report = evaluate_into(&ck.params, test, &ck.vocab, out, ck.step, provenance.clone(), &mut metrics)?;
    metrics.flush()?;
    Ok((report, provenance))
}

/// Privacy spent by `steps` lots at rate `q` and noise `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountReport {
    pub epsilon: f64,
    pub alpha: u32,
    pub provenance: Provenance,
}

pub fn account(q: f64, sigma: f64, steps: u64, delta: f64, method: Method) -> Result<AccountReport, HarnessError> {
    let curve = compose(&rdp_single_step(q, sigma, &default_orders())?, steps);
    let (epsilon, alpha) = to_epsilon(&curve, delta)?;
    Ok(AccountReport {
        epsilon,
        alpha,
        provenance: Provenance::new(epsilon, delta, sigma, q, steps, method),
    })
}

impl fmt::Display for AccountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epsilon = {:.6} (order {})", self.epsilon, self.alpha)?;
        write!(f, "{}", self.provenance)
    }
}

/// Smallest noise multiplier meeting `target_epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateReport {
    pub target_epsilon: f64,
    pub sigma: f64,
    pub provenance: Provenance,
}

pub fn calibrate(target_epsilon: f64, q: f64, steps: u64, delta: f64, method: Method) -> Result<CalibrateReport, HarnessError> {
    let sigma = calibrate_sigma(target_epsilon, delta, q, steps, &default_orders())?;
    let achieved = account(q, sigma, steps, delta, method)?;
    Ok(CalibrateReport {
        target_epsilon,
        sigma,
        provenance: achieved.provenance,
    })
}

impl fmt::Display for CalibrateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sigma = {:.6} for target epsilon {}", self.sigma, self.target_epsilon)?;
        write!(f, "{}", self.provenance)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epsilon: {:.6}", self.epsilon)?;
        writeln!(f, "delta: {:e}", self.delta)?;
        writeln!(f, "sigma: {:.6}", self.sigma)?;
        writeln!(f, "q: {}", self.q)?;
        writeln!(f, "steps: {}", self.steps)?;
        writeln!(f, "method: {}", self.method)?;
        writeln!(f, "guarantee: {}", self.guarantee)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub vocab_tokens: usize,
    pub lengths: (usize, usize),
    pub seed: u64,
    pub format: Format,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            train_pairs: 2000,
            test_pairs: 200,
            vocab_tokens: 50,
            lengths: (3, 8),
            seed: 0,
            format: Format::Jsonl,
        }
    }
}

/// Writes a reversal corpus as `train.<fmt>` and `test.<fmt>` under `dir`.
/// The test split is drawn from an independent stream.
pub fn synth(dir: &Path, opts: &SynthOptions) -> Result<(PathBuf, PathBuf), HarnessError> {
    let (lo, hi) = opts.lengths;
    if opts.train_pairs == 0 || opts.test_pairs == 0 || opts.vocab_tokens == 0 || lo == 0 || lo > hi {
        return Err(HarnessError::Config(format!(
            "synthetic corpus needs positive sizes and 1 <= min length <= max length, got {opts:?}"
        )));
    }
    create_out(dir)?;
    let train = synth_reversal(opts.train_pairs, opts.vocab_tokens, opts.lengths, opts.seed);
    let mut test = synth_reversal(opts.test_pairs, opts.vocab_tokens, opts.lengths, opts.seed ^ 0x7e57);
    test.name = SplitName::Test;
    let mut paths = Vec::new();
    for (split, name) in [(&train, "train"), (&test, "test")] {
        let path = split_file(dir, name, opts.format);
        std::fs::write(&path, write_parallel(split, opts.format)).map_err(|e| HarnessError::io(&path, e))?;
        paths.push(path);
    }
    let test_path = paths.pop().unwrap();
    Ok((paths.pop().unwrap(), test_path))
}
