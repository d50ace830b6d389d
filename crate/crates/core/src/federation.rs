//! The federated averaging protocol.
//!
//! Each round the server samples `clients_per_round` of the M clients,
//! sends them the current adapter parameters, lets each fine-tune locally
//! on its kept pairs and replaces the global parameters with the
//! dataset-size weighted mean of the returned sets. Weights are
//! renormalized over the sampled clients.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_checkpoint, CheckpointMeta};
use crate::config::FederationConfig;
use crate::corpus_io::GeneratedDataset;
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, SplitMix64};
use crate::tensor::{ParameterSet, Tensor};
use crate::types::InstructionPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyperparams {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub local_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRequest<'a> {
    pub round: usize,
    pub client_id: &'a str,
    pub params: &'a ParameterSet,
    pub dataset: &'a [InstructionPair],
    pub hyper: TrainHyperparams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: ParameterSet,
    pub num_examples: usize,
    pub train_loss: f32,
}

/// Local fine-tuning on one client.
pub trait TrainerBackend: Send + Sync {
    fn train(&self, request: &TrainRequest<'_>) -> Result<TrainResult>;
}

/// Returns the parameters untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTrainer;

impl TrainerBackend for IdentityTrainer {
    fn train(&self, request: &TrainRequest<'_>) -> Result<TrainResult> {
        Ok(TrainResult {
            params: request.params.clone(),
            num_examples: request.dataset.len(),
            train_loss: 0.0,
        })
    }
}

/// A least-squares objective ½‖A w − b‖² over the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    rows: usize,
    dim: usize,
    /// Row-major `rows × dim`.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Quadratic {
    pub fn new(rows: usize, dim: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != rows * dim || b.len() != rows {
            return Err(Error::Config(format!(
                "quadratic needs a {rows}x{dim} matrix and {rows} targets"
            )));
        }
        Ok(Self { rows, dim, a, b })
    }

    /// Entries of A uniform in ±1/√rows, b uniform in [-1, 1].
    pub fn random(rows: usize, dim: usize, rng: &mut SplitMix64) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        let a = (0..rows * dim).map(|_| rng.uniform(-scale, scale)).collect();
        let b = (0..rows).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Self { rows, dim, a, b }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn residual(&self, w: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.a[r * self.dim..(r + 1) * self.dim];
                row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - self.b[r]
            })
            .collect()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        0.5 * self.residual(w).iter().map(|r| r * r).sum::<f64>()
    }

    /// Aᵀ(A w − b).
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let res = self.residual(w);
        let mut g = vec![0.0; self.dim];
        for (r, e) in res.iter().enumerate() {
            let row = &self.a[r * self.dim..(r + 1) * self.dim];
            for (gi, a) in g.iter_mut().zip(row) {
                *gi += a * e;
            }
        }
        g
    }
}

/// Runs `local_steps` full-batch gradient steps on a per-client quadratic.
/// The reported loss is the mean of the pre-step losses.
#[derive(Debug, Clone, Default)]
pub struct SimulatedTrainer {
    problems: BTreeMap<String, Quadratic>,
}

impl SimulatedTrainer {
    pub fn new(problems: BTreeMap<String, Quadratic>) -> Self {
        Self { problems }
    }

    /// One random quadratic per client, each from its own stream.
    pub fn seeded<'a>(
        seed: u64,
        client_ids: impl IntoIterator<Item = &'a str>,
        dim: usize,
        rows: usize,
    ) -> Self {
        let problems = client_ids
            .into_iter()
            .map(|id| {
                let mut rng = seeded_rng(seed, &format!("sim-trainer/{id}"));
                (id.to_string(), Quadratic::random(rows, dim, &mut rng))
            })
            .collect();
        Self { problems }
    }

    pub fn problem(&self, client_id: &str) -> Option<&Quadratic> {
        self.problems.get(client_id)
    }
}

impl TrainerBackend for SimulatedTrainer {
    fn train(&self, req: &TrainRequest<'_>) -> Result<TrainResult> {
        let problem = self.problems.get(req.client_id).ok_or_else(|| {
            Error::Config(format!("no simulated objective for client {:?}", req.client_id))
        })?;
        let flat = req.params.flatten();
        if flat.len() != problem.dim {
            return Err(Error::Config(format!(
                "simulated objective has dimension {}, parameters have {}",
                problem.dim,
                flat.len()
            )));
        }
        let lr = f64::from(req.hyper.learning_rate);
        let mut w: Vec<f64> = flat.iter().map(|&x| f64::from(x)).collect();
        let mut loss_sum = 0.0;
        for _ in 0..req.hyper.local_steps {
            loss_sum += problem.loss(&w);
            let g = problem.gradient(&w);
            for (x, gi) in w.iter_mut().zip(g) {
                *x -= lr * gi;
            }
        }
        let steps = req.hyper.local_steps.max(1) as f64;
        let train_loss = if req.hyper.local_steps == 0 {
            problem.loss(&w)
        } else {
            loss_sum / steps
        };
        let mut params = req.params.clone();
        let w32: Vec<f32> = w.iter().map(|&x| x as f32).collect();
        params.assign_flat(&w32)?;
        Ok(TrainResult {
            params,
            num_examples: req.dataset.len(),
            train_loss: train_loss as f32,
        })
    }
}

/// Uniform draw without replacement, returned in draw order.
pub fn sample_clients<S: AsRef<str>>(
    all_ids: &[S],
    clients_per_round: usize,
    rng: &mut SplitMix64,
) -> Vec<String> {
    rng.sample_indices(all_ids.len(), clients_per_round)
        .into_iter()
        .map(|i| all_ids[i].as_ref().to_string())
        .collect()
}

/// `p_m = N_m / Σ N_i` over the given clients.
pub fn client_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Dataset-size weighted mean, element by element.
///
/// Products are formed in f64 and each element's terms are summed in sorted
/// order, so the result does not depend on the order of the clients.
pub fn aggregate(client_params: &[ParameterSet], sizes: &[usize]) -> Result<ParameterSet> {
    let Some(first) = client_params.first() else {
        return Err(Error::Config("no parameter sets to aggregate".into()));
    };
    if client_params.len() != sizes.len() {
        return Err(Error::Config(format!(
            "{} parameter sets but {} dataset sizes",
            client_params.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    for p in &client_params[1..] {
        first.check_compatible(p)?;
    }
    let weights = client_weights(sizes);

    let mut out = ParameterSet::new();
    let mut terms = vec![0f64; client_params.len()];
    for (name, tensor) in first.iter() {
        let sources: Vec<&[f32]> = client_params
            .iter()
            .map(|p| p.get(name).expect("checked compatible").data())
            .collect();
        let data = (0..tensor.data().len())
            .map(|e| {
                for ((t, src), w) in terms.iter_mut().zip(&sources).zip(&weights) {
                    *t = w * f64::from(src[e]);
                }
                terms.sort_by(f64::total_cmp);
                terms.iter().copied().reduce(|a, b| a + b).unwrap() as f32
            })
            .collect();
        out.insert(name, Tensor::new(tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Draw order.
    pub sampled_client_ids: Vec<String>,
    /// `p_m`, parallel to `sampled_client_ids`.
    pub weights: Vec<f32>,
    pub train_losses: Vec<f32>,
    /// Sum of every element of the aggregated parameters.
    pub checksum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub params: ParameterSet,
    pub records: Vec<RoundRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const ROUND_RECORDS_FILE: &str = "rounds.jsonl";

pub fn checkpoint_name(completed_rounds: usize) -> String {
    format!("round_{completed_rounds:05}.ftp1")
}

/// Per-round hyperparameter seed for one client.
pub fn train_seed(seed: u64, round: usize, client_id: &str) -> u64 {
    seeded_rng(seed, &format!("train/{round}/{client_id}")).next_u64()
}

struct RecordLog {
    writer: Option<BufWriter<File>>,
    path: PathBuf,
}

impl RecordLog {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                writer: None,
                path: PathBuf::new(),
            });
        };
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(ROUND_RECORDS_FILE);
        let file = File::create(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(Self {
            writer: Some(BufWriter::new(file)),
            path,
        })
    }

    fn append(&mut self, record: &RoundRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let ctx = || format!("writing {}", self.path.display());
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
            w.flush().map_err(|e| Error::io(ctx(), e))?;
        }
        Ok(())
    }
}

/// Runs `config.rounds` rounds of FedAvg.
///
/// Client datasets are used in the given order for sampling; only kept
/// pairs are trained on and counted as `N_m`. With a checkpoint directory,
/// round records stream to `rounds.jsonl` and a checkpoint is written every
/// `checkpoint_interval` rounds and after the last round. A trainer failure,
/// or a trainer result incompatible with the parameters it was sent, aborts
/// the run after its round record (with the error) is written.
pub fn run_federation(
    config: &FederationConfig,
    clients: &[GeneratedDataset],
    init: &ParameterSet,
    trainer: &dyn TrainerBackend,
    checkpoint_dir: Option<&Path>,
) -> Result<FederationOutcome> {
    config.validate()?;
    if clients.len() != config.num_clients {
        return Err(Error::Config(format!(
            "num_clients is {} but {} client datasets were given",
            config.num_clients,
            clients.len()
        )));
    }
    let mut ids = HashSet::new();
    let datasets: Vec<Vec<InstructionPair>> = clients
        .iter()
        .map(|c| {
            if !ids.insert(c.client_id.as_str()) {
                return Err(Error::DuplicateId(c.client_id.clone()));
            }
            let kept: Vec<InstructionPair> = c.kept().cloned().collect();
            if kept.is_empty() {
                return Err(Error::Config(format!(
                    "client {:?} has no kept pairs",
                    c.client_id
                )));
            }
            Ok(kept)
        })
        .collect::<Result<_>>()?;
    let client_ids: Vec<&str> = clients.iter().map(|c| c.client_id.as_str()).collect();

    let mut log = RecordLog::open(checkpoint_dir)?;
    let mut sampler = seeded_rng(config.seed, "sampling");
    let mut params = init.clone();
    let mut records = Vec::with_capacity(config.rounds);
    let mut checkpoints = Vec::new();

    for round in 0..config.rounds {
        let sampled = sample_clients(&client_ids, config.clients_per_round, &mut sampler);
        let positions: Vec<usize> = sampled
            .iter()
            .map(|id| client_ids.iter().position(|c| c == id).unwrap())
            .collect();
        let sizes: Vec<usize> = positions.iter().map(|&i| datasets[i].len()).collect();
        let weights: Vec<f32> = client_weights(&sizes).iter().map(|&w| w as f32).collect();

        let results = dispatch(config, round, &sampled, &positions, &datasets, &params, trainer);

        let mut trained = Vec::with_capacity(results.len());
        let mut failure = None;
        for (id, res) in sampled.iter().zip(results) {
            let expected = datasets_len(&datasets, &client_ids, id);
            match res {
                Ok(r) => match check_result(r, &params, expected) {
                    Ok(r) => trained.push((id.clone(), r)),
                    Err(e) => {
                        failure = Some(e.context(format!("client {id:?}, round {round}")));
                        break;
                    }
                },
                Err(e) => {
                    failure = Some(Error::TrainerFailure {
                        client_id: id.clone(),
                        round,
                        reason: e.to_string(),
                    });
                    break;
                }
            }
        }
        if let Some(err) = failure {
            let record = RoundRecord {
                round,
                sampled_client_ids: sampled,
                weights,
                train_losses: Vec::new(),
                checksum: params.checksum(),
                error: Some(err.to_string()),
            };
            log.append(&record)?;
            return Err(err);
        }

        let train_losses = trained.iter().map(|(_, r)| r.train_loss).collect();
        // aggregate in client-id order
        trained.sort_by(|a, b| a.0.cmp(&b.0));
        let sizes: Vec<usize> = trained.iter().map(|(_, r)| r.num_examples).collect();
        let sets: Vec<ParameterSet> = trained.into_iter().map(|(_, r)| r.params).collect();
        params = aggregate(&sets, &sizes)?;

        let record = RoundRecord {
            round,
            sampled_client_ids: sampled,
            weights,
            train_losses,
            checksum: params.checksum(),
            error: None,
        };
        log.append(&record)?;
        records.push(record);

        let completed = round + 1;
        if let Some(dir) = checkpoint_dir {
            if completed % config.checkpoint_interval == 0 || completed == config.rounds {
                let path = dir.join(checkpoint_name(completed));
                let meta = CheckpointMeta {
                    round: Some(completed as u64),
                    seed: Some(config.seed),
                };
                write_checkpoint(&path, &params, &meta)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(FederationOutcome {
        params,
        records,
        checkpoints,
    })
}

fn datasets_len(datasets: &[Vec<InstructionPair>], ids: &[&str], id: &str) -> usize {
    datasets[ids.iter().position(|c| *c == id).unwrap()].len()
}

fn check_result(r: TrainResult, sent: &ParameterSet, expected: usize) -> Result<TrainResult> {
    sent.check_compatible(&r.params)?;
    if r.num_examples != expected {
        return Err(Error::BackendProtocol(format!(
            "trainer reported {} examples, dataset has {expected}",
            r.num_examples
        )));
    }
    Ok(r)
}

/// Trains the sampled clients, at most `parallelism` at a time. Results are
/// in sampled order.
fn dispatch(
    config: &FederationConfig,
    round: usize,
    sampled: &[String],
    positions: &[usize],
    datasets: &[Vec<InstructionPair>],
    params: &ParameterSet,
    trainer: &dyn TrainerBackend,
) -> Vec<Result<TrainResult>> {
    let jobs: Vec<(&str, &[InstructionPair])> = sampled
        .iter()
        .zip(positions)
        .map(|(id, &i)| (id.as_str(), datasets[i].as_slice()))
        .collect();
    let run = |(id, data): (&str, &[InstructionPair])| {
        trainer.train(&TrainRequest {
            round,
            client_id: id,
            params,
            dataset: data,
            hyper: TrainHyperparams {
                learning_rate: config.learning_rate,
                batch_size: config.batch_size,
                local_steps: config.local_steps,
                seed: train_seed(config.seed, round, id),
            },
        })
    };
    if config.parallelism <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(run).collect();
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(config.parallelism) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&job| s.spawn(move || run(job))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("trainer thread panicked")));
        });
    }
    out
}
