//! Seeded search runs: every method against any [`Backend`].

use std::path::PathBuf;
use std::time::Instant;

use poolmix::baselines::{spos_sample, BseState, ResolutionTree};
use poolmix::mixture::{select_candidates, Candidate, MixtureState, PairSampler, SelectionMode};
use poolmix::rng::{Purpose, Stream};
use poolmix::search_space::Catalog;
use poolmix::surrogate::{BenchmarkTable, SurrogateBackend};
use poolmix::Backend;

use crate::cnn_backend::CnnBackend;
use crate::config::{BackendKind, ExperimentConfig, Method};
use crate::error::{io_err, HarnessError, Result};
use crate::records::{write_report, RecordWriter, RunRecord, RECORDS_FILE, REPORT_FILE};
use crate::report::{rank_and_report, FinalEvaluation, Report};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub report: Report,
}

/// The benchmark table a surrogate run uses: the configured file, or the
/// shipped CIFAR-10/ResNet20 table for the default space.
pub fn load_table(cfg: &ExperimentConfig) -> Result<BenchmarkTable> {
    match &cfg.benchmark {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            Ok(BenchmarkTable::parse(&text, cfg.space()?)?)
        }
        None => {
            let table = BenchmarkTable::resnet20_cifar10();
            if table.catalog().space() != &cfg.space()? {
                return Err(HarnessError::Config(vec![
                    "the shipped benchmark table only covers L=10, p=2, 32 px".into(),
                ]));
            }
            Ok(table)
        }
    }
}

/// Validates `cfg`, builds its backend and runs it. When `cfg.output` is
/// set, records stream to `records.jsonl` there and the report lands in
/// `report.json`.
pub fn run_search(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut writer = match &cfg.output {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            Some(RecordWriter::create(&dir.join(RECORDS_FILE))?)
        }
        None => None,
    };
    let out = match cfg.backend {
        BackendKind::Surrogate => {
            let table = load_table(cfg)?;
            let catalog = table.catalog().clone();
            let m = cfg.backend_models(catalog.len());
            let mut backend =
                SurrogateBackend::new(table.clone(), m, cfg.surrogate_params(), cfg.seed)?;
            let mut out =
                run_with_backend(cfg, &catalog, &mut backend, Some(&table), writer.as_mut())?;
            out.report.history_diversity = Some(backend.interference().diversity(&table));
            out
        }
        BackendKind::Cnn => {
            let catalog = Catalog::new(cfg.space()?)?;
            let m = cfg.backend_models(catalog.len());
            let mut backend = CnnBackend::from_config(cfg, &catalog, m)?;
            run_with_backend(cfg, &catalog, &mut backend, None, writer.as_mut())?
        }
    };
    if let Some(dir) = &cfg.output {
        write_report(&dir.join(REPORT_FILE), &out.report)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, cfg.to_toml_string()).map_err(io_err(path))?;
    }
    Ok(out)
}

// one per run; the random streams make every variant large
#[allow(clippy::large_enum_variant)]
enum Sampler {
    Mixture {
        state: MixtureState,
        pairs: PairSampler,
    },
    Spos(Stream),
    Bse(BseState, Stream),
    Mcts {
        tree: ResolutionTree,
        rng: Stream,
        warmup: usize,
    },
    RoundRobin,
}

/// Runs the search loop of `cfg.method` on `backend`, then the final
/// evaluation and the report. Errors abort with the failing step; records
/// already produced have been flushed to `writer`.
pub fn run_with_backend<B: Backend>(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    backend: &mut B,
    table: Option<&BenchmarkTable>,
    mut writer: Option<&mut RecordWriter>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n = catalog.len();
    let models = cfg.backend_models(n);
    if backend.num_configs() != n || backend.num_models() != models {
        return Err(HarnessError::Data(format!(
            "backend holds {} x {} pairs, the run needs {n} x {models}",
            backend.num_configs(),
            backend.num_models()
        )));
    }
    let total = cfg.total_steps(n);
    let params = cfg.mixture_params();
    let config_rng = || Stream::new(cfg.seed, Purpose::ConfigSampling);
    let mut sampler = match cfg.method {
        Method::Balanced => Sampler::Mixture {
            state: MixtureState::new(n, models, total as u64, &params)?,
            pairs: PairSampler::new(cfg.seed),
        },
        Method::Spos => Sampler::Spos(config_rng()),
        Method::Bse => Sampler::Bse(
            BseState::new(
                n,
                1.0,
                cfg.bse_inv_temp_max,
                cfg.beta,
                cfg.init_acc,
                total as u64,
            )?,
            config_rng(),
        ),
        Method::Mcts | Method::MctsWarmup => Sampler::Mcts {
            tree: ResolutionTree::build(catalog)?,
            rng: config_rng(),
            warmup: cfg.warmup_steps(n),
        },
        Method::Bruteforce => Sampler::RoundRobin,
    };

    let start = Instant::now();
    let mut records = Vec::with_capacity(total);
    for step in 0..total {
        let rec = iteration(cfg, catalog, backend, &mut sampler, step, total, start);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                if let Some(w) = writer.as_deref_mut() {
                    w.flush()?;
                }
                return Err(HarnessError::Aborted {
                    step: step as u64,
                    source: Box::new(e),
                });
            }
        };
        if let Some(w) = writer.as_deref_mut() {
            w.append(&rec)?;
        }
        records.push(rec);
    }
    if let Some(w) = writer {
        w.flush()?;
    }

    let eval = final_evaluation(&sampler, backend, &params, n, cfg.method).map_err(|e| {
        HarnessError::Aborted {
            step: total as u64,
            source: Box::new(e.into()),
        }
    })?;
    let report = rank_and_report(cfg, catalog, &records, Some(&eval), table)?;
    Ok(RunOutput { records, report })
}

fn iteration<B: Backend>(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    backend: &mut B,
    sampler: &mut Sampler,
    step: usize,
    total: usize,
    start: Instant,
) -> Result<RunRecord> {
    let params = cfg.mixture_params();
    let mut path = None;
    let (c, m, tau) = match sampler {
        Sampler::Mixture { state, pairs } => {
            let joint = state.balanced_joint(&params)?;
            let tau = state.temperature_at(state.step());
            let (c, m) = pairs.sample_pair(&joint);
            (c, m, Some(tau))
        }
        Sampler::Spos(rng) => (spos_sample(catalog.len(), rng), 0, None),
        Sampler::Bse(bse, rng) => (bse.sample(rng), 0, Some(1.0 / bse.inv_temp())),
        Sampler::Mcts { tree, rng, warmup } => {
            let p = tree.select_path(cfg.explore_c, step < *warmup, rng)?;
            let c = p.config;
            path = Some(p);
            (c, 0, None)
        }
        Sampler::RoundRobin => (step % catalog.len(), step % catalog.len(), None),
    };
    let loss = backend.train(c, m, step, total)?;
    let acc = backend.validate_minibatch(c, m)?;
    match sampler {
        Sampler::Mixture { state, .. } => state.update_accuracy(c, m, acc)?,
        Sampler::Bse(bse, _) => bse.observe(c, acc)?,
        Sampler::Mcts { tree, .. } => {
            tree.backpropagate(path.as_ref().expect("path selected above"), acc)?
        }
        _ => {}
    }
    Ok(RunRecord {
        step: step as u64,
        method: cfg.method,
        config: catalog.config(c).clone(),
        config_id: c,
        model: m,
        accuracy: acc,
        tau,
        loss,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn final_evaluation<B: Backend>(
    sampler: &Sampler,
    backend: &mut B,
    params: &poolmix::mixture::MixtureParams,
    n: usize,
    method: Method,
) -> poolmix::Result<FinalEvaluation> {
    match sampler {
        Sampler::Mixture { state, .. } => {
            let joint = state.balanced_joint(params)?;
            let scores = select_candidates(state, &joint, n, SelectionMode::Full, |c, m| {
                backend.evaluate_full(c, m)
            })?;
            Ok(FinalEvaluation {
                scores,
                selected: None,
            })
        }
        _ => {
            let scores = (0..n)
                .map(|c| {
                    let m = if method == Method::Bruteforce { c } else { 0 };
                    Ok(Candidate {
                        config: c,
                        model: m,
                        score: backend.evaluate_full(c, m)?,
                    })
                })
                .collect::<poolmix::Result<Vec<_>>>()?;
            let selected = match sampler {
                Sampler::Mcts { tree, .. } => tree.leaf_ranking().first().map(|l| l.0),
                _ => None,
            };
            Ok(FinalEvaluation { scores, selected })
        }
    }
}

/// Default output directory: `$POOLMIX_OUTPUT_DIR`, else `runs/` under the
/// working directory.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Copy of the run configuration written next to the records.
pub const CONFIG_FILE: &str = "config.toml";

pub const OUTPUT_ENV: &str = "POOLMIX_OUTPUT_DIR";
