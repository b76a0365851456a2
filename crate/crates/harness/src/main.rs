use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poolmix::rng::{Purpose, Stream};
use poolmix::search_space::{config_to_positions, Catalog};
use poolmix::surrogate::kendall_tau;
use poolmix::SearchSpace;
use poolmix_cnn::gradcheck::{check_objective, LinearSoftmaxToy};
use poolmix_cnn::{build_network, gradient_check, Tensor4, WeightSet};
use poolmix_harness::records::{read_records, RECORDS_FILE, REPORT_FILE};
use poolmix_harness::search::{default_output_dir, load_table, CONFIG_FILE, OUTPUT_ENV};
use poolmix_harness::{
    load_results, rank_and_report, run_search, BackendKind, DatasetKind, ExperimentConfig,
    HarnessError, Method, Report, Result,
};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "poolmix",
    version,
    about = "Search for pooling placements with a balanced mixture of SuperNets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// List every configuration of a search space.
    Enumerate {
        #[arg(long, default_value_t = 10)]
        total_blocks: u32,
        #[arg(long, default_value_t = 2)]
        num_poolings: u32,
        #[arg(long, default_value_t = 32)]
        input_size: u32,
    },
    /// Run one seeded search.
    Search(SearchArgs),
    /// Rebuild the proxy ranking of a finished run from its records.
    Rank {
        /// Run directory holding config.toml and records.jsonl.
        run: PathBuf,
    },
    /// Finite-difference gradient checks of the CNN.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 300)]
        coords: usize,
    },
    /// Kendall rank correlation of a run's estimates with the benchmark table.
    Correlate { run: PathBuf },
}

#[derive(Args, Default)]
struct SearchArgs {
    /// TOML file with ExperimentConfig fields; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    total_blocks: Option<u32>,
    #[arg(long)]
    num_poolings: Option<u32>,
    #[arg(long)]
    input_size: Option<u32>,
    /// Comma-separated output channels per block.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    channel_base: Option<usize>,
    #[arg(long)]
    models: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_ipf_iters: Option<usize>,
    #[arg(long)]
    tau_init: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    init_acc: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    explore_c: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    bse_inv_temp_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Run directory; defaults to $POOLMIX_OUTPUT_DIR or ./runs.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    synth_per_class: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    full_eval_batches: Option<usize>,
}

impl SearchArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f { cfg.$f = v; }
            )*};
        }
        macro_rules! set_some {
            ($($f:ident),*) => {$(
                if self.$f.is_some() { cfg.$f = self.$f; }
            )*};
        }
        set!(
            method,
            backend,
            total_blocks,
            num_poolings,
            input_size,
            channel_base,
            models,
            iterations,
            beta,
            delta,
            max_ipf_iters,
            tau_init,
            init_acc,
            lambda,
            sigma,
            history,
            eval_batches,
            explore_c,
            bse_inv_temp_max,
            seed,
            top_k,
            dataset,
            synth_per_class,
            batch_size,
            lr,
            momentum,
            weight_decay
        );
        set_some!(
            channels,
            tau_min,
            benchmark,
            warmup,
            output,
            data_path,
            full_eval_batches
        );
        if cfg.output.is_none() {
            cfg.output = Some(default_output_dir());
        }
        Ok(cfg)
    }
}

fn print_report(report: &Report) {
    let s = &report.selected;
    out!(
        "selected {} (model {}, score {:.4}, {} visits)",
        s.config,
        s.best_model,
        s.score,
        s.visits
    );
    for r in &report.top_k {
        let mark = if r.unvisited { "  unvisited" } else { "" };
        out!(
            "  {:>3}. {:<10} {:.4}{mark}",
            r.rank,
            r.config.to_string(),
            r.score
        );
    }
    if let Some(t) = report.kendall_tau {
        out!("kendall tau (full evaluation): {t:.4}");
    }
    if let Some(t) = report.proxy_kendall_tau {
        out!("kendall tau (proxy): {t:.4}");
    }
}

fn enumerate(total_blocks: u32, num_poolings: u32, input_size: u32) -> Result<()> {
    let space = SearchSpace::new(total_blocks, num_poolings, input_size)?;
    let catalog = Catalog::new(space)?;
    for (i, c) in catalog.configs().iter().enumerate() {
        out!("{i}\t{c}\t{:?}", config_to_positions(c));
    }
    eprintln!("{} configurations", catalog.len());
    Ok(())
}

fn gradcheck(seed: u64, epsilon: f64, coords: usize) -> Result<bool> {
    let mut rng = Stream::new(seed, Purpose::GradCheck);
    let toy = LinearSoftmaxToy::random(6, 4, 4, &mut rng);
    let rep = check_objective(toy, 3e-5, usize::MAX, &mut rng);
    let mut ok = rep.max_rel_error < 1e-7;
    out!(
        "linear-softmax toy: max rel error {:.3e} over {} coords",
        rep.max_rel_error,
        rep.checked
    );

    let space = SearchSpace::new(3, 2, 8)?;
    let mut data = Stream::new(seed, Purpose::DataGen);
    let x: Vec<f64> = (0..4 * 2 * 64).map(|_| data.standard_normal()).collect();
    let x = Tensor4::from_vec([4, 2, 8, 8], x)?;
    let labels = vec![0, 1, 2, 1];
    for config in space.enumerate()? {
        let plan = build_network(&space, &config, &[3, 4, 6], 2, 8, 3)?;
        let ws = WeightSet::<f64>::init(&plan, 0, seed);
        let rep = gradient_check(&plan, &ws, &x, &labels, epsilon, coords, &mut rng)?;
        ok &= rep.max_rel_error < 1e-4;
        out!(
            "3-block net {config}: max rel error {:.3e} over {} coords ({} skipped at kinks)",
            rep.max_rel_error,
            rep.checked,
            rep.skipped
        );
    }
    Ok(ok)
}

fn rank(run: PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
    let records = read_records(&run.join(RECORDS_FILE))?;
    let (catalog, table) = match cfg.backend {
        BackendKind::Surrogate => {
            let t = load_table(&cfg)?;
            (t.catalog().clone(), Some(t))
        }
        BackendKind::Cnn => (Catalog::new(cfg.space()?)?, None),
    };
    let report = rank_and_report(&cfg, &catalog, &records, None, table.as_ref())?;
    out!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

fn correlate(run: PathBuf) -> Result<()> {
    let (_, report) = load_results(&run)?;
    let truth: Option<Vec<f64>> = report.scatter.iter().map(|p| p.truth).collect();
    let Some(truth) = truth else {
        return Err(HarnessError::Data(format!(
            "{} has no ground truth to correlate with",
            run.join(REPORT_FILE).display()
        )));
    };
    let proxy: Vec<f64> = report.scatter.iter().map(|p| p.proxy).collect();
    let full: Option<Vec<f64>> = report.scatter.iter().map(|p| p.estimated).collect();
    if let Some(full) = full {
        out!("full evaluation: {:.4}", kendall_tau(&full, &truth)?);
    }
    out!("proxy: {:.4}", kendall_tau(&proxy, &truth)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Enumerate {
            total_blocks,
            num_poolings,
            input_size,
        } => enumerate(total_blocks, num_poolings, input_size),
        Command::Search(args) => args.resolve().and_then(|cfg| {
            let out = run_search(&cfg)?;
            print_report(&out.report);
            if let Some(dir) = &cfg.output {
                eprintln!(
                    "results in {} (override with --output or {OUTPUT_ENV})",
                    dir.display()
                );
            }
            Ok(())
        }),
        Command::Rank { run } => rank(run),
        Command::Gradcheck {
            seed,
            epsilon,
            coords,
        } => match gradcheck(seed, epsilon, coords) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Correlate { run } => correlate(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
