use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gentd::gvf::block_norms;
use gentd::harness::config::{feature_kind_name, ExperimentConfig, Learner};
use gentd::harness::experiment::{
    build_task_from_config, read_records, run_experiment, Evaluator, Record,
};
use gentd::harness::verify::{verify_all, VerifyOptions};
use gentd::Error;

#[derive(Parser)]
#[command(name = "gentd", version, about = "Off-policy GVF evaluation on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the exact GVF of a task and print its block norms.
    GroundTruth(ExpArgs),
    /// Train one learner over a set of seeds and write learning curves.
    Train(ExpArgs),
    /// Compare learning-curve CSVs, or train GenTD and GTD side by side when none are given.
    Compare {
        #[command(flatten)]
        exp: ExpArgs,
        /// `mean.csv` or `per_seed.csv` files to compare.
        csv: Vec<PathBuf>,
    },
    /// Run the self-check suite.
    Verify {
        /// Write the machine-readable report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Test contraction against `factor * (1 + gamma_max)`.
        #[arg(long, default_value_t = 0.5)]
        gamma_g_factor: f64,
        #[arg(long, default_value_t = 20)]
        specs: usize,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baird | example1
    #[arg(long)]
    env: Option<String>,
    /// Model file; replaces --env.
    #[arg(long)]
    model: Option<PathBuf>,
    /// grad_q | grad_logmu | variance | anomaly | canonical | backward_value
    #[arg(long)]
    task: Option<String>,
    /// cft | incft
    #[arg(long)]
    features: Option<String>,
    /// gentd | gtd
    #[arg(long)]
    learner: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    /// N, a..b or a,b,c
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lr_theta: Option<f64>,
    #[arg(long)]
    lr_ratio: Option<f64>,
    #[arg(long)]
    theta_offset: Option<f64>,
    #[arg(long)]
    ratio_offset: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// zero | ones
    #[arg(long)]
    ratio_init: Option<String>,
    #[arg(long)]
    oracle_ratio: bool,
    #[arg(long)]
    checkpoint: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn config(&self) -> gentd::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", path.display()))
            })?)?;
        }
        let text_flags = [
            ("env", &self.env),
            ("task", &self.task),
            ("features", &self.features),
            ("learner", &self.learner),
            ("seeds", &self.seeds),
            ("ratio_init", &self.ratio_init),
        ];
        for (k, v) in text_flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(m) = &self.model {
            cfg.env = gentd::harness::config::EnvId::File(m.clone());
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        cfg.lr_theta = self.lr_theta.or(cfg.lr_theta);
        cfg.lr_ratio = self.lr_ratio.or(cfg.lr_ratio);
        cfg.theta_offset = self.theta_offset.or(cfg.theta_offset);
        cfg.ratio_offset = self.ratio_offset.or(cfg.ratio_offset);
        cfg.oracle_ratio |= self.oracle_ratio;
        cfg.checkpoint |= self.checkpoint;
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6e}"))
}

fn print_final(label: &str, r: &Record) {
    println!(
        "{label:<24} iter {:>9}  error {:.6e}  mspgbe {:.6e}  ratio {}",
        r.iteration,
        r.estimation_error,
        r.mspgbe,
        fmt_opt(r.ratio_error)
    );
}

fn ground_truth(args: &ExpArgs) -> gentd::Result<()> {
    let cfg = args.config()?;
    let setup = build_task_from_config(&cfg)?;
    let norms = block_norms(&setup.ground_truth, setup.env.mu.mu(), setup.case.spec.dims())?;
    println!("env {} task {} ({} pairs)", cfg.env, cfg.task, setup.env.mdp.num_pairs());
    println!("mu = {:?}", setup.env.mu.mu().as_slice());
    for (i, n) in norms.iter().enumerate() {
        println!(
            "block {i}: dim {} discount {} mu-norm {n:.6}",
            setup.case.spec.dims()[i],
            setup.case.spec.discounts()[i]
        );
    }
    println!("total mu-norm {:.6}", Evaluator::new(&setup)?.ground_truth_norm());
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("ground_truth.csv"))?;
        w.write_record(["block", "pair", "coord", "value"])?;
        let offsets = setup.op.offsets();
        for (b, (&off, &d)) in offsets.iter().zip(setup.case.spec.dims()).enumerate() {
            for x in 0..setup.env.mdp.num_pairs() {
                for c in 0..d {
                    w.write_record([
                        b.to_string(),
                        x.to_string(),
                        c.to_string(),
                        setup.ground_truth[off + x * d + c].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn train(args: &ExpArgs) -> gentd::Result<()> {
    let cfg = args.config()?;
    let run = run_experiment(&cfg)?;
    print_final(&format!("{} mean", cfg.learner), run.final_mean());
    Ok(())
}

fn compare(args: &ExpArgs, csv: &[PathBuf]) -> gentd::Result<()> {
    if csv.is_empty() {
        let base = args.config()?;
        let mut finals = Vec::new();
        for learner in [Learner::GenTd, Learner::Gtd] {
            let mut cfg = ExperimentConfig { learner, lr_theta: None, lr_ratio: None, ..base.clone() };
            cfg.lr_theta = args.lr_theta;
            cfg.lr_ratio = args.lr_ratio;
            cfg.out = base.out.as_ref().map(|o| o.join(learner.to_string()));
            let run = run_experiment(&cfg)?;
            finals.push((learner.to_string(), run.final_mean().clone()));
        }
        println!("{} {} {}", base.env, base.task, feature_kind_name(base.features));
        for (l, r) in &finals {
            print_final(l, r);
        }
        println!(
            "final error ratio gtd/gentd = {:.4}",
            finals[1].1.estimation_error / finals[0].1.estimation_error
        );
        return Ok(());
    }
    for path in csv {
        let recs = read_records(fs::File::open(path)?)?;
        let Some(last_iter) = recs.iter().map(|r| r.iteration).max() else {
            return Err(Error::Config(format!("{} has no records", path.display())));
        };
        // Per-seed files are averaged at their last checkpoint.
        let last: Vec<&Record> = recs.iter().filter(|r| r.iteration == last_iter).collect();
        let k = last.len() as f64;
        let ratio = last
            .iter()
            .map(|r| r.ratio_error)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / k);
        let mean = Record {
            iteration: last_iter,
            seed: None,
            estimation_error: last.iter().map(|r| r.estimation_error).sum::<f64>() / k,
            mspgbe: last.iter().map(|r| r.mspgbe).sum::<f64>() / k,
            ratio_error: ratio,
        };
        print_final(&path.display().to_string(), &mean);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GroundTruth(a) => ground_truth(a),
        Command::Train(a) => train(a),
        Command::Compare { exp, csv } => compare(exp, csv),
        Command::Verify { report, gamma_g_factor, specs, pairs } => {
            let opts = VerifyOptions {
                gamma_g_factor: *gamma_g_factor,
                num_specs: *specs,
                pairs_per_spec: *pairs,
                ..Default::default()
            };
            let rep = verify_all(&opts);
            print!("{}", rep.to_text());
            if let Some(path) = report {
                let written = fs::File::create(path)
                    .map_err(Error::from)
                    .and_then(|f| rep.write_csv(f));
                if let Err(e) = written {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            return if rep.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::NotParameterized | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
