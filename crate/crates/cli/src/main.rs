use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rfcn_core::backbone::{default_specs, doubled_specs, max_feasible_side, memory_plan, BlockSpec};
use rfcn_core::config::ExperimentConfig;
use rfcn_core::data_io::{load_dataset, load_model, read_text, save_dataset, save_model, write_text};
use rfcn_core::gradcheck::run_suite;
use rfcn_core::inference::DihedralTransform;
use rfcn_core::phantom::generate_dataset;
use rfcn_core::pipeline::{evaluate_table, inference_transforms, normalized_images, score_images, train_model, training_images};
use rfcn_core::{Error, Network, Result, ScoreTable};

#[derive(Parser)]
#[command(name = "rfcn", version, about = "Deformable R-FCN detection on synthetic mammography phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => ExperimentConfig::parse(&format!("schema_version = {}\n", rfcn_core::config::SCHEMA_VERSION), &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test phantom splits under `<out>/train` and `<out>/test`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on `<data>/train` and write `<out>/model.weights`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        data: PathBuf,
    },
    /// Score `<data>/test` with a trained model; writes `<out>/scores.tsv`.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Weight file; defaults to `<out>/model.weights`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Breast-wise and subject-wise ROC curves from a score table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Score table; defaults to `<out>/scores.tsv`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Activation and training memory of the backbone over a range of input sides.
    Memplan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        sides: Vec<usize>,
        /// Budget for the largest feasible input side, in MiB.
        #[arg(long, default_value_t = 1024)]
        budget_mib: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_element: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error\tusage\t{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, data } => train(&common, &data),
        Command::Infer { common, data, model } => infer(&common, &data, model),
        Command::Evaluate { common, data, scores } => evaluate(&common, &data, scores),
        Command::Gradcheck { common, seed } => gradcheck(&common, seed),
        Command::Memplan {
            common,
            sides,
            budget_mib,
            bytes_per_element,
        } => memplan(&common, &sides, budget_mib, bytes_per_element),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let (train_seed, test_seed) = cfg.data.split_seeds();
    for (split, exams, seed) in [
        ("train", cfg.data.train_exams, train_seed),
        ("test", cfg.data.test_exams, test_seed),
    ] {
        let data = generate_dataset(&cfg.data.phantom(exams), seed)?;
        save_dataset(&c.out.join(split), &data)?;
        let malignant = data.iter().flat_map(|e| e.exam.labels.values()).filter(|&&l| l).count();
        println!("{split}: {exams} exams, {} images, {malignant} malignant breasts", exams * 4);
    }
    cfg.save(&c.out.join("config.toml"))?;
    println!("wrote {}", c.out.display());
    Ok(())
}

fn train(c: &Common, data: &Path) -> Result<()> {
    let cfg = c.load()?;
    let exams = load_dataset(&data.join("train"))?;
    let images = training_images(&cfg, &exams)?;
    drop(exams);
    println!("training on {} images x 8 variants for {} epochs", images.len(), cfg.train.epochs);
    let mut log = String::from("epoch\tvariants\trpn_cls\trpn_reg\troi_cls\troi_reg\ttotal\tseconds\n");
    let start = Instant::now();
    let (_, params) = train_model(&cfg, &images, |s| {
        let m = s.mean;
        println!(
            "epoch {} variants {} loss {:.5} (rpn_cls {:.5} rpn_reg {:.5} roi_cls {:.5} roi_reg {:.5}) {:.1}s",
            s.epoch, s.variants, m.total, m.rpn_cls, m.rpn_reg, m.roi_cls, m.roi_reg, s.seconds
        );
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\n",
            s.epoch, s.variants, m.rpn_cls, m.rpn_reg, m.roi_cls, m.roi_reg, m.total, s.seconds
        ));
    })?;
    save_model(&c.out.join("model.weights"), &params)?;
    write_text(&c.out.join("train_log.tsv"), &log)?;
    cfg.save(&c.out.join("config.toml"))?;
    println!("trained in {:.1}s; wrote {}", start.elapsed().as_secs_f64(), c.out.join("model.weights").display());
    Ok(())
}

fn infer(c: &Common, data: &Path, model: Option<PathBuf>) -> Result<()> {
    let cfg = c.load()?;
    let path = model.unwrap_or_else(|| c.out.join("model.weights"));
    let params = load_model(&path)?;
    let net = Network::for_params(&cfg.model, &params)?;
    let exams = load_dataset(&data.join("test"))?;
    let images = normalized_images(&cfg, &exams)?;
    let transforms = inference_transforms(cfg.inference.augment);
    let table = score_images(&cfg, &net, &params, &images, &transforms)?;
    write_text(&c.out.join("scores.tsv"), &table.to_tsv())?;
    println!(
        "scored {} images x {} transforms; wrote {}",
        images.len(),
        transforms.len(),
        c.out.join("scores.tsv").display()
    );
    Ok(())
}

fn evaluate(c: &Common, data: &Path, scores: Option<PathBuf>) -> Result<()> {
    let cfg = c.load()?;
    let path = scores.unwrap_or_else(|| c.out.join("scores.tsv"));
    let table = ScoreTable::from_tsv(&read_text(&path)?)?;
    let exams = load_dataset(&data.join("test"))?;
    let has_all = table.iter().any(|(_, t, _)| t != DihedralTransform::IDENTITY);
    let mut runs = vec![("plain", inference_transforms(false))];
    if has_all {
        runs.push(("augmented", inference_transforms(true)));
    }
    for (name, transforms) in runs {
        let ev = evaluate_table(&exams, &table, &transforms, cfg.inference.variant_rule)?;
        write_text(&c.out.join(format!("roc_breast_{name}.tsv")), &ev.breast.to_tsv())?;
        write_text(&c.out.join(format!("roc_subject_{name}.tsv")), &ev.subject.to_tsv())?;
        println!("{name}: breast-wise AUC {:.4}, subject-wise AUC {:.4}", ev.breast.auc, ev.subject.auc);
    }
    Ok(())
}

fn gradcheck(c: &Common, seed: u64) -> Result<()> {
    c.load()?;
    let results = run_suite(seed)?;
    let mut report = String::from("operator\tmax_rel_err\ttolerance\tchecked\tstatus\n");
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<22} max rel err {:.3e} (tol {:.0e}, {} coords) {status}", r.name, r.max_rel_err, r.tolerance, r.checked);
        report.push_str(&format!("{}\t{:e}\t{:e}\t{}\t{status}\n", r.name, r.max_rel_err, r.tolerance, r.checked));
    }
    write_text(&c.out.join("gradcheck.tsv"), &report)?;
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(Error::InvalidInput(format!(
            "gradient check `{}` failed: {:e} > {:e}",
            r.name, r.max_rel_err, r.tolerance
        ))),
        None => Ok(()),
    }
}

fn memplan(c: &Common, sides: &[usize], budget_mib: u64, bytes: u64) -> Result<()> {
    let cfg = c.load()?;
    let specs: [(&str, Vec<BlockSpec>); 3] = [
        ("config", cfg.model.blocks.clone()),
        ("trimmed", default_specs()),
        ("doubled", doubled_specs()),
    ];
    let mut table = String::from("spec\tside\tactivation_bytes\tpeak_bytes\tparam_bytes\ttraining_bytes\n");
    println!("{:<8} {:>6} {:>14} {:>14} {:>12} {:>14}", "spec", "side", "activations", "peak", "params", "training");
    for (name, s) in &specs {
        let mut prev: Option<u64> = None;
        for &side in sides {
            let p = memory_plan(s, side, bytes, 1);
            let growth = prev.map(|a| format!("  x{:.3}", p.activation_bytes as f64 / a as f64)).unwrap_or_default();
            println!(
                "{name:<8} {side:>6} {:>14} {:>14} {:>12} {:>14}{growth}",
                p.activation_bytes, p.peak_bytes, p.param_bytes, p.training_bytes
            );
            table.push_str(&format!(
                "{name}\t{side}\t{}\t{}\t{}\t{}\n",
                p.activation_bytes, p.peak_bytes, p.param_bytes, p.training_bytes
            ));
            prev = Some(p.activation_bytes);
        }
    }
    let budget = budget_mib * 1024 * 1024;
    for (name, s) in &specs {
        match max_feasible_side(s, budget, bytes, 1) {
            Some(side) => println!("{name}: largest input side within {budget_mib} MiB is {side}"),
            None => println!("{name}: no input side fits within {budget_mib} MiB"),
        }
    }
    write_text(&c.out.join("memplan.tsv"), &table)
}
