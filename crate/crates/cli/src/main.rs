use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnas::autodiff::checkpoint;
use bnas::config::{Preset, Settings};
use bnas::data::{default_cifar10_dir, load_cifar10, load_mnist, synthetic, Dataset};
use bnas::flops::{count_flops, inference_speedup_against, memory_savings_against};
use bnas::genotype::{derive, Genotype, Provenance};
use bnas::harness::{
    run_ablation, run_quant_error, sepconv_study, skip_gradient_probe, small_genotype, StudyId,
    StudyOutput, StudySpec,
};
use bnas::network::{build_network, Network, NetworkSpec};
use bnas::nn::Precision;
use bnas::search::run_search;
use bnas::space::LayerType;
use bnas::supernet::ArchParams;
use bnas::train::{evaluate, export_frozen, grad_csv, metrics_csv, train};
use bnas::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bnas",
    version,
    about = "Binary cell search, derivation, training and accounting"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// tiny, desk or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    no_skip: bool,
    #[arg(long, global = true)]
    no_zeroise: bool,
    #[arg(long, global = true)]
    no_div: bool,
    #[arg(long, global = true)]
    no_dilated: bool,
    #[arg(long, global = true)]
    keep_sepconv: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CIFAR-10 binary batch directory (default: $BNAS_CIFAR10_DIR or data/cifar-10-batches-bin).
    #[arg(long)]
    data: Option<PathBuf>,
    /// MNIST IDX directory, padded to 32x32.
    #[arg(long, conflicts_with = "data")]
    mnist: Option<PathBuf>,
    /// Generated class-prototype images instead of files.
    #[arg(long, conflicts_with_all = ["data", "mnist"])]
    synthetic: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    test_subset: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct NetArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Build the float twin instead of the binary network.
    #[arg(long)]
    float: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search architecture logits; writes arch.json, search_log.csv, supernet.ckpt.
    Search {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Discretize searched logits into a genotype.
    Derive {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        gamma: f64,
    },
    /// Train a derived network; writes weights.ckpt and metrics.csv.
    Train {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Also write per-step gradient magnitudes to grads.csv.
        #[arg(long)]
        grad_log: bool,
    },
    /// Score a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Operation and parameter counts.
    Flops {
        #[command(flatten)]
        net: NetArgs,
        /// Genotype whose float twin is the savings/speed-up baseline (default: the same genotype).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Desk-scale diagnostic studies, written below results/.
    Study {
        #[arg(value_enum)]
        which: StudyKind,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Genotype for the skip probe (default: a fixed small genotype).
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        search_epochs: Option<usize>,
        #[arg(long, default_value = "results")]
        results: PathBuf,
    },
    /// Frozen inference checkpoint: packed sign bits plus scales.
    Export {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StudyKind {
    QuantError,
    Ablation,
    Sepconv,
    SkipProbe,
}

/// Failures reported as `error kind=<kind> msg="<text>"`.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn one_line(s: &str) -> String {
    s.lines().next().unwrap_or("").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg = text.trim_start_matches("error: ");
            eprintln!("error kind=usage msg=\"{}\"", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error kind=usage msg=\"{}\"", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!(
                "error kind={} msg=\"{}\"",
                e.kind(),
                one_line(&e.to_string())
            );
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

/// Defaults, then the config file, then command-line flags.
fn settings(c: &Common) -> CliResult<Settings> {
    let file = match &c.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let mut cli = Settings::default();
    let mut set = |k: &str, v: String| cli.set(k, &v);
    if let Some(s) = c.seed {
        set("seed", s.to_string())?;
    }
    if let Some(p) = &c.preset {
        set("preset", p.clone())?;
    }
    if let Some(e) = c.epochs {
        set("epochs", e.to_string())?;
    }
    if let Some(b) = c.batch {
        set("batch", b.to_string())?;
    }
    for (on, key) in [
        (c.no_skip, "no_skip"),
        (c.no_zeroise, "no_zeroise"),
        (c.no_div, "no_div"),
        (c.no_dilated, "no_dilated"),
        (c.keep_sepconv, "keep_sepconv"),
    ] {
        if on {
            set(key, "true".into())?;
        }
    }
    Ok(file.layered(&cli))
}

fn flag(s: &Settings, key: &str) -> CliResult<bool> {
    Ok(s.lookup::<bool>("search", key)?.unwrap_or(false))
}

fn load_data(args: &DataArgs, settings: &Settings) -> CliResult<(Dataset, Dataset)> {
    let (train_set, test) = if let Some(n) = args.synthetic {
        let all = synthetic(n + (n / 4).max(10), 3, 32, 10, 0);
        let idx: Vec<usize> = (0..all.len()).collect();
        (all.subset(&idx[..n]), all.subset(&idx[n..]))
    } else if let Some(dir) = &args.mnist {
        load_mnist(dir, 32)?
    } else {
        let dir = args
            .data
            .clone()
            .or_else(|| settings.get("data").map(PathBuf::from))
            .unwrap_or_else(default_cifar10_dir);
        load_cifar10(&dir)?
    };
    let subset = match args.subset {
        Some(n) => Some(n),
        None => settings.lookup("data", "subset")?,
    };
    let train_set = match subset {
        Some(n) if n <= train_set.len() => train_set.take(n),
        Some(n) => {
            return Err(Failure::Usage(format!(
                "subset {n} exceeds {} training images",
                train_set.len()
            )))
        }
        None => train_set,
    };
    let test = match args.test_subset {
        Some(n) => test.take(n.min(test.len())),
        None => test,
    };
    Ok((train_set, test))
}

fn read_genotype(path: &Path) -> CliResult<Genotype> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Genotype::from_json(&text)?)
}

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

fn save_checkpoint(store: &bnas::autodiff::ParamStore, dir: &Path, name: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(checkpoint::save(store, &dir.join(name))?)
}

fn manifest(dir: &Path, command: &str, s: &Settings) -> CliResult<()> {
    let body = format!(
        "command={command}\nconfig_hash={}\n{}",
        s.hash(),
        s.canonical()
    );
    write(dir, "manifest.txt", body)?;
    Ok(())
}

fn network_spec(
    net: &NetArgs,
    preset: &Preset,
    settings: &Settings,
    shape: [usize; 3],
    classes: usize,
) -> CliResult<NetworkSpec> {
    let genotype = read_genotype(&net.genotype)?;
    if flag(settings, "no_zeroise")? && genotype.contains(LayerType::Zeroise) {
        return Err(Failure::Usage(
            "--no-zeroise given but the genotype contains zeroise edges".into(),
        ));
    }
    let mut spec = NetworkSpec::new(
        genotype,
        net.cells.unwrap_or(preset.cells),
        net.channels.unwrap_or(preset.channels),
    );
    spec.input_shape = shape;
    spec.num_classes = classes;
    spec.inter_cell_skip = !flag(settings, "no_skip")?;
    if net.float {
        spec = spec.float_twin();
    }
    Ok(spec)
}

fn restore(spec: &NetworkSpec, seed: u64, ckpt: &Path) -> CliResult<Network> {
    let mut net = build_network(spec, seed)?;
    checkpoint::load_into(&mut net.weights, ckpt)?;
    Ok(net)
}

fn run(cli: Cli) -> CliResult<()> {
    let s = settings(&cli.common)?;
    let preset = Preset::resolve(&s)?;
    let out = cli.common.out.clone();
    let seed = preset.search.seed;
    match cli.command {
        Command::Search { data } => {
            let (train_set, _) = load_data(&data, &s)?;
            let result = run_search(&preset.search, &train_set)?;
            write(&out, "arch.json", result.net.arch.to_json(seed, &s.hash()))?;
            write(&out, "search_log.csv", result.log.to_csv())?;
            save_checkpoint(&result.net.weights, &out, "supernet.ckpt")?;
            manifest(&out, "search", &s)?;
            let last = result.log.records.last();
            println!(
                "search done epochs={} param_op_fraction={:.4} out={}",
                result.log.records.len(),
                last.map_or(0.0, |r| r.param_op_fraction),
                out.display()
            );
        }
        Command::Derive { arch, gamma } => {
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Failure::Usage(format!(
                    "--gamma must be a positive number, got {gamma}"
                )));
            }
            let text = std::fs::read_to_string(&arch).map_err(|e| Error::io(&arch, e))?;
            let (params, arch_seed) = ArchParams::from_json(&text)?;
            let geno = derive(
                &params,
                gamma,
                Provenance {
                    seed: arch_seed,
                    config_hash: s.hash(),
                },
            )?;
            let p = write(&out, "genotype.json", geno.to_json())?;
            manifest(&out, "derive", &s)?;
            println!("genotype written to {}", p.display());
        }
        Command::Train {
            net,
            data,
            grad_log,
        } => {
            let (train_set, test) = load_data(&data, &s)?;
            let spec = network_spec(
                &net,
                &preset,
                &s,
                train_set.input_shape(),
                train_set.num_classes,
            )?;
            let mut model = build_network(&spec, preset.train.seed)?;
            let mut cfg = preset.train.clone();
            cfg.grad_log |= grad_log;
            let report = train(&mut model, &train_set, Some(&test), &cfg)?;
            save_checkpoint(&model.weights, &out, "weights.ckpt")?;
            write(&out, "metrics.csv", metrics_csv(&report.metrics))?;
            if cfg.grad_log {
                write(&out, "grads.csv", grad_csv(&report.grads))?;
            }
            manifest(&out, "train", &s)?;
            let last = report.metrics.last();
            println!(
                "train done epochs={} last_top1={:.2} out={}",
                cfg.epochs,
                last.map_or(0.0, |r| r.top1),
                out.display()
            );
        }
        Command::Eval {
            net,
            data,
            checkpoint: ckpt,
        } => {
            let (_, test) = load_data(&data, &s)?;
            let spec = network_spec(&net, &preset, &s, test.input_shape(), test.num_classes)?;
            let model = restore(&spec, preset.train.seed, &ckpt)?;
            let r = evaluate(&model, &test, preset.train.batch)?;
            let mut csv = String::from("class,top1\n");
            for (c, a) in r.per_class.iter().enumerate() {
                csv.push_str(&format!("{c},{a:.4}\n"));
            }
            write(&out, "eval_per_class.csv", csv)?;
            manifest(&out, "eval", &s)?;
            println!("top1={:.4} top5={:.4} loss={:.6}", r.top1, r.top5, r.loss);
        }
        Command::Flops { net, reference } => {
            let spec = network_spec(&net, &preset, &s, [3, 32, 32], 10)?;
            let reference = match reference {
                Some(p) => NetworkSpec {
                    genotype: read_genotype(&p)?,
                    ..spec.clone()
                },
                None => spec.clone(),
            };
            let report = count_flops(&spec)?;
            write(&out, "flops.csv", report.to_csv())?;
            manifest(&out, "flops", &s)?;
            print!("{}", report.to_text());
            if spec.precision == Precision::Binary {
                println!(
                    "{:<28} {:>16.2}",
                    "memory savings (x)",
                    memory_savings_against(&spec, &reference)?
                );
                println!(
                    "{:<28} {:>16.2}",
                    "speed-up (x)",
                    inference_speedup_against(&spec, &reference)?
                );
            }
        }
        Command::Study {
            which,
            data,
            seeds,
            genotype,
            cells,
            channels,
            search_epochs,
            results,
        } => {
            let (train_set, test) = load_data(&data, &s)?;
            let id = match which {
                StudyKind::QuantError => StudyId::QuantError,
                StudyKind::Ablation => StudyId::Ablation,
                StudyKind::Sepconv => StudyId::SepconvStudy,
                StudyKind::SkipProbe => StudyId::SkipProbe,
            };
            let mut spec = StudySpec::desk(id);
            spec.subset = train_set.len();
            spec.epochs = preset.train.epochs;
            spec.batch = preset.train.batch;
            spec.cells = cells.unwrap_or(preset.cells);
            spec.channels = channels.unwrap_or(preset.channels);
            spec.search_epochs = search_epochs.unwrap_or(preset.search.epochs);
            if let Some(v) = seeds {
                spec.seeds = v;
            }
            if let Some(g) = s.lookup("derive", "gamma")? {
                spec.gamma = g;
            }
            let output = match id {
                StudyId::QuantError => {
                    StudyOutput::from_table(id, &run_quant_error(&spec, &train_set, &test)?)
                }
                StudyId::Ablation => {
                    StudyOutput::from_table(id, &run_ablation(&spec, &train_set, &test)?)
                }
                StudyId::SepconvStudy => {
                    StudyOutput::from_table(id, &sepconv_study(&spec, &train_set)?)
                }
                StudyId::SkipProbe => {
                    let geno = match &genotype {
                        Some(p) => read_genotype(p)?,
                        None => small_genotype(),
                    };
                    let mut files = Vec::new();
                    for &seed in &spec.seeds {
                        let cfg = bnas::train::TrainConfig {
                            seed,
                            ..preset.train.clone()
                        };
                        let probe = skip_gradient_probe(
                            &geno,
                            spec.cells,
                            spec.channels,
                            &train_set,
                            &cfg,
                        )?;
                        files.push((format!("skip_probe_seed{seed}.csv"), probe.to_csv()));
                    }
                    StudyOutput { files }
                }
            };
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            let dir = output.write(&results, id, &stamp)?;
            manifest(&dir, id.name(), &s)?;
            if let Some((_, summary)) = output.files.iter().find(|(n, _)| n == "summary.txt") {
                print!("{summary}");
            }
            println!("study written to {}", dir.display());
        }
        Command::Export {
            net,
            checkpoint: ckpt,
        } => {
            let spec = network_spec(&net, &preset, &s, [3, 32, 32], 10)?;
            let model = restore(&spec, preset.train.seed, &ckpt)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let p = out.join("frozen.bin");
            export_frozen(&model.weights, &p)?;
            manifest(&out, "export", &s)?;
            println!("frozen checkpoint written to {}", p.display());
        }
    }
    Ok(())
}
