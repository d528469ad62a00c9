// SPDX-License-Identifier: MIT OR Apache-2.0

//! `depthlens` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or invariant error,
//! 3 numerical failure.

mod provenance;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use depthlens::analysis::pipeline::{run_report, ReportKind, ReportOptions};
use depthlens::analysis::{BucketSpec, DEFAULT_THRESHOLDS};
use depthlens::io::dump::{read_dump, read_dump_unchecked};
use depthlens::io::freq::{count_tokens, read_frequency_table, write_frequency_table, FrequencyTable};
use depthlens::io::prefix::{make_prefix, DEFAULT_MIN_CHARS};
use depthlens::io::translators::{read_translators, write_translators, MaskMode};
use depthlens::io::write_atomic;
use depthlens::lens::{train_masked_translators, train_translators, Decoder, Init, Lens, Optimizer, TrainConfig};
use depthlens::par::Exec;
use depthlens::report::{format_sig9, svg, Cell, ReportTable};
use depthlens::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use provenance::Provenance;

#[derive(Parser, Debug)]
#[command(
    name = "depthlens",
    version,
    about = "Decode transformer hidden states layer by layer"
)]
struct Cli {
    /// Seed for every random choice (prefix splits, training shuffles).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Lens used to decode intermediate layers.
    #[arg(long, global = true, value_enum, default_value_t = LensArg::Logit)]
    lens: LensArg,
    /// Translator file for `--lens tuned`.
    #[arg(long, global = true)]
    translators: Option<PathBuf>,
    /// Worker threads (1 runs sequentially). Results do not depend on it.
    #[arg(long, global = true, env = "DEPTHLENS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LensArg {
    Logit,
    Tuned,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count token ids (whitespace-separated decimal) into freq.bin.
    Freq {
        #[arg(long)]
        vocab_size: usize,
        /// Token id text files; counts add up across files.
        files: Vec<PathBuf>,
    },
    /// Cut each line of a text file at a random word boundary.
    Prefixes {
        file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_CHARS)]
        min_chars: usize,
    },
    /// Train tuned-lens translators on a dump.
    Train(TrainArgs),
    /// Compute a layer-wise report as CSV plus SVG.
    Report(ReportArgs),
    /// Check a dump's shapes and invariants.
    Validate {
        #[arg(long)]
        dump: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskModeArg {
    Weight,
    Skip,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Identity)]
    init: InitArg,
    /// Noise scale for `--init random`.
    #[arg(long, default_value_t = 0.01)]
    init_scale: f64,
    /// Train the last layer too instead of pinning it to the identity.
    #[arg(long)]
    train_final_layer: bool,
    /// Token whose contribution is scaled by `--mask-factor`.
    #[arg(long, requires = "mask_factor")]
    mask_token: Option<u32>,
    #[arg(long, requires = "mask_token")]
    mask_factor: Option<f64>,
    #[arg(long, value_enum, default_value_t = MaskModeArg::Weight)]
    mask_mode: MaskModeArg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(value_parser = parse_report_kind)]
    which: ReportKind,
    #[arg(long)]
    dump: PathBuf,
    /// Frequency table (buckets, flips, probmass).
    #[arg(long)]
    freq: Option<PathBuf>,
    /// Frequency-rank bucket boundaries.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    buckets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    thresholds: Vec<usize>,
    /// Label used to group onset traces.
    #[arg(long, default_value = "pos")]
    category_key: String,
    /// Categories dropped from onset means.
    #[arg(long, value_delimiter = ',', default_value = "OTHER")]
    exclude: Vec<String>,
    /// Option token ids for meanrank (defaults to the `options` label).
    #[arg(long, value_delimiter = ',')]
    options: Option<Vec<u32>>,
    /// Keep only the most frequent tokens in probmass.
    #[arg(long)]
    top_tokens: Option<usize>,
}

fn parse_report_kind(s: &str) -> Result<ReportKind, String> {
    ReportKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ReportKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown report `{s}` (expected one of {})", names.join(", "))
    })
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 1,
            e if e.is_numerical() => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    let exec = configure_threads(cli.threads)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| data(format!("{}: {e}", cli.out.display())))?;
    let mut prov = Provenance::new(cli.seed);
    match &cli.command {
        Command::Freq { vocab_size, files } => cmd_freq(cli, &mut prov, *vocab_size, files),
        Command::Prefixes { file, min_chars } => cmd_prefixes(cli, &mut prov, file, *min_chars),
        Command::Train(args) => cmd_train(cli, &mut prov, args, exec),
        Command::Report(args) => cmd_report(cli, &mut prov, args, exec),
        Command::Validate { dump } => cmd_validate(dump),
    }
}

fn configure_threads(threads: Option<usize>) -> CliResult<Exec> {
    match threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(1) => Ok(Exec::Sequential),
        Some(_n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(_n)
                .build_global()
                .map_err(|e| usage(format!("cannot start {_n} threads: {e}")))?;
            Ok(Exec::Parallel)
        }
        None => Ok(Exec::default()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, bytes).map_err(Failure::from)
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn cmd_freq(cli: &Cli, prov: &mut Provenance, vocab_size: usize, files: &[PathBuf]) -> CliResult {
    prov.command("freq");
    prov.set("vocab_size", vocab_size.to_string());
    let mut table = FrequencyTable::new();
    for (i, file) in files.iter().enumerate() {
        let text = read_text(file)?;
        prov.input(&format!("tokens[{i}]"), file, text.as_bytes());
        let mut ids = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            for word in line.split_whitespace() {
                let id: u32 = word.parse().map_err(|_| {
                    data(format!(
                        "{}:{}: `{word}` is not a token id",
                        file.display(),
                        line_no + 1
                    ))
                })?;
                ids.push(id);
            }
        }
        let counts = count_tokens(ids, vocab_size).map_err(|e| data(format!("{}: {e}", file.display())))?;
        table.merge(&counts);
    }
    prov.set("total", table.total().to_string());
    let path = cli.out.join("freq.bin");
    write_frequency_table(&table, &path)?;
    prov.write_sidecar(&path)?;
    eprintln!(
        "{} tokens, {} distinct -> {}",
        table.total(),
        table.len(),
        path.display()
    );
    Ok(())
}

fn cmd_prefixes(cli: &Cli, prov: &mut Provenance, file: &Path, min_chars: usize) -> CliResult {
    prov.command("prefixes");
    prov.set("min_chars", min_chars.to_string());
    let text = read_text(file)?;
    prov.input("text", file, text.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut out = String::new();
    let (mut accepted, mut rejected) = (0usize, 0usize);
    for line in text.lines() {
        match make_prefix(line, &mut rng, min_chars) {
            Some(p) => {
                out.push_str(p);
                out.push('\n');
                accepted += 1;
            }
            None => rejected += 1,
        }
    }
    prov.set("accepted", accepted.to_string());
    prov.set("rejected", rejected.to_string());
    let path = cli.out.join("prefixes.txt");
    write_file(&path, out.as_bytes())?;
    prov.write_sidecar(&path)?;
    println!("accepted {accepted}");
    println!("rejected {rejected}");
    Ok(())
}

fn cmd_train(cli: &Cli, prov: &mut Provenance, args: &TrainArgs, exec: Exec) -> CliResult {
    prov.command("train");
    let dump = read_dump(&args.dump)?;
    prov.dump_input(&args.dump)?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => Optimizer::Adam {
                beta1: args.beta1,
                beta2: args.beta2,
                eps: args.adam_eps,
            },
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: cli.seed,
        init: match args.init {
            InitArg::Identity => Init::Identity,
            InitArg::Random => Init::Random { scale: args.init_scale },
        },
        token_weights: None,
        example_skip: None,
        train_final_layer: args.train_final_layer,
        exec,
    };
    let mask = match (args.mask_token, args.mask_factor) {
        // A unit factor changes nothing; treat it as no mask so the
        // artifacts match an unmasked run byte for byte.
        (Some(_), Some(1.0)) => {
            eprintln!("note: mask factor 1 is a no-op; training without a mask");
            None
        }
        (Some(t), Some(f)) => Some((t, f)),
        _ => None,
    };
    let output = match mask {
        Some((token, factor)) => {
            let mode = match args.mask_mode {
                MaskModeArg::Weight => MaskMode::Weight,
                MaskModeArg::Skip => MaskMode::Skip,
            };
            train_masked_translators(&dump, &config, token, factor, mode)?
        }
        None => train_translators(&dump, &config)?,
    };
    let mut set = output.translators;
    set.metadata.provenance = prov.entries();
    let path = cli.out.join("translators.bin");
    write_translators(&set, &path)?;

    let mut log = ReportTable::new("train_log", &["layer", "epoch", "mean_kl"]);
    for e in &output.log {
        log.push(vec![
            Cell::Int(e.layer as i64),
            Cell::Int(e.epoch as i64),
            Cell::Float(e.mean_kl),
        ]);
    }
    prov.stamp(&mut log);
    write_file(&cli.out.join("train_log.csv"), log.to_csv().as_bytes())?;

    for (l, kl) in set.metadata.final_mean_kl.iter().enumerate() {
        let how = if set.metadata.trained[l] { "trained" } else { "identity" };
        println!("layer {} ({how}): mean KL {}", l + 1, format_sig9(*kl));
    }
    Ok(())
}

fn cmd_report(cli: &Cli, prov: &mut Provenance, args: &ReportArgs, exec: Exec) -> CliResult {
    prov.command("report");
    prov.set("report", args.which.name());
    prov.set(
        "lens",
        match cli.lens {
            LensArg::Logit => "logit",
            LensArg::Tuned => "tuned",
        },
    );
    let dump = read_dump(&args.dump)?;
    prov.dump_input(&args.dump)?;
    let translators = match (cli.lens, &cli.translators) {
        (LensArg::Tuned, Some(p)) => {
            prov.file_input("translators", p)?;
            Some(read_translators(p)?)
        }
        (LensArg::Tuned, None) => return Err(usage("--lens tuned requires --translators")),
        (LensArg::Logit, _) => None,
    };
    let freq = match &args.freq {
        Some(p) => {
            prov.file_input("bucket_source", p)?;
            Some(read_frequency_table(p)?)
        }
        None => None,
    };
    let lens = match &translators {
        Some(set) => Lens::Tuned(set),
        None => Lens::Logit,
    };
    let decoder = Decoder::new(&dump, lens)?.with_exec(exec);
    let opts = ReportOptions {
        freq: freq.as_ref(),
        buckets: BucketSpec::new(args.buckets.clone())?,
        thresholds: args.thresholds.clone(),
        category_key: args.category_key.clone(),
        exclude: args.exclude.clone(),
        options: args.options.clone(),
        top_tokens: args.top_tokens,
    };
    if matches!(
        args.which,
        ReportKind::Buckets | ReportKind::Flips | ReportKind::ProbMass
    ) && freq.is_none()
    {
        return Err(usage(format!("report `{}` requires --freq", args.which.name())));
    }
    let mut table = run_report(&decoder, args.which, &opts)?;
    prov.stamp(&mut table);
    let csv_path = cli.out.join(format!("{}.csv", args.which.name()));
    write_file(&csv_path, table.to_csv().as_bytes())?;
    let mut svg_text = svg::render_report(&table)?;
    let mut comment = String::from("<!--\n");
    for (k, v) in &table.provenance {
        let _ = writeln!(comment, "  {k}: {}", v.replace("--", "- -"));
    }
    comment.push_str("-->\n");
    let at = svg_text.find('\n').map_or(0, |i| i + 1);
    svg_text.insert_str(at, &comment);
    write_file(&cli.out.join(format!("{}.svg", args.which.name())), svg_text.as_bytes())?;
    eprintln!("{} rows -> {}", table.rows.len(), csv_path.display());
    Ok(())
}

fn cmd_validate(dir: &Path) -> CliResult {
    let dump = read_dump_unchecked(dir)?;
    dump.check_shapes()?;
    println!("ok   shapes");
    let violations = dump.check_invariants();
    for name in [
        "target_tokens_in_vocab",
        "norm_spec",
        "final_layer_identity",
        "target_is_final_top1",
    ] {
        if !violations.iter().any(|v| v.invariant == name) {
            println!("ok   {name}");
        }
    }
    for v in &violations {
        println!("FAIL {}: {}", v.invariant, v.detail);
    }
    match violations.first() {
        None => Ok(()),
        Some(v) => Err(data(format!(
            "{} invariant(s) violated, first: {}",
            violations.len(),
            v.invariant
        ))),
    }
}
