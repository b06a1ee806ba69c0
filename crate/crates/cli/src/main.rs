//! `patient-embed` command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use patient_embed::config::RunConfig;
use patient_embed::data::{generate_synthetic, load_dataset, save_dataset, Dataset, DatasetFormat};
use patient_embed::encoder::EncoderParams;
use patient_embed::eval::{pca_project2, t_test};
use patient_embed::linalg::SeededRng;
use patient_embed::pipeline::{cv_split, embed, fold_partition, knn_evaluate, modality_alignment, probe_evaluate, run_cv, train};
use patient_embed::Error;

const USAGE: &str = "\
usage: patient-embed <command> [--config FILE] [--KEY VALUE]...

commands:
  generate           write a synthetic dataset            (--out FILE [--format text|binary])
  train              self-supervised training             (--out-dir DIR; needs --seed)
  eval-knn           frozen-feature KNN on a held-out set (--params FILE [--test-dataset FILE | --fold N])
  eval-probe         linear probe on frozen features      (--params FILE [--test-dataset FILE | --fold N])
  cross-validate     k-fold train + KNN evaluation        ([--out FILE]; needs --seed)
  export-embeddings  embeddings and 2-D PCA as CSV         (--params FILE --out FILE)
  ttest              pooled two-sample t-test             (--a X,Y,... --b X,Y,...)

Every config key may be given as --KEY VALUE and overrides the config file.
`patient-embed keys` lists the keys with their defaults.

exit codes: 0 success, 1 data error, 2 config or usage error, 3 I/O or file format error, 4 numerical failure";

/// Flags that belong to a command rather than to the run configuration.
const COMMAND_OPTIONS: &[&str] = &["config", "out", "out-dir", "format", "params", "test-dataset", "fold", "a", "b"];

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

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Config(_)
                | Error::InvalidConfig(_)
                | Error::InvalidDims(_)
                | Error::InvalidK { .. }
                | Error::KTooLarge { .. } => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::NumericalOverflow(_)
                | Error::ZeroVector { .. }
                | Error::DegenerateCovariance
                | Error::DegenerateTest => 4,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}\n\n{USAGE}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Invocation {
    command: String,
    config: RunConfig,
    options: BTreeMap<String, String>,
}

impl Invocation {
    fn option(&self, name: &str) -> Option<&str> {
        self.options.get(name).map(String::as_str)
    }

    fn required(&self, name: &str) -> CliResult<&str> {
        self.option(name).ok_or_else(|| Failure::Usage(format!("`{}` requires --{name}", self.command)))
    }
}

fn parse_args(args: &[String]) -> CliResult<Invocation> {
    let (command, rest) = args.split_first().ok_or_else(|| Failure::Usage("missing command".into()))?;
    let mut options = BTreeMap::new();
    let mut overrides = Vec::new();
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let name = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("expected a --flag, got `{flag}`")))?;
        let (name, value) = match name.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Failure::Usage(format!("--{name} needs a value")))?;
                (name.to_string(), v.clone())
            }
        };
        if COMMAND_OPTIONS.contains(&name.as_str()) {
            options.insert(name, value);
        } else {
            overrides.push((name.replace('-', "_"), value));
        }
    }
    let mut config = match options.get("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(Invocation { command: command.clone(), config, options })
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
    println!("# end config");
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

/// The configured dataset file, or the synthetic dataset generated from the seed.
fn dataset(inv: &Invocation) -> CliResult<Dataset> {
    match &inv.config.dataset {
        Some(path) => Ok(load_dataset(path)?),
        None => {
            let seed = inv.config.require_seed(&format!("{} on synthetic data", inv.command))?;
            Ok(generate_synthetic(&inv.config.synthetic, &mut SeededRng::new(seed))?)
        }
    }
}

/// Training and test sets for the evaluation commands: the whole dataset
/// against `--test-dataset`, or the split used by `cross-validate` with
/// `--fold` held out.
fn eval_sets(inv: &Invocation) -> CliResult<(Dataset, Dataset)> {
    let data = dataset(inv)?;
    if let Some(path) = inv.option("test-dataset") {
        if inv.option("fold").is_some() {
            return Err(Failure::Usage("--fold and --test-dataset are mutually exclusive".into()));
        }
        return Ok((data, load_dataset(Path::new(path))?));
    }
    let fold: usize = match inv.option("fold") {
        Some(v) => v.parse().map_err(|_| Failure::Usage(format!("--fold: `{v}` is not a fold index")))?,
        None => 0,
    };
    let cv = &inv.config.cv;
    if fold >= cv.folds {
        return Err(Error::Config(format!("fold {fold} out of range for {} folds", cv.folds)).into());
    }
    let seed = inv.config.require_seed(&inv.command)?;
    let split = cv_split(&data, cv, &mut SeededRng::new(seed).fork())?;
    let (tr, te) = fold_partition(&data, &split, fold);
    Ok((data.subset(&tr), data.subset(&te)))
}

fn load_params(inv: &Invocation) -> CliResult<EncoderParams> {
    Ok(EncoderParams::load(Path::new(inv.required("params")?))?)
}

fn cmd_generate(inv: &Invocation) -> CliResult<()> {
    let out = PathBuf::from(inv.required("out")?);
    let format = match inv.option("format") {
        Some("binary") => DatasetFormat::Binary,
        Some("text") => DatasetFormat::Text,
        None if out.extension().is_some_and(|e| e == "bin") => DatasetFormat::Binary,
        None => DatasetFormat::Text,
        Some(other) => return Err(Failure::Usage(format!("--format must be text or binary, got `{other}`"))),
    };
    let seed = inv.config.require_seed("generate")?;
    let data = generate_synthetic(&inv.config.synthetic, &mut SeededRng::new(seed))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    save_dataset(&data, &out, format)?;
    println!("wrote {} patients to {}", data.len(), out.display());
    Ok(())
}

fn cmd_train(inv: &Invocation) -> CliResult<()> {
    let seed = inv.config.require_seed("train")?;
    let dir = PathBuf::from(inv.required("out-dir")?);
    let data = dataset(inv)?;
    let outcome = train(&data, &inv.config.cv.train, &mut SeededRng::new(seed))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in outcome.losses.iter().enumerate() {
        writeln!(log, "{e},{l}").unwrap();
    }
    write_file(&dir.join("config.txt"), inv.config.to_text())?;
    write_file(&dir.join("loss.csv"), log)?;
    write_file(&dir.join("params.bin"), outcome.params.to_bytes())?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss.first = {first}");
        println!("loss.last = {last}");
    }
    println!("alignment = {}", modality_alignment(&outcome.params, &data)?);
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval_knn(inv: &Invocation) -> CliResult<()> {
    let params = load_params(inv)?;
    let (tr, te) = eval_sets(inv)?;
    let report = knn_evaluate(&params, &tr, &te, &inv.config.cv.knn)?;
    print!("{}", report.to_kv_text());
    Ok(())
}

fn cmd_eval_probe(inv: &Invocation) -> CliResult<()> {
    let params = load_params(inv)?;
    let (tr, te) = eval_sets(inv)?;
    let report = probe_evaluate(&params, &tr, &te, inv.config.probe_epochs, inv.config.probe_lr)?;
    print!("{}", report.to_kv_text());
    Ok(())
}

fn cmd_cross_validate(inv: &Invocation) -> CliResult<()> {
    let seed = inv.config.require_seed("cross-validate")?;
    let data = dataset(inv)?;
    let report = run_cv(&data, &inv.config.cv, seed)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = inv.option("out") {
        write_file(Path::new(out), format!("{}{text}", inv.config.to_text()))?;
    }
    Ok(())
}

fn cmd_export_embeddings(inv: &Invocation) -> CliResult<()> {
    let params = load_params(inv)?;
    let out = PathBuf::from(inv.required("out")?);
    let data = dataset(inv)?;
    let emb = embed(&params, &data.fundus_inputs())?;
    let proj = pca_project2(&emb)?;
    let mut csv = String::from("patient_id,label");
    for j in 0..emb.cols() {
        write!(csv, ",e{j}").unwrap();
    }
    csv.push_str(",pc1,pc2\n");
    for (i, s) in data.samples.iter().enumerate() {
        write!(csv, "{},{}", s.patient_id, s.label).unwrap();
        for v in emb.row(i) {
            write!(csv, ",{v}").unwrap();
        }
        writeln!(csv, ",{},{}", proj.coords[(i, 0)], proj.coords[(i, 1)]).unwrap();
    }
    write_file(&out, csv)?;
    println!("wrote {} embeddings to {}", data.len(), out.display());
    Ok(())
}

fn parse_values(name: &str, text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::Usage(format!("--{name}: `{s}` is not a number"))))
        .collect()
}

fn cmd_ttest(inv: &Invocation) -> CliResult<()> {
    let a = parse_values("a", inv.required("a")?)?;
    let b = parse_values("b", inv.required("b")?)?;
    let r = t_test(&a, &b)?;
    println!("t = {}", r.t);
    println!("df = {}", r.df);
    println!("p = {}", r.p);
    Ok(())
}

fn run(args: &[String]) -> CliResult<()> {
    match args.first().map(String::as_str) {
        None => return Err(Failure::Usage("missing command".into())),
        Some("help" | "--help" | "-h") => {
            println!("{USAGE}");
            return Ok(());
        }
        Some("keys") => {
            print!("{}", RunConfig::default().to_text());
            return Ok(());
        }
        _ => {}
    }
    let inv = parse_args(args)?;
    let handler: fn(&Invocation) -> CliResult<()> = match inv.command.as_str() {
        "generate" => cmd_generate,
        "train" => cmd_train,
        "eval-knn" => cmd_eval_knn,
        "eval-probe" => cmd_eval_probe,
        "cross-validate" => cmd_cross_validate,
        "export-embeddings" => cmd_export_embeddings,
        "ttest" => cmd_ttest,
        other => return Err(Failure::Usage(format!("unknown command `{other}`"))),
    };
    echo_config(&inv.config);
    handler(&inv)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
