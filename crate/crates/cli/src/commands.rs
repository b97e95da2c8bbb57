use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dosegan::gradcheck::run_suite;
use dosegan::io::{self, Checkpoint};
use dosegan::metrics::{CaseMetrics, Report, ReportRow, UnetScore};
use dosegan::phantom::{self, Split, Triplet};
use dosegan::training::{generator_from_checkpoint, translate_counts, Trainer, LOG_HEADER};
use dosegan::Config;

use crate::{Cli, Command, Format};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dosegan::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dosegan::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Gradcheck(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::ConfigParse { .. } => 2,
                E::NonFiniteGradient { .. } | E::Numeric(_) => 4,
                E::Shape { .. } | E::Format { .. } | E::Data(_) | E::Io(_) => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn resolve(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(s) = cli.scale {
        config.train.scale = s;
    }
    Ok(config)
}

fn announce(config: &Config) -> Result<()> {
    config.validate()?;
    eprintln!("config digest {}", config.digest());
    Ok(())
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn ensure_empty(dir: &Path, force: bool) -> Result<()> {
    let busy = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if busy && !force {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to write into it", dir.display())));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.config_reference {
        print!("{}", Config::reference());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    match command {
        Command::Phantom { count, size, drf, force } => {
            let mut config = resolve(cli)?;
            if let Some(c) = count {
                config.phantom.count = *c;
            }
            if let Some(s) = size {
                config.phantom.size = *s;
            }
            if let Some(d) = drf {
                config.phantom.drf = *d;
            }
            announce(&config)?;
            let out = out_dir(cli)?;
            ensure_empty(out, *force)?;
            let triplets = phantom::build_dataset(out, &config.phantom, config.model.rois, config.seed)?;
            let n_test = triplets.iter().filter(|t| t.split == Split::Test).count();
            eprintln!(
                "wrote {} cases ({} train, {n_test} test) at {}^3, drf {}",
                triplets.len(),
                triplets.len() - n_test,
                config.phantom.size,
                config.phantom.drf
            );
            eprintln!("dataset digest {}", phantom::dataset_digest(out)?);
            Ok(())
        }
        Command::Train { data, resume, force } => {
            let config = resolve(cli)?;
            announce(&config)?;
            let out = out_dir(cli)?;
            train(&config, data, out, *resume, *force)
        }
        Command::Translate { ckpt, input } => {
            let ck = Checkpoint::load(ckpt)?;
            let (config, generator) = generator_from_checkpoint(&ck)?;
            announce(&config)?;
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| CliError::Usage("--out is required".into()))?;
            let x = io::read_pvol(input)?;
            let y = translate_counts(&generator, &x, config.model.intensity_scale)?;
            io::write_pvol(out, &y)?;
            Ok(())
        }
        Command::Eval { ckpt, data, report } => eval(cli, ckpt, data, report),
        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(0);
            let mut worst = 0.0f64;
            let mut failed = Vec::new();
            for (name, r) in run_suite(seed)? {
                eprintln!("{name:<24} max_rel_err {:.3e} over {} entries", r.max_rel_err, r.checked);
                worst = worst.max(r.max_rel_err);
                if !(r.max_rel_err < GRADCHECK_TOLERANCE) {
                    failed.push(name);
                }
            }
            eprintln!("max relative error {worst:.3e}");
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Gradcheck(failed.join(", ")))
            }
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(input)?;
            let report = Report::parse_text(&text)?;
            let rendered = match format {
                Format::Tsv => report.to_tsv(),
                Format::Text => report.to_text(),
            };
            match &cli.out {
                Some(p) => fs::write(p, rendered)?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
    }
}

fn train(config: &Config, data: &Path, out: &Path, resume: bool, force: bool) -> Result<()> {
    let train = phantom::load_split(data, Split::Train)?;
    let val = phantom::load_split(data, Split::Test)?;
    let latest = out.join("latest.sgck");
    let mut trainer = if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let saved = Config::parse(&ck.config, &latest)?;
        if saved.digest() != config.digest() {
            return Err(CliError::Usage(format!(
                "configuration differs from the one in {}",
                latest.display()
            )));
        }
        let t = Trainer::resume(&ck, config.clone(), &train, &val)?;
        log::info!("resuming at phase {} epoch {}", t.state.phase + 1, t.state.epoch);
        t
    } else {
        ensure_empty(out, force)?;
        Trainer::new(config.clone(), &train, &val)?
    };
    fs::create_dir_all(out)?;
    let log_path = out.join("metrics.log");
    let fresh = !(resume && log_path.exists());
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    eprintln!("phase boundaries {:?}", trainer.schedule.boundaries());
    trainer.run_schedule(Some(out), Some(&mut log), |s| log::info!("{}", s.log_line()))?;
    trainer.checkpoint().save(out.join("final.sgck"))?;
    Ok(())
}

fn score(label: &str, outputs: &[dosegan::Volume], test: &[Triplet], harness: &UnetScore) -> Result<ReportRow> {
    let cases = outputs
        .iter()
        .zip(test)
        .map(|(o, t)| {
            let unet = harness.score(o, &t.s)?;
            CaseMetrics::compute(t.case, o, &t.y, &t.s, Some(&unet))
        })
        .collect::<dosegan::Result<Vec<_>>>()?;
    Ok(ReportRow {
        label: label.into(),
        cases,
    })
}

fn eval(cli: &Cli, ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (mut config, generator) = generator_from_checkpoint(&ck)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    announce(&config)?;
    let train = phantom::load_split(data, Split::Train)?;
    let test = phantom::load_split(data, Split::Test)?;
    if test.is_empty() {
        return Err(dosegan::Error::Data("dataset has no test cases".into()).into());
    }
    let mut harness = UnetScore::new(&config)?;
    harness.train(&config, &train)?;
    let scale = config.model.intensity_scale;
    let yhat = test
        .iter()
        .map(|t| translate_counts(&generator, &t.x, scale))
        .collect::<dosegan::Result<Vec<_>>>()?;
    let doc = Report {
        rows: vec![
            score("low-dose", &test.iter().map(|t| t.x.clone()).collect::<Vec<_>>(), &test, &harness)?,
            score("model", &yhat, &test, &harness)?,
            score("full-dose", &test.iter().map(|t| t.y.clone()).collect::<Vec<_>>(), &test, &harness)?,
        ],
    };
    fs::write(report, doc.to_tsv())?;
    fs::write(text_path(report), doc.to_text())?;
    Ok(())
}

fn text_path(report: &Path) -> PathBuf {
    report.with_extension("txt")
}
