//! Seeded ablation study on phantom data: plain DCITN, DCITN with AdaIN and
//! noise, and the segmentation-guided variant, all scored by the same
//! harness.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::Config;
use crate::metrics::{CaseMetrics, Report, ReportRow, UnetScore};
use crate::networks::{Backbone, Norm};
use crate::phantom::{generate_triplets, Split, Triplet};
use crate::training::Trainer;
use crate::volume::Volume;

pub const INPUT: &str = "low-dose";
pub const PLAIN: &str = "dcitn";
pub const STYLE: &str = "dcitn+adain+noise";
pub const SGSGAN: &str = "sgsgan-dcitn";
pub const FULL: &str = "full-dose";
pub const NOISE: &str = "noise";

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub base: Config,
    pub seeds: Vec<u64>,
}

impl StudyConfig {
    /// 40 training and 10 test cases at 32^3, schedule 60/5/15/5, three seeds.
    pub fn desk() -> Self {
        let mut base = Config::default();
        base.phantom.size = 32;
        base.phantom.count = 50;
        base.phantom.test_fraction = 0.2;
        base.train.scale = 20;
        Self {
            base,
            seeds: vec![0, 1, 2],
        }
    }
}

/// One seed's reports plus training diagnostics.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Report,
    pub critic_max_abs: f32,
    pub clip_events: usize,
    pub logs: Vec<(String, String)>,
    pub seconds: f64,
}

impl SeedOutcome {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.report.rows.iter().find(|r| r.label == label)
    }
}

fn variant(base: &Config, seed: u64, norm: Norm, noise: bool, sg: bool) -> Config {
    let mut c = base.clone();
    c.seed = seed;
    c.model.backbone = Backbone::Dcitn;
    c.model.norm = norm;
    c.model.noise = noise;
    c.model.sg = sg;
    c
}

fn score_row(label: &str, outputs: &[Volume], test: &[Triplet], harness: &UnetScore) -> Result<ReportRow> {
    let cases = outputs
        .iter()
        .zip(test)
        .map(|(o, t)| {
            let unet = harness.score(o, &t.s)?;
            CaseMetrics::compute(t.case, o, &t.y, &t.s, Some(&unet))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportRow {
        label: label.to_string(),
        cases,
    })
}

/// i.i.d. uniform noise over each case's full-dose range.
pub fn noise_inputs(test: &[Triplet], seed: u64) -> Vec<Volume> {
    test.iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((2 << 32) | t.case as u64);
            let (lo, hi) = (t.y.min(), t.y.max());
            let mut v = t.y.clone();
            v.data.iter_mut().for_each(|x| *x = rng.gen_range(lo..=hi));
            v
        })
        .collect()
}

struct Run {
    log: Vec<u8>,
    critic_max: f32,
    clips: usize,
}

impl Run {
    fn new() -> Self {
        Self {
            log: format!("{}\n", crate::training::LOG_HEADER).into_bytes(),
            critic_max: 0.0,
            clips: 0,
        }
    }

    fn drive(&mut self, t: &mut Trainer, until_phase: Option<u32>) -> Result<()> {
        while t.next_epoch().is_some() && until_phase.map_or(true, |p| t.state.phase < p) {
            let s = t.run_epoch()?;
            self.log.extend(format!("{}\n", s.log_line()).bytes());
            self.critic_max = self.critic_max.max(s.critic_max_abs);
            self.clips += s.clip_events;
            log::info!("seed {} {}", t.config.seed, s.log_line());
        }
        Ok(())
    }
}

fn translate_all(t: &Trainer, test: &[Triplet]) -> Result<Vec<Volume>> {
    test.iter().map(|c| t.translate_counts(&c.x)).collect()
}

/// Trains every arm for one seed and scores it on the test split.
pub fn run_seed(study: &StudyConfig, seed: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    let start = Instant::now();
    let base = variant(&study.base, seed, Norm::AdaIn, true, true);
    base.validate()?;
    let data = generate_triplets(&base.phantom, base.model.rois, seed)?;
    let (train, test): (Vec<Triplet>, Vec<Triplet>) = data.into_iter().partition(|t| t.split == Split::Train);

    let mut harness = UnetScore::new(&base)?;
    harness.train(&base, &train)?;
    let mut rows = vec![
        score_row(INPUT, &test.iter().map(|t| t.x.clone()).collect::<Vec<_>>(), &test, &harness)?,
        score_row(FULL, &test.iter().map(|t| t.y.clone()).collect::<Vec<_>>(), &test, &harness)?,
        score_row(NOISE, &noise_inputs(&test, seed), &test, &harness)?,
    ];
    let mut logs = Vec::new();
    let mut critic_max = 0.0f32;
    let mut clips = 0;
    let mut finish = |name: &str, run: Run, logs: &mut Vec<(String, String)>| {
        critic_max = critic_max.max(run.critic_max);
        clips += run.clips;
        logs.push((name.to_string(), String::from_utf8(run.log).expect("ascii log")));
    };

    let plain_cfg = variant(&study.base, seed, Norm::None, false, false);
    let mut plain = Trainer::new(plain_cfg, &train, &test)?;
    let mut run = Run::new();
    run.drive(&mut plain, None)?;
    rows.push(score_row(PLAIN, &translate_all(&plain, &test)?, &test, &harness)?);
    finish(PLAIN, run, &mut logs);
    drop(plain);

    let mut style = Trainer::new(base.clone(), &train, &test)?;
    let mut run = Run::new();
    run.drive(&mut style, Some(1))?;
    let shared = style.checkpoint();
    finish("phase1", run, &mut logs);
    drop(style);

    let mut nosg = Trainer::resume(&shared, variant(&study.base, seed, Norm::AdaIn, true, false), &train, &test)?;
    let mut run = Run::new();
    run.drive(&mut nosg, None)?;
    rows.push(score_row(STYLE, &translate_all(&nosg, &test)?, &test, &harness)?);
    finish(STYLE, run, &mut logs);
    drop(nosg);

    let mut sg = Trainer::resume(&shared, base, &train, &test)?;
    let mut run = Run::new();
    run.drive(&mut sg, None)?;
    rows.push(score_row(SGSGAN, &translate_all(&sg, &test)?, &test, &harness)?);
    finish(SGSGAN, run, &mut logs);

    let outcome = SeedOutcome {
        seed,
        report: Report { rows },
        critic_max_abs: critic_max,
        clip_events: clips,
        logs,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        let dir = dir.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.txt"), outcome.report.to_text())?;
        fs::write(dir.join("report.tsv"), outcome.report.to_tsv())?;
        for (name, log) in &outcome.logs {
            fs::write(dir.join(format!("{}.log", name.replace('+', "_"))), log)?;
        }
    }
    Ok(outcome)
}

/// Mean of `f` over seeds.
pub fn seed_mean(outcomes: &[SeedOutcome], label: &str, f: impl Fn(&ReportRow) -> f64) -> f64 {
    let v: Vec<f64> = outcomes.iter().filter_map(|o| o.row(label)).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}
