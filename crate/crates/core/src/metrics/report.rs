use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{bias, data_range, mae, masked_metric, nrmse, psnr, ssim3d, variance, Metric};
use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Metrics over one ROI of one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub unet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case: usize,
    pub range: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub nrmse: f64,
    pub bias: f64,
    pub variance: f64,
    pub rois: Vec<RegionMetrics>,
}

impl CaseMetrics {
    /// Whole-image and per-ROI metrics; `unet` holds per-ROI harness dice.
    pub fn compute(case: usize, yhat: &Volume, y: &Volume, s: &Mask, unet: Option<&[f64]>) -> Result<Self> {
        let mut rois = Vec::with_capacity(s.channels);
        for r in 0..s.channels {
            let m = s.channel(r);
            rois.push(RegionMetrics {
                psnr: masked_metric(Metric::Psnr, yhat, y, m)?,
                ssim: masked_metric(Metric::Ssim, yhat, y, m)?,
                mae: masked_metric(Metric::Mae, yhat, y, m)?,
                unet: unet.map(|u| u[r]),
            });
        }
        Ok(Self {
            case,
            range: data_range(y),
            psnr: psnr(yhat, y, None)?,
            ssim: ssim3d(yhat, y, None)?,
            mae: mae(yhat, y)?,
            nrmse: nrmse(yhat, y)?,
            bias: bias(yhat, y)?,
            variance: variance(yhat, y)?,
            rois,
        })
    }

    /// Mean harness dice over ROIs.
    pub fn unet_all(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.rois.iter().map(|r| r.unet).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn fields(&self) -> Vec<(String, f64)> {
        let mut f = vec![
            ("range".to_string(), self.range),
            ("psnr".into(), self.psnr),
            ("ssim".into(), self.ssim),
            ("mae".into(), self.mae),
            ("nrmse".into(), self.nrmse),
            ("bias".into(), self.bias),
            ("variance".into(), self.variance),
        ];
        for (r, m) in self.rois.iter().enumerate() {
            f.push((format!("roi{r}.psnr"), m.psnr));
            f.push((format!("roi{r}.ssim"), m.ssim));
            f.push((format!("roi{r}.mae"), m.mae));
            if let Some(u) = m.unet {
                f.push((format!("roi{r}.unet"), u));
            }
        }
        if let Some(u) = self.unet_all() {
            f.push(("unet_all".into(), u));
        }
        f
    }

    fn from_fields(case: usize, kv: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Data(format!("report case {case} lacks `{k}`")));
        let mut rois = Vec::new();
        while kv.contains_key(&format!("roi{}.psnr", rois.len())) {
            let r = rois.len();
            rois.push(RegionMetrics {
                psnr: get(&format!("roi{r}.psnr"))?,
                ssim: get(&format!("roi{r}.ssim"))?,
                mae: get(&format!("roi{r}.mae"))?,
                unet: kv.get(&format!("roi{r}.unet")).copied(),
            });
        }
        Ok(Self {
            case,
            range: get("range")?,
            psnr: get("psnr")?,
            ssim: get("ssim")?,
            mae: get("mae")?,
            nrmse: get("nrmse")?,
            bias: get("bias")?,
            variance: get("variance")?,
            rois,
        })
    }
}

/// Per-case metrics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub cases: Vec<CaseMetrics>,
}

impl ReportRow {
    fn mean(&self, f: impl Fn(&CaseMetrics) -> Option<f64>) -> Option<f64> {
        let v: Option<Vec<f64>> = self.cases.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Arithmetic mean over cases of every per-case field.
    pub fn aggregate(&self) -> Vec<(String, f64)> {
        let Some(first) = self.cases.first() else {
            return Vec::new();
        };
        first
            .fields()
            .into_iter()
            .filter_map(|(k, _)| {
                let m = self.mean(|c| c.fields().into_iter().find(|(kk, _)| *kk == k).map(|(_, v)| v))?;
                Some((k, m))
            })
            .collect()
    }

    pub fn psnr(&self) -> f64 {
        self.mean(|c| Some(c.psnr)).unwrap_or(f64::NAN)
    }

    pub fn ssim(&self) -> f64 {
        self.mean(|c| Some(c.ssim)).unwrap_or(f64::NAN)
    }

    pub fn mae(&self) -> f64 {
        self.mean(|c| Some(c.mae)).unwrap_or(f64::NAN)
    }

    pub fn roi_mae(&self, r: usize) -> f64 {
        self.mean(|c| c.rois.get(r).map(|m| m.mae)).unwrap_or(f64::NAN)
    }

    pub fn unet(&self, r: usize) -> Option<f64> {
        self.mean(|c| c.rois.get(r).and_then(|m| m.unet))
    }

    pub fn unet_all(&self) -> Option<f64> {
        self.mean(CaseMetrics::unet_all)
    }
}

/// Structured key-value document plus a metric-by-region summary table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn fmt_kv(out: &mut String, head: &str, fields: &[(String, f64)]) {
    out.push_str(head);
    for (k, v) in fields {
        let _ = write!(out, " {k}={v:.6}");
    }
    out.push('\n');
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = writeln!(out, "[{}]", row.label);
            for c in &row.cases {
                fmt_kv(&mut out, &format!("case id={}", c.case), &c.fields());
            }
            fmt_kv(&mut out, "aggregate", &row.aggregate());
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut rows: Vec<ReportRow> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |m: &str| Error::Data(format!("report line {}: {m}", i + 1));
            if let Some(label) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                rows.push(ReportRow {
                    label: label.to_string(),
                    cases: Vec::new(),
                });
            } else if let Some(rest) = line.strip_prefix("case ") {
                let row = rows.last_mut().ok_or_else(|| bad("case before any [label]"))?;
                let mut case = None;
                let mut kv = BTreeMap::new();
                for item in rest.split_whitespace() {
                    let (k, v) = item.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                    if k == "id" {
                        case = Some(v.parse().map_err(|_| bad("bad case id"))?);
                    } else {
                        kv.insert(k.to_string(), v.parse().map_err(|_| bad("bad number"))?);
                    }
                }
                let case = case.ok_or_else(|| bad("missing id"))?;
                row.cases.push(CaseMetrics::from_fields(case, &kv)?);
            } else if !(line.is_empty() || line.starts_with("aggregate") || line.starts_with('#')) {
                return Err(bad("unrecognized line"));
            }
        }
        Ok(Self { rows })
    }

    /// One row per model; columns are PSNR, SSIM, MAE and Unet-score, each
    /// per ROI and then over all ROIs.
    pub fn to_tsv(&self) -> String {
        let rois = self.rows.iter().flat_map(|r| r.cases.first()).map(|c| c.rois.len()).max().unwrap_or(0);
        let regions: Vec<String> = (0..rois).map(|r| format!("roi{r}")).chain(["all".to_string()]).collect();
        let mut out = String::from("model");
        for m in ["psnr", "ssim", "mae", "unet"] {
            for reg in &regions {
                let _ = write!(out, "\t{m}_{reg}");
            }
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for row in &self.rows {
            out.push_str(&row.label);
            let per = |f: &dyn Fn(&CaseMetrics, usize) -> f64, r: usize| row.mean(|c| c.rois.get(r).map(|_| f(c, r)));
            let cols: [(&dyn Fn(&CaseMetrics, usize) -> f64, Option<f64>); 3] = [
                (&|c, r| c.rois[r].psnr, row.mean(|c| Some(c.psnr))),
                (&|c, r| c.rois[r].ssim, row.mean(|c| Some(c.ssim))),
                (&|c, r| c.rois[r].mae, row.mean(|c| Some(c.mae))),
            ];
            for (f, all) in cols {
                for r in 0..rois {
                    let _ = write!(out, "\t{}", cell(per(f, r)));
                }
                let _ = write!(out, "\t{}", cell(all));
            }
            for r in 0..rois {
                let _ = write!(out, "\t{}", cell(row.unet(r)));
            }
            let _ = write!(out, "\t{}", cell(row.unet_all()));
            out.push('\n');
        }
        out
    }
}
