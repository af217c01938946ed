use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ExperimentResult, Provenance};
use crate::error::{Error, Result};
use crate::stats::{bonferroni, one_way_anova, paired_t, sample_sd, summarize, Anova, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Parse(format!("unknown report format {other:?}"))),
        }
    }
}

/// Paired comparison of a configuration against the baseline, by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub cohens_d: f64,
    pub p_bonferroni: f64,
    /// Differences have zero variance, so t is undefined or trivially 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub label: String,
    pub primary: bool,
    pub baseline: bool,
    pub n: usize,
    pub ppl_mean: f64,
    pub ppl_sd: f64,
    pub ratio: f64,
    pub gap_percent: f64,
    pub cv_percent: Option<f64>,
    pub ci95_low: Option<f64>,
    pub ci95_high: Option<f64>,
    pub paired: Option<PairedRow>,
    pub entropy_mean: f64,
    pub entropy_sd: f64,
    pub fidelity_mean: f64,
    pub fidelity_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub baseline: String,
    pub rows: Vec<ConfigRow>,
    pub anova: Option<Anova>,
    pub provenance: Provenance,
}

/// `7.84 / 7.51` → `1.044×`.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.3}×")
}

/// Relative gap in percent with an explicit sign, e.g. `+4.4%`.
pub fn format_gap(gap_percent: f64) -> String {
    let g = if gap_percent.abs() < 0.05 { 0.0 } else { gap_percent };
    format!("{g:+.1}%")
}

fn sd_or_zero(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        sample_sd(xs)
    }
}

impl ReportBundle {
    /// Every number is recomputed from the raw per-seed results.
    pub fn from_result(result: &ExperimentResult) -> Result<Self> {
        if !result.is_complete() {
            let missing: Vec<String> = result.failures().map(|c| format!("{}@{}", c.label, c.seed)).collect();
            return Err(Error::IncompleteResult(if missing.is_empty() {
                "cells missing".into()
            } else {
                missing.join(", ")
            }));
        }
        let m = &result.matrix;
        let base_label = m.baseline().label.clone();
        let collect = |label: &str, f: fn(&crate::train::RunResult) -> f64| -> Result<Vec<f64>> {
            Ok(result.runs(label)?.into_iter().map(f).collect())
        };
        let base_ppl = collect(&base_label, |r| r.perplexity)?;
        let base_mean = crate::stats::mean(&base_ppl);

        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for c in &m.configs {
            let ppl = collect(&c.label, |r| r.perplexity)?;
            let entropy = collect(&c.label, |r| r.entropy_bits)?;
            let fidelity = collect(&c.label, |r| r.fidelity)?;
            let set = SampleSet::new(c.label.clone(), ppl.clone());
            let summary = summarize(&set).ok();
            let paired = if c.is_baseline() {
                None
            } else {
                let base = SampleSet::new(base_label.clone(), base_ppl.clone());
                Some(match paired_t(&base, &set) {
                    Ok(t) => PairedRow {
                        mean_diff: t.mean_diff,
                        t: t.t,
                        p: t.p,
                        cohens_d: t.cohens_d,
                        p_bonferroni: t.p,
                        degenerate: t.sd_diff == 0.0,
                    },
                    Err(_) => {
                        let diffs: Vec<f64> = ppl.iter().zip(&base_ppl).map(|(b, a)| b - a).collect();
                        PairedRow {
                            mean_diff: crate::stats::mean(&diffs),
                            t: f64::NAN,
                            p: f64::NAN,
                            cohens_d: f64::NAN,
                            p_bonferroni: f64::NAN,
                            degenerate: true,
                        }
                    }
                })
            };
            let mean = set.mean();
            rows.push(ConfigRow {
                label: c.label.clone(),
                primary: c.primary,
                baseline: c.is_baseline(),
                n: ppl.len(),
                ppl_mean: mean,
                ppl_sd: sd_or_zero(&ppl),
                ratio: mean / base_mean,
                gap_percent: 100.0 * (mean - base_mean) / base_mean,
                cv_percent: summary.as_ref().map(|s| s.cv_percent),
                ci95_low: summary.as_ref().map(|s| s.ci95_low),
                ci95_high: summary.as_ref().map(|s| s.ci95_high),
                paired,
                entropy_mean: crate::stats::mean(&entropy),
                entropy_sd: sd_or_zero(&entropy),
                fidelity_mean: crate::stats::mean(&fidelity),
                fidelity_sd: sd_or_zero(&fidelity),
            });
            groups.push(set);
        }
        // Bonferroni over every comparison with a defined p-value.
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].paired.as_ref().is_some_and(|p| p.p.is_finite()))
            .collect();
        let pvals: Vec<f64> = idx.iter().map(|&i| rows[i].paired.as_ref().unwrap().p).collect();
        for (i, adj) in idx.iter().zip(bonferroni(&pvals)?) {
            rows[*i].paired.as_mut().unwrap().p_bonferroni = adj;
        }
        Ok(Self {
            baseline: base_label,
            rows,
            anova: one_way_anova(&groups).ok(),
            provenance: result.provenance.clone(),
        })
    }

    /// Rows sorted by mean perplexity, best first.
    pub fn ranked(&self) -> Vec<&ConfigRow> {
        let mut r: Vec<&ConfigRow> = self.rows.iter().collect();
        r.sort_by(|a, b| a.ppl_mean.total_cmp(&b.ppl_mean));
        r
    }

    pub fn row(&self, label: &str) -> Option<&ConfigRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Four significant digits, plain notation where sensible.
pub(crate) fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return "n/a".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), sig4)
}

fn markdown(b: &ReportBundle) -> String {
    let mut s = String::new();
    let primary: Vec<&ConfigRow> = b.ranked().into_iter().filter(|r| r.primary).collect();
    let _ = writeln!(s, "## Perplexity\n");
    let _ = writeln!(s, "| Rank | Configuration | Mean PPL | vs Baseline | Gap |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for (i, r) in primary.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {} ± {} | {} | {} |",
            i + 1,
            r.label,
            sig4(r.ppl_mean),
            sig4(r.ppl_sd),
            format_ratio(r.ratio),
            if r.baseline { "baseline".into() } else { format_gap(r.gap_percent) }
        );
    }

    let _ = writeln!(s, "\n## Paired tests vs {}\n", b.baseline);
    let _ = writeln!(s, "| Configuration | Mean diff | t | p | Cohen's d | p (Bonferroni) | Note |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for r in primary.iter().filter(|r| !r.baseline) {
        let p = r.paired.as_ref().unwrap();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.label,
            sig4(p.mean_diff),
            sig4(p.t),
            sig4(p.p),
            sig4(p.cohens_d),
            sig4(p.p_bonferroni),
            if p.degenerate { "degenerate" } else { "" }
        );
    }
    match &b.anova {
        Some(a) => {
            let _ = writeln!(
                s,
                "\nOne-way ANOVA over all configurations: F({}, {}) = {}, p = {}",
                a.df_between,
                a.df_within,
                sig4(a.f),
                sig4(a.p)
            );
        }
        None => {
            let _ = writeln!(s, "\nOne-way ANOVA: undefined (degenerate or too few seeds)");
        }
    }

    let _ = writeln!(s, "\n## Reproducibility\n");
    let _ = writeln!(s, "| Configuration | Mean PPL | SD | CV% | 95% CI |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in &primary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | [{}, {}] |",
            r.label,
            sig4(r.ppl_mean),
            sig4(r.ppl_sd),
            opt(r.cv_percent),
            opt(r.ci95_low),
            opt(r.ci95_high)
        );
    }

    let _ = writeln!(s, "\n## Attention\n");
    let _ = writeln!(s, "| Configuration | Entropy (bits) | Fidelity |");
    let _ = writeln!(s, "|---|---|---|");
    for r in &primary {
        let _ = writeln!(
            s,
            "| {} | {} ± {} | {} ± {} |",
            r.label,
            sig4(r.entropy_mean),
            sig4(r.entropy_sd),
            sig4(r.fidelity_mean),
            sig4(r.fidelity_sd)
        );
    }
    let _ = writeln!(
        s,
        "\ncorpus {} · reference {} · version {}",
        &b.provenance.corpus_hash[..12.min(b.provenance.corpus_hash.len())],
        b.provenance.reference_hash.as_deref().map_or("none", |h| &h[..12.min(h.len())]),
        b.provenance.code_version
    );
    s
}

pub(crate) const CSV_HEADER: &str = "label,primary,baseline,n,ppl_mean,ppl_sd,ratio,gap_percent,cv_percent,ci95_low,ci95_high,mean_diff,t,p,cohens_d,p_bonferroni,degenerate,entropy_mean,entropy_sd,fidelity_mean,fidelity_sd";

fn csv(b: &ReportBundle) -> String {
    let num = |x: f64| if x.is_finite() { format!("{x}") } else { String::new() };
    let o = |x: Option<f64>| x.map_or_else(String::new, num);
    let mut s = format!("{CSV_HEADER}\n");
    for r in b.ranked() {
        let p = r.paired.as_ref();
        let fields = [
            r.label.clone(),
            r.primary.to_string(),
            r.baseline.to_string(),
            r.n.to_string(),
            num(r.ppl_mean),
            num(r.ppl_sd),
            num(r.ratio),
            num(r.gap_percent),
            o(r.cv_percent),
            o(r.ci95_low),
            o(r.ci95_high),
            o(p.map(|p| p.mean_diff)),
            o(p.map(|p| p.t)),
            o(p.map(|p| p.p)),
            o(p.map(|p| p.cohens_d)),
            o(p.map(|p| p.p_bonferroni)),
            p.map_or(String::new(), |p| p.degenerate.to_string()),
            num(r.entropy_mean),
            num(r.entropy_sd),
            num(r.fidelity_mean),
            num(r.fidelity_sd),
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn render_report(result: &ExperimentResult, format: ReportFormat) -> Result<String> {
    let bundle = ReportBundle::from_result(result)?;
    Ok(match format {
        ReportFormat::Markdown => markdown(&bundle),
        ReportFormat::Csv => csv(&bundle),
        ReportFormat::Json => serde_json::to_string_pretty(&bundle)?,
    })
}
