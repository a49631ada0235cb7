//! Cross-seed aggregation into one report plus plot-ready tables.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cotlab::attribution::{mean_std, RegionShares};
use cotlab::inference::RunMode;
use cotlab::synthworld::LangId;
use cotlab::training::Variant;

use crate::error::{CliError, Result};
use crate::pipeline::{
    suite_file, AttributionSuite, Lab, ProsodySuite, QualitySuite, RobustnessSuite, Suite,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Stat { per_seed, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub variant: Variant,
    pub mode: RunMode,
    /// `None` for the mean over all items.
    pub language: Option<LangId>,
    pub score: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub variant: Variant,
    pub mode: RunMode,
    pub ratio: f64,
    pub delta: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub variant: Variant,
    pub mode: RunMode,
    pub layer: usize,
    pub region: String,
    pub share: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechShareRow {
    pub variant: Variant,
    pub mode: RunMode,
    /// Cross-layer mean speech share.
    pub share: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyRow {
    pub variant: Variant,
    pub mode: RunMode,
    pub d: Stat,
    pub g: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub quality: Vec<QualityRow>,
    pub robustness: Vec<RobustnessRow>,
    pub attribution: Vec<AttributionRow>,
    pub speech_share: Vec<SpeechShareRow>,
    pub prosody: Vec<ProsodyRow>,
}

impl Report {
    pub fn robustness_row(&self, variant: Variant, mode: RunMode, ratio: f64) -> Option<&RobustnessRow> {
        self.robustness
            .iter()
            .find(|r| r.variant == variant && r.mode == mode && r.ratio == ratio)
    }

    pub fn speech(&self, variant: Variant, mode: RunMode) -> Option<&SpeechShareRow> {
        self.speech_share
            .iter()
            .find(|r| r.variant == variant && r.mode == mode)
    }

    pub fn prosody_row(&self, variant: Variant, mode: RunMode) -> Option<&ProsodyRow> {
        self.prosody.iter().find(|r| r.variant == variant && r.mode == mode)
    }
}

fn note_missing<T>(r: Result<T>, missing: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CliError::Missing(m)) => {
            missing.extend(m);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn pm(s: &Stat) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

impl Lab {
    fn gather<T: serde::de::DeserializeOwned>(&self, suite: Suite, kind: &str) -> Result<Vec<(Variant, Vec<T>)>> {
        let mut missing = Vec::new();
        let mut out = Vec::new();
        for v in Variant::ALL {
            let mut per_seed = Vec::new();
            for &seed in &self.config.seeds {
                let rel = suite_file(seed, v, suite);
                if self.store.exists(&rel) {
                    per_seed.push(self.store.read_json(&rel, kind)?);
                } else {
                    missing.push(rel);
                }
            }
            out.push((v, per_seed));
        }
        if !missing.is_empty() {
            return Err(CliError::Missing(missing));
        }
        Ok(out)
    }

    pub fn build_report(&self) -> Result<Report> {
        let mut missing = Vec::new();
        let quality = note_missing(self.gather::<QualitySuite>(Suite::Quality, "quality"), &mut missing)?;
        let robustness =
            note_missing(self.gather::<RobustnessSuite>(Suite::Robustness, "robustness"), &mut missing)?;
        let attribution =
            note_missing(self.gather::<AttributionSuite>(Suite::Attribution, "attribution"), &mut missing)?;
        let prosody = note_missing(self.gather::<ProsodySuite>(Suite::Prosody, "prosody"), &mut missing)?;
        let (Some(quality), Some(robustness), Some(attribution), Some(prosody)) =
            (quality, robustness, attribution, prosody)
        else {
            return Err(CliError::Missing(missing));
        };

        let mut report = Report {
            seeds: self.config.seeds.clone(),
            variants: Variant::ALL.to_vec(),
            quality: Vec::new(),
            robustness: Vec::new(),
            attribution: Vec::new(),
            speech_share: Vec::new(),
            prosody: Vec::new(),
        };

        for (v, runs) in &quality {
            for (k, first) in runs[0].reports.iter().enumerate() {
                let mode = first.mode;
                report.quality.push(QualityRow {
                    variant: *v,
                    mode,
                    language: None,
                    score: Stat::of(runs.iter().map(|r| r.reports[k].mean).collect()),
                });
                for &lang in first.per_language.keys() {
                    report.quality.push(QualityRow {
                        variant: *v,
                        mode,
                        language: Some(lang),
                        score: Stat::of(runs.iter().map(|r| r.reports[k].per_language[&lang]).collect()),
                    });
                }
            }
        }
        for (v, runs) in &robustness {
            for (k, first) in runs[0].curves.iter().enumerate() {
                for (p, point) in first.points.iter().enumerate() {
                    report.robustness.push(RobustnessRow {
                        variant: *v,
                        mode: first.mode,
                        ratio: point.ratio,
                        delta: Stat::of(runs.iter().map(|r| r.curves[k].points[p].delta).collect()),
                    });
                }
            }
        }
        for (v, runs) in &attribution {
            for (k, first) in runs[0].modes.iter().enumerate() {
                let means: Vec<_> = runs.iter().filter_map(|r| r.modes[k].mean.clone()).collect();
                if means.len() != runs.len() {
                    log::warn!(
                        "{} {}: some seeds produced no scorable translations",
                        v.as_str(),
                        first.mode.as_str()
                    );
                }
                if means.is_empty() {
                    continue;
                }
                for layer in 0..means[0].per_layer.len() {
                    for (r, name) in RegionShares::NAMES.iter().enumerate() {
                        report.attribution.push(AttributionRow {
                            variant: *v,
                            mode: first.mode,
                            layer,
                            region: name.to_string(),
                            share: Stat::of(means.iter().map(|m| m.per_layer[layer].as_array()[r]).collect()),
                        });
                    }
                }
                report.speech_share.push(SpeechShareRow {
                    variant: *v,
                    mode: first.mode,
                    share: Stat::of(means.iter().map(|m| m.mean.speech).collect()),
                });
            }
        }
        for (v, runs) in &prosody {
            for (k, first) in runs[0].reports.iter().enumerate() {
                report.prosody.push(ProsodyRow {
                    variant: *v,
                    mode: first.mode,
                    d: Stat::of(runs.iter().map(|r| r.reports[k].d).collect()),
                    g: Stat::of(runs.iter().map(|r| r.reports[k].g).collect()),
                });
            }
        }
        Ok(report)
    }

    /// Writes `report/report.{json,md}` and the plot-data tables.
    pub fn report(&self) -> Result<PathBuf> {
        let report = self.build_report()?;
        let s = &self.store;
        s.write_json("report/report.json", "report", &report)?;

        let mut quality = String::from("variant\tmode\tlanguage\tmean\tstd\n");
        for r in &report.quality {
            let lang = r.language.map_or("all".to_string(), |l| l.to_string());
            let _ = writeln!(quality, "{}\t{}\t{lang}\t{}\t{}", r.variant.as_str(), r.mode.as_str(), r.score.mean, r.score.std);
        }
        let mut robustness = String::from("variant\tmode\tratio\tdelta\tstd\n");
        for r in &report.robustness {
            let _ = writeln!(robustness, "{}\t{}\t{}\t{}\t{}", r.variant.as_str(), r.mode.as_str(), r.ratio, r.delta.mean, r.delta.std);
        }
        // Special tokens are left out of the plotted layer curves.
        let mut attribution = String::from("variant\tmode\tlayer\tregion\tmean\tstd\n");
        for r in report.attribution.iter().filter(|r| r.region != "special") {
            let _ = writeln!(attribution, "{}\t{}\t{}\t{}\t{}\t{}", r.variant.as_str(), r.mode.as_str(), r.layer, r.region, r.share.mean, r.share.std);
        }
        let mut prosody = String::from("variant\tmode\td_mean\td_std\tg_mean\tg_std\n");
        for r in &report.prosody {
            let _ = writeln!(prosody, "{}\t{}\t{}\t{}\t{}\t{}", r.variant.as_str(), r.mode.as_str(), r.d.mean, r.d.std, r.g.mean, r.g.std);
        }
        let tables = [
            ("report/quality.tsv", quality),
            ("report/robustness.tsv", robustness),
            ("report/attribution.tsv", attribution),
            ("report/prosody.tsv", prosody),
        ];
        for (rel, text) in &tables {
            s.write_bytes(rel, text.as_bytes())?;
        }
        s.write_bytes("report/report.md", self.markdown(&report).as_bytes())?;
        let mut files: Vec<String> = tables.iter().map(|(r, _)| r.to_string()).collect();
        files.push("report/report.json".into());
        files.push("report/report.md".into());
        s.register(&files)?;
        Ok(s.path("report/report.md"))
    }

    fn markdown(&self, report: &Report) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Experiment report\n");
        let _ = writeln!(md, "Config digest: `{}`  ", self.store.config_digest);
        let seeds: Vec<String> = report.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(md, "Seeds: {}  ", seeds.join(", "));
        let _ = writeln!(md, "Values are mean ± std over seeds.\n");

        let _ = writeln!(md, "## Translation quality (unigram F1)\n");
        let _ = writeln!(md, "| variant | mode | all | per language |\n|---|---|---|---|");
        for r in report.quality.iter().filter(|r| r.language.is_none()) {
            let langs: Vec<String> = report
                .quality
                .iter()
                .filter(|q| q.variant == r.variant && q.mode == r.mode && q.language.is_some())
                .map(|q| format!("{}: {:.4}", q.language.unwrap(), q.score.mean))
                .collect();
            let _ = writeln!(md, "| {} | {} | {} | {} |", r.variant.as_str(), r.mode.as_str(), pm(&r.score), langs.join(", "));
        }

        let _ = writeln!(md, "\n## Robustness to transcript corruption (Δ quality)\n");
        let _ = writeln!(md, "| variant | mode | ratio | Δ |\n|---|---|---|---|");
        for r in &report.robustness {
            let _ = writeln!(md, "| {} | {} | {} | {} |", r.variant.as_str(), r.mode.as_str(), r.ratio, pm(&r.delta));
        }

        let _ = writeln!(md, "\n## Speech attribution (cross-layer mean share)\n");
        let _ = writeln!(md, "| variant | mode | speech share |\n|---|---|---|");
        for r in &report.speech_share {
            let _ = writeln!(md, "| {} | {} | {} |", r.variant.as_str(), r.mode.as_str(), pm(&r.share));
        }
        let _ = writeln!(md, "\nLayer curves: `attribution.tsv`.\n");

        let _ = writeln!(md, "## Contrastive prosody\n");
        let _ = writeln!(md, "| variant | mode | D | G |\n|---|---|---|---|");
        for r in &report.prosody {
            let _ = writeln!(md, "| {} | {} | {} | {} |", r.variant.as_str(), r.mode.as_str(), pm(&r.d), pm(&r.g));
        }
        md
    }
}
