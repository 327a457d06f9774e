//! Component ablations: each variant edits the base configuration, runs one
//! training per seed and reports the mean test metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::{run_training, RunOptions};
use crate::model::AdjacencyKind;

/// Relative gap below which an ordering violation is flagged, not failed.
pub const SOFT_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanVariant {
    Full,
    /// No dual-scale blocks; the demonstration layout stays.
    NoDsca,
    /// Fine edge weights drawn at random once and frozen.
    RandomAdjacency,
    /// No coarse projection, coarse GCN or interaction.
    NoCoarse,
    LayerSweep,
    InsertionSweep,
    PartsSweep,
}

impl std::str::FromStr for PlanVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Self::Full,
            "no_dsca" => Self::NoDsca,
            "random_adjacency" => Self::RandomAdjacency,
            "no_coarse" => Self::NoCoarse,
            "layer_sweep" => Self::LayerSweep,
            "insertion_sweep" => Self::InsertionSweep,
            "parts_sweep" => Self::PartsSweep,
            _ => return Err(Error::InvalidArgument(format!("unknown ablation variant {s:?}"))),
        })
    }
}

/// One concrete configuration edit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDsca,
    RandomAdjacency,
    NoCoarse,
    Layers(usize),
    Insertion(Vec<usize>),
    Parts(usize),
}

pub const INSERTION_SWEEP: [&[usize]; 5] = [&[0], &[0, 2], &[0, 4], &[0, 2, 4], &[2, 4]];

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoDsca => "no_dsca".into(),
            Variant::RandomAdjacency => "random_adjacency".into(),
            Variant::NoCoarse => "no_coarse".into(),
            Variant::Layers(l) => format!("layers_{l}"),
            Variant::Insertion(p) => format!(
                "insertion_{}",
                p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("_")
            ),
            Variant::Parts(n) => format!("parts_{n}"),
        }
    }

    /// The base configuration with this variant's edit applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            Variant::Full => {}
            Variant::NoDsca => m.dsca = false,
            Variant::RandomAdjacency => m.adjacency = AdjacencyKind::Random,
            Variant::NoCoarse => m.coarse_branch = false,
            Variant::Layers(l) => {
                m.backbone.layers = *l;
                m.backbone.insertion_positions = if *l == 0 { vec![0] } else { vec![0, *l] };
            }
            Variant::Insertion(p) => {
                let deepest = p.iter().copied().max().unwrap_or(0);
                m.backbone.layers = m.backbone.layers.max(deepest);
                m.backbone.insertion_positions = p.clone();
            }
            Variant::Parts(n) => m.parts = *n,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<PlanVariant>,
    pub seeds: Vec<u64>,
    pub layer_values: Vec<usize>,
    pub parts_values: Vec<usize>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: vec![PlanVariant::Full, PlanVariant::RandomAdjacency, PlanVariant::NoCoarse],
            seeds: vec![0, 1, 2, 3, 4],
            layer_values: vec![1, 2, 3, 4],
            parts_values: vec![1, 2, 3, 4],
        }
    }
}

impl AblationPlan {
    pub fn expand(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for v in &self.variants {
            match v {
                PlanVariant::Full => out.push(Variant::Full),
                PlanVariant::NoDsca => out.push(Variant::NoDsca),
                PlanVariant::RandomAdjacency => out.push(Variant::RandomAdjacency),
                PlanVariant::NoCoarse => out.push(Variant::NoCoarse),
                PlanVariant::LayerSweep => out.extend(self.layer_values.iter().map(|&l| Variant::Layers(l))),
                PlanVariant::InsertionSweep => {
                    out.extend(INSERTION_SWEEP.iter().map(|p| Variant::Insertion(p.to_vec())))
                }
                PlanVariant::PartsSweep => out.extend(self.parts_values.iter().map(|&n| Variant::Parts(n))),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Test selection score (MSE, OWA or 1 − accuracy).
    pub test_metric: Option<f64>,
    pub baseline_metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub per_seed: Vec<SeedOutcome>,
    /// Mean over successful seeds.
    pub mean: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Holds,
    /// Violated by at most [`SOFT_TOLERANCE`].
    Flagged,
    Violated,
    Missing,
}

/// Expected ordering `better ≤ worse` of mean test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: String,
    pub worse: String,
    /// `(mean_better − mean_worse) / mean_worse`; positive means violated.
    pub relative_gap: Option<f64>,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub variants: Vec<VariantSummary>,
    pub checks: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.variants.iter().find(|v| v.name == name).and_then(|v| v.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }
}

pub fn ordering_check(report_variants: &[VariantSummary], better: &str, worse: &str) -> OrderingCheck {
    let find = |n: &str| report_variants.iter().find(|v| v.name == n).and_then(|v| v.mean);
    let (status, gap) = match (find(better), find(worse)) {
        (Some(b), Some(w)) => {
            let gap = (b - w) / w.abs().max(f64::MIN_POSITIVE);
            let status = if b <= w {
                CheckStatus::Holds
            } else if gap <= SOFT_TOLERANCE {
                CheckStatus::Flagged
            } else {
                CheckStatus::Violated
            };
            (status, Some(gap))
        }
        _ => (CheckStatus::Missing, None),
    };
    OrderingCheck {
        better: better.into(),
        worse: worse.into(),
        relative_gap: gap,
        status,
    }
}

/// Runs every (variant, seed) pair sequentially. A failing run is recorded and
/// the rest continue. `on_run` sees each finished outcome.
pub fn run_ablation(
    plan: &AblationPlan,
    base: &RunConfig,
    mut on_run: impl FnMut(&str, &SeedOutcome),
) -> Result<AblationReport> {
    if plan.seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut variants = Vec::new();
    for v in plan.expand() {
        let name = v.name();
        let mut per_seed = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            let mut cfg = v.apply(base);
            cfg.train.seed = seed;
            let outcome = match run_training(&cfg, &RunOptions::default()) {
                Ok(run) => SeedOutcome {
                    seed,
                    test_metric: Some(run.report.test.values.selection_score()),
                    baseline_metric: run.report.test.baseline.as_ref().map(|b| b.selection_score()),
                    error: None,
                },
                Err(e) => SeedOutcome {
                    seed,
                    test_metric: None,
                    baseline_metric: None,
                    error: Some(e.to_string()),
                },
            };
            on_run(&name, &outcome);
            per_seed.push(outcome);
        }
        let ok: Vec<f64> = per_seed.iter().filter_map(|o| o.test_metric).collect();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        variants.push(VariantSummary { name, per_seed, mean });
    }
    let mut checks = Vec::new();
    for worse in ["no_coarse", "random_adjacency", "no_dsca"] {
        if variants.iter().any(|v| v.name == worse) && variants.iter().any(|v| v.name == "full") {
            checks.push(ordering_check(&variants, "full", worse));
        }
    }
    Ok(AblationReport {
        schema_version: crate::metrics::REPORT_SCHEMA_VERSION,
        variants,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_edits() {
        let base = RunConfig::default();
        let nc = Variant::NoCoarse.apply(&base);
        assert!(!nc.model.coarse_branch);
        let r = Variant::RandomAdjacency.apply(&base);
        assert_eq!(r.model.adjacency, AdjacencyKind::Random);
        let plan = AblationPlan {
            variants: vec![PlanVariant::InsertionSweep],
            ..Default::default()
        };
        let names: Vec<String> = plan.expand().iter().map(Variant::name).collect();
        assert_eq!(names, ["insertion_0", "insertion_0_2", "insertion_0_4", "insertion_0_2_4", "insertion_2_4"]);
    }

    #[test]
    fn soft_ordering() {
        let mk = |name: &str, mean: f64| VariantSummary {
            name: name.into(),
            per_seed: Vec::new(),
            mean: Some(mean),
        };
        let vs = [mk("full", 1.01), mk("no_coarse", 1.0), mk("random_adjacency", 2.0)];
        assert_eq!(ordering_check(&vs, "full", "no_coarse").status, CheckStatus::Flagged);
        assert_eq!(ordering_check(&vs, "full", "random_adjacency").status, CheckStatus::Holds);
        let vs = [mk("full", 1.5), mk("no_coarse", 1.0)];
        assert_eq!(ordering_check(&vs, "full", "no_coarse").status, CheckStatus::Violated);
    }
}
