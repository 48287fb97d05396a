//! Partition planning: sweep bottleneck configurations per location, keep the
//! minimum-bits model that clears the accuracy floor, then pick the latency-
//! or energy-optimal partition.

use crate::bottleneck::{train_bottleneck_model, BottleneckConfig, TrainMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::profile::{uplink_power_mw, CostProfile, CostRow};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanTarget {
    Latency,
    Energy,
}

impl std::str::FromStr for PlanTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(PlanTarget::Latency),
            "energy" => Ok(PlanTarget::Energy),
            other => Err(Error::InvalidConfig(format!("unknown target {other}"))),
        }
    }
}

/// Sweep bounds: s in 1..=s_max, c' in 1..=c_max, at a fixed codec quality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepBounds {
    pub s_max: usize,
    pub c_max: usize,
    pub quality: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComboRecord {
    pub s: usize,
    pub c_prime: usize,
    pub quality: u8,
    pub accuracy: f64,
    pub d_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationResult {
    /// 1-based partition id (index into partition_points + 1).
    pub j: usize,
    pub feasible: bool,
    pub best: Option<ComboRecord>,
    /// Every (s, c') combo tried, in sweep order.
    pub combos: Vec<ComboRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub accuracy_floor: f64,
    pub bounds: SweepBounds,
    pub locations: Vec<LocationResult>,
}

impl SweepResult {
    /// Measured feature sizes of the surviving models, keyed by partition id.
    pub fn d_bytes(&self) -> BTreeMap<usize, u64> {
        self.locations
            .iter()
            .filter_map(|l| l.best.map(|b| (l.j, b.d_bytes)))
            .collect()
    }
}

/// Lower D wins; equal D falls to higher accuracy.
fn better_combo(a: &ComboRecord, b: &ComboRecord) -> bool {
    a.d_bytes < b.d_bytes || (a.d_bytes == b.d_bytes && a.accuracy > b.accuracy)
}

/// Pick the best combo among those clearing the floor. Exposed so the sweep
/// table can be re-audited independently of the incremental pass.
pub fn pick_min_bits(combos: &[ComboRecord], floor: f64) -> Option<ComboRecord> {
    let mut best: Option<ComboRecord> = None;
    for c in combos.iter().filter(|c| c.accuracy >= floor) {
        if best.map_or(true, |b| better_combo(c, &b)) {
            best = Some(*c);
        }
    }
    best
}

/// Training phase of the partitioning algorithm: for every location, train all
/// (s, c') combos aware-mode at the configured quality, and keep the
/// minimum-bits model whose accuracy clears the floor. Each training seeds
/// from (seed, j, s, c') so sweep order never changes results.
///
/// Returns the sweep table plus the surviving trained models keyed by
/// partition id.
pub fn train_sweep(
    base: &NetworkGraph,
    dataset: &Dataset,
    bounds: SweepBounds,
    accuracy_floor: f64,
    train_cfg: &TrainConfig,
) -> Result<(SweepResult, BTreeMap<usize, NetworkGraph>)> {
    if bounds.s_max < 1 || bounds.c_max < 1 {
        return Err(Error::InvalidConfig("sweep bounds must be >= 1".into()));
    }
    let mut locations = Vec::new();
    let mut models = BTreeMap::new();
    for loc in 0..base.partition_points.len() {
        let j = loc + 1;
        let feature = base.shape_after(base.partition_points[loc], 1)?;
        let mut combos = Vec::new();
        let mut best: Option<(ComboRecord, NetworkGraph)> = None;
        for c_prime in 1..=bounds.c_max.min(feature.c) {
            for s in 1..=bounds.s_max {
                let cfg = BottleneckConfig::new(loc, s, c_prime, bounds.quality);
                let mut cfg_train = train_cfg.clone();
                cfg_train.seed = train_cfg
                    .seed
                    .wrapping_mul(0x0100_0000_01b3)
                    .wrapping_add((j as u64) << 32 | (s as u64) << 16 | c_prime as u64);
                let (mut model, report) =
                    train_bottleneck_model(base, &cfg, dataset, TrainMode::Aware, &cfg_train)?;
                let d = crate::bottleneck::measure_feature_size(&mut model, dataset, 32)? as u64;
                let rec = ComboRecord {
                    s,
                    c_prime,
                    quality: bounds.quality,
                    accuracy: report.accuracy,
                    d_bytes: d,
                };
                combos.push(rec);
                if rec.accuracy >= accuracy_floor
                    && best.as_ref().map_or(true, |(b, _)| better_combo(&rec, b))
                {
                    best = Some((rec, model));
                }
            }
        }
        let feasible = best.is_some();
        if let Some((rec, model)) = best {
            models.insert(j, model);
            locations.push(LocationResult {
                j,
                feasible,
                best: Some(rec),
                combos,
            });
        } else {
            locations.push(LocationResult {
                j,
                feasible,
                best: None,
                combos,
            });
        }
    }
    if models.is_empty() {
        return Err(Error::AllInfeasible);
    }
    Ok((
        SweepResult {
            accuracy_floor,
            bounds,
            locations,
        },
        models,
    ))
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub j: usize,
    pub d_bytes: u64,
    pub tm_ms: f64,
    pub pm_mw: f64,
    pub tc_ms: f64,
    pub tu_ms: f64,
    /// TM + TU + TC.
    pub latency_ms: f64,
    /// TM*PM + TU*PU, in microjoules (mW * ms).
    pub energy_uj: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub target: PlanTarget,
    pub network: String,
    pub k_mobile: f64,
    pub k_cloud: f64,
    pub chosen_j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_combo: Option<ComboRecord>,
    pub objective: f64,
    pub rows: Vec<PlanRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobile_only: Option<PlanRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_only: Option<PlanRow>,
}

fn plan_row(row: &CostRow, pu_mw: f64) -> PlanRow {
    PlanRow {
        j: row.j,
        d_bytes: row.d_bytes,
        tm_ms: row.tm_ms,
        pm_mw: row.pm_mw,
        tc_ms: row.tc_ms,
        tu_ms: row.tu_ms,
        latency_ms: row.tm_ms + row.tu_ms + row.tc_ms,
        energy_uj: row.tm_ms * row.pm_mw + row.tu_ms * pu_mw,
    }
}

fn objective_of(row: &PlanRow, target: PlanTarget) -> f64 {
    match target {
        PlanTarget::Latency => row.latency_ms,
        PlanTarget::Energy => row.energy_uj,
    }
}

/// Selection phase: argmin of the target objective over the feasible
/// partitions. Ties break to smaller j, then smaller D.
pub fn select(
    cost: &CostProfile,
    target: PlanTarget,
    combos: Option<&BTreeMap<usize, ComboRecord>>,
) -> Result<PlanResult> {
    if cost.rows.is_empty() {
        return Err(Error::AllInfeasible);
    }
    let pu = uplink_power_mw(&cost.network);
    let rows: Vec<PlanRow> = cost.rows.iter().map(|r| plan_row(r, pu)).collect();
    let mut chosen = &rows[0];
    for row in &rows[1..] {
        let (a, b) = (objective_of(row, target), objective_of(chosen, target));
        let wins = a < b
            || (a == b && row.j < chosen.j)
            || (a == b && row.j == chosen.j && row.d_bytes < chosen.d_bytes);
        if wins {
            chosen = row;
        }
    }
    Ok(PlanResult {
        target,
        network: cost.network.name.clone(),
        k_mobile: cost.k_mobile,
        k_cloud: cost.k_cloud,
        chosen_j: chosen.j,
        chosen_combo: combos.and_then(|m| m.get(&chosen.j).copied()),
        objective: objective_of(chosen, target),
        rows: rows.clone(),
        mobile_only: cost.mobile_only.as_ref().map(|r| plan_row(r, pu)),
        cloud_only: cost.cloud_only.as_ref().map(|r| plan_row(r, pu)),
    })
}

/// Re-run profiling + selection only (training artifacts untouched).
pub fn replan(
    doc: &crate::profile::ProfileDoc,
    network: &str,
    k_mobile: f64,
    k_cloud: f64,
    target: PlanTarget,
    d_override: &BTreeMap<usize, u64>,
) -> Result<PlanResult> {
    let cost = crate::profile::measure_simulated(doc, network, k_mobile, k_cloud, d_override)?;
    select(&cost, target, None)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Fixed-width table: one column per partition, rows for offloaded data,
/// latency, and energy, plus sentinel lines when present.
pub fn render_report(plan: &PlanResult) -> String {
    let mut out = String::new();
    let label_w = 20;
    let col_w = 9;
    let _ = writeln!(
        out,
        "plan: network={} target={:?} K_mobile={} K_cloud={} -> partition {}",
        plan.network, plan.target, plan.k_mobile, plan.k_cloud, plan.chosen_j
    );
    let _ = write!(out, "{:<label_w$}", "Layer");
    for row in &plan.rows {
        let _ = write!(out, "{:>col_w$}", format!("P{}", row.j));
    }
    let _ = writeln!(out);
    let mut line = |name: &str, f: &dyn Fn(&PlanRow) -> String| {
        let _ = write!(out, "{:<label_w$}", name);
        for row in &plan.rows {
            let _ = write!(out, "{:>col_w$}", f(row));
        }
        let _ = writeln!(out);
    };
    line("Offloaded Data (B)", &|r| r.d_bytes.to_string());
    line("Latency (ms)", &|r| format!("{:.3}", r.latency_ms));
    line("Energy (uJ)", &|r| format!("{:.1}", r.energy_uj));
    if let Some(m) = &plan.mobile_only {
        let _ = writeln!(
            out,
            "mobile-only: latency {:.3} ms, energy {:.1} uJ",
            m.latency_ms, m.energy_uj
        );
    }
    if let Some(c) = &plan.cloud_only {
        let _ = writeln!(
            out,
            "cloud-only:  latency {:.3} ms, energy {:.1} uJ, offloaded {} B",
            c.latency_ms, c.energy_uj, c.d_bytes
        );
    }
    out
}

/// CSV rows mirroring the report table, sentinels included.
pub fn render_csv(plan: &PlanResult) -> String {
    let mut out = String::from("partition,d_bytes,tm_ms,pm_mw,tc_ms,tu_ms,latency_ms,energy_uj\n");
    let mut push = |name: &str, r: &PlanRow| {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            name, r.d_bytes, r.tm_ms, r.pm_mw, r.tc_ms, r.tu_ms, r.latency_ms, r.energy_uj
        );
    };
    for row in &plan.rows {
        push(&format!("P{}", row.j), row);
    }
    if let Some(m) = &plan.mobile_only {
        push("mobile-only", m);
    }
    if let Some(c) = &plan.cloud_only {
        push("cloud-only", c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{measure_simulated, paper_profile, WirelessProfile};

    fn paper_cost(network: &str, k_cloud: f64) -> CostProfile {
        measure_simulated(&paper_profile(), network, 1.0, k_cloud, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn paper_data_selects_first_partition_everywhere() {
        for network in ["3g", "4g", "wifi"] {
            for target in [PlanTarget::Latency, PlanTarget::Energy] {
                let plan = select(&paper_cost(network, 1.0), target, None).unwrap();
                assert_eq!(plan.chosen_j, 1, "{network} {target:?}");
            }
        }
    }

    #[test]
    fn objectives_match_hand_computation() {
        let plan = select(&paper_cost("3g", 1.0), PlanTarget::Latency, None).unwrap();
        let row = &plan.rows[0];
        assert_eq!(row.latency_ms, row.tm_ms + row.tu_ms + row.tc_ms);
        let pu = 868.98 * 1.1 + 817.88;
        assert_eq!(row.energy_uj, row.tm_ms * row.pm_mw + row.tu_ms * pu);
    }

    #[test]
    fn equal_costs_tie_to_smallest_j() {
        let net = WirelessProfile {
            name: "flat".into(),
            t_u_mbps: 10.0,
            alpha_u: 1.0,
            beta: 1.0,
        };
        let rows = (1..=4)
            .map(|j| CostRow {
                j,
                tm_ms: 1.0,
                pm_mw: 100.0,
                tc_ms: 1.0,
                tu_ms: 1.0,
                d_bytes: 100,
            })
            .collect();
        let cost = CostProfile {
            rows,
            network: net,
            k_mobile: 1.0,
            k_cloud: 1.0,
            mobile_only: None,
            cloud_only: None,
        };
        let plan = select(&cost, PlanTarget::Latency, None).unwrap();
        assert_eq!(plan.chosen_j, 1);
    }

    #[test]
    fn argmin_invariant_under_common_scaling() {
        let base = paper_cost("4g", 3.0);
        let scaled = CostProfile {
            rows: base
                .rows
                .iter()
                .map(|r| CostRow {
                    tm_ms: 7.0 * r.tm_ms,
                    tc_ms: 7.0 * r.tc_ms,
                    tu_ms: 7.0 * r.tu_ms,
                    ..r.clone()
                })
                .collect(),
            ..base.clone()
        };
        let a = select(&base, PlanTarget::Latency, None).unwrap();
        let b = select(&scaled, PlanTarget::Latency, None).unwrap();
        assert_eq!(a.chosen_j, b.chosen_j);
    }

    #[test]
    fn shrinking_d_weakly_improves_rank() {
        for target in [PlanTarget::Latency, PlanTarget::Energy] {
            let base = paper_cost("3g", 1.0);
            let before = select(&base, target, None).unwrap();
            // shrink D_5 drastically
            let mut overrides = BTreeMap::new();
            overrides.insert(5usize, 1u64);
            let cost =
                measure_simulated(&paper_profile(), "3g", 1.0, 1.0, &overrides).unwrap();
            let after = select(&cost, target, None).unwrap();
            let rank = |plan: &PlanResult, j: usize| {
                let obj = objective_of(
                    plan.rows.iter().find(|r| r.j == j).unwrap(),
                    target,
                );
                plan.rows
                    .iter()
                    .filter(|r| objective_of(r, target) < obj)
                    .count()
            };
            assert!(rank(&after, 5) <= rank(&before, 5));
        }
    }

    #[test]
    fn replan_is_deterministic_and_load_sensitive() {
        let doc = paper_profile();
        let none = BTreeMap::new();
        let a = replan(&doc, "3g", 1.0, 2.0, PlanTarget::Latency, &none).unwrap();
        let b = replan(&doc, "3g", 1.0, 2.0, PlanTarget::Latency, &none).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        // huge cloud load pushes the cut deeper into the network
        let hot = replan(&doc, "3g", 1.0, 500.0, PlanTarget::Latency, &none).unwrap();
        assert!(hot.chosen_j > a.chosen_j);
    }

    #[test]
    fn k_cloud_sweep_monotone_choice() {
        let doc = paper_profile();
        let none = BTreeMap::new();
        let mut prev = 0usize;
        for k in 1..=100 {
            let plan = replan(&doc, "3g", 1.0, k as f64, PlanTarget::Latency, &none).unwrap();
            assert!(plan.chosen_j >= prev, "K={k}: {} < {prev}", plan.chosen_j);
            prev = plan.chosen_j;
        }
        assert!(prev > 1);
    }

    #[test]
    fn infinite_bandwidth_leaves_compute_objective() {
        let mut doc = paper_profile();
        doc.networks[0].t_u_mbps = 1e12;
        let plan = replan(&doc, "3g", 1.0, 1.0, PlanTarget::Latency, &BTreeMap::new()).unwrap();
        for row in &plan.rows {
            assert!(row.tu_ms < 1e-6);
            assert!((row.latency_ms - (row.tm_ms + row.tc_ms)).abs() < 1e-6);
        }
        assert_eq!(plan.chosen_j, 1);
    }

    #[test]
    fn pick_min_bits_tie_goes_to_accuracy() {
        let combos = vec![
            ComboRecord { s: 1, c_prime: 1, quality: 20, accuracy: 0.90, d_bytes: 100 },
            ComboRecord { s: 2, c_prime: 1, quality: 20, accuracy: 0.95, d_bytes: 100 },
            ComboRecord { s: 2, c_prime: 2, quality: 20, accuracy: 0.99, d_bytes: 150 },
        ];
        let best = pick_min_bits(&combos, 0.5).unwrap();
        assert_eq!((best.s, best.accuracy), (2, 0.95));
        assert!(pick_min_bits(&combos, 1.5).is_none());
    }

    #[test]
    fn report_renders_all_partitions() {
        let plan = select(&paper_cost("wifi", 1.0), PlanTarget::Energy, None).unwrap();
        let text = render_report(&plan);
        assert!(text.contains("P1") && text.contains("P16"));
        assert!(text.contains("mobile-only"));
        let csv = render_csv(&plan);
        assert_eq!(csv.lines().count(), 1 + 16 + 2);
    }
}
