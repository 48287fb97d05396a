//! Per-partition cost records from declarative simulated profiles or from
//! real timed benchmarks, plus the wireless uplink time/power models.

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Wireless model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirelessProfile {
    pub name: String,
    /// Uplink throughput in megabits per second.
    pub t_u_mbps: f64,
    /// Regression coefficient, milliwatts per Mbps.
    pub alpha_u: f64,
    /// Regression intercept, milliwatts.
    pub beta: f64,
}

impl WirelessProfile {
    pub fn validate(&self) -> Result<()> {
        if self.t_u_mbps <= 0.0 || self.alpha_u < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "invalid wireless profile {}",
                self.name
            )));
        }
        Ok(())
    }
}

/// Uplink transfer time in ms: D bytes over t_u Mbps.
pub fn uplink_time_ms(d_bytes: u64, net: &WirelessProfile) -> f64 {
    (d_bytes as f64 * 8.0) / (net.t_u_mbps * 1e6) * 1e3
}

/// Uplink power in mW: `P_u = alpha_u * t_u + beta`.
pub fn uplink_power_mw(net: &WirelessProfile) -> f64 {
    net.alpha_u * net.t_u_mbps + net.beta
}

// ---------------------------------------------------------------------------
// Device profiles (simulated mode)
// ---------------------------------------------------------------------------

/// A per-load-level table `K -> value`. Declared levels are used verbatim;
/// an undeclared K falls back to the linear model `K * value_at_1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadTable(pub BTreeMap<String, f64>);

impl LoadTable {
    pub fn constant(v: f64) -> Self {
        let mut m = BTreeMap::new();
        m.insert("1".to_string(), v);
        LoadTable(m)
    }

    pub fn lookup(&self, k: f64) -> Result<f64> {
        for (key, &v) in &self.0 {
            let kv: f64 = key
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad load level key {key}")))?;
            if kv == k {
                return Ok(v);
            }
        }
        let base = self.0.get("1").ok_or_else(|| {
            Error::InvalidConfig(format!("no entry for load {k} and no K=1 baseline"))
        })?;
        if k < 1.0 {
            return Err(Error::InvalidConfig(format!("load level {k} below 1")));
        }
        Ok(k * base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTables {
    pub j: usize,
    pub t_mobile_ms: LoadTable,
    pub p_mobile_mw: LoadTable,
    pub t_cloud_ms: LoadTable,
    /// Compressed feature size; bundled profiles carry reference values,
    /// sweeps override with measured ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub partitions: Vec<PartitionTables>,
    /// Sentinel: whole network on the mobile device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobile_only: Option<SentinelMobile>,
    /// Sentinel: whole network in the cloud (input itself is uploaded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_only: Option<SentinelCloud>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentinelMobile {
    pub t_mobile_ms: LoadTable,
    pub p_mobile_mw: LoadTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentinelCloud {
    pub d_bytes: u64,
    pub t_cloud_ms: LoadTable,
}

/// The on-disk profile document: device tables plus named networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub device: DeviceProfile,
    pub networks: Vec<WirelessProfile>,
}

impl ProfileDoc {
    pub fn from_json(json: &str) -> Result<Self> {
        let doc: ProfileDoc = serde_json::from_str(json)?;
        for net in &doc.networks {
            net.validate()?;
        }
        Ok(doc)
    }

    pub fn network(&self, name: &str) -> Result<&WirelessProfile> {
        self.networks
            .iter()
            .find(|n| n.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown network {name}")))
    }
}

/// Profile encoding the reference wireless parameters and offloaded-data
/// sizes, with a documented stand-in device model (mobile compute grows
/// 1 ms per extra block at 1000 mW; cloud compute shrinks toward deep cuts).
pub fn paper_profile() -> ProfileDoc {
    ProfileDoc::from_json(include_str!("../profiles/paper.json"))
        .expect("bundled profile must parse")
}

// ---------------------------------------------------------------------------
// Cost profiles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub j: usize,
    pub tm_ms: f64,
    pub pm_mw: f64,
    pub tc_ms: f64,
    pub tu_ms: f64,
    pub d_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub rows: Vec<CostRow>,
    pub network: WirelessProfile,
    pub k_mobile: f64,
    pub k_cloud: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobile_only: Option<CostRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_only: Option<CostRow>,
}

/// Read per-partition costs from a simulated device profile.
///
/// `d_override` supplies measured feature sizes per j; partitions without an
/// override fall back to the profile's d_bytes.
pub fn measure_simulated(
    doc: &ProfileDoc,
    network: &str,
    k_mobile: f64,
    k_cloud: f64,
    d_override: &BTreeMap<usize, u64>,
) -> Result<CostProfile> {
    let net = doc.network(network)?.clone();
    let mut rows = Vec::with_capacity(doc.device.partitions.len());
    let mut missing = Vec::new();
    for part in &doc.device.partitions {
        let d = match d_override.get(&part.j).copied().or(part.d_bytes) {
            Some(d) => d,
            None => {
                missing.push(part.j);
                continue;
            }
        };
        rows.push(CostRow {
            j: part.j,
            tm_ms: part.t_mobile_ms.lookup(k_mobile)?,
            pm_mw: part.p_mobile_mw.lookup(k_mobile)?,
            tc_ms: part.t_cloud_ms.lookup(k_cloud)?,
            tu_ms: uplink_time_ms(d, &net),
            d_bytes: d,
        });
    }
    if !missing.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no compressed feature size for partitions {missing:?}; run a sweep or add d_bytes"
        )));
    }
    let mobile_only = doc.device.mobile_only.as_ref().map(|m| {
        Ok::<_, Error>(CostRow {
            j: 0,
            tm_ms: m.t_mobile_ms.lookup(k_mobile)?,
            pm_mw: m.p_mobile_mw.lookup(k_mobile)?,
            tc_ms: 0.0,
            tu_ms: 0.0,
            d_bytes: 0,
        })
    });
    let cloud_only = doc.device.cloud_only.as_ref().map(|c| {
        Ok::<_, Error>(CostRow {
            j: 0,
            tm_ms: 0.0,
            pm_mw: 0.0,
            tc_ms: c.t_cloud_ms.lookup(k_cloud)?,
            tu_ms: uplink_time_ms(c.d_bytes, &net),
            d_bytes: c.d_bytes,
        })
    });
    Ok(CostProfile {
        rows,
        network: net,
        k_mobile,
        k_cloud,
        mobile_only: mobile_only.transpose()?,
        cloud_only: cloud_only.transpose()?,
    })
}

// ---------------------------------------------------------------------------
// Real benchmarks
// ---------------------------------------------------------------------------

/// Timing source; injectable so order statistics are testable.
pub trait Clock {
    /// Run `op` once and return elapsed milliseconds.
    fn time_ms(&mut self, op: &mut dyn FnMut()) -> f64;
}

pub struct WallClock;

impl Clock for WallClock {
    fn time_ms(&mut self, op: &mut dyn FnMut()) -> f64 {
        let start = std::time::Instant::now();
        op();
        start.elapsed().as_secs_f64() * 1e3
    }
}

/// Median of `repetitions` timed runs after `warmup` untimed ones.
pub fn bench_median_ms(
    clock: &mut dyn Clock,
    op: &mut dyn FnMut(),
    warmup: usize,
    repetitions: usize,
) -> Result<f64> {
    if repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
    }
    for _ in 0..warmup {
        op();
    }
    let mut samples: Vec<f64> = (0..repetitions).map(|_| clock.time_ms(op)).collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    Ok(samples[samples.len() / 2])
}

/// Time the mobile and cloud forward slices of trained partitioned models.
///
/// `models` maps partition id to a bottlenecked graph; `pm_mw` stands in for
/// a power sensor. D_j comes from `d_bytes` (median over a calibration set,
/// measured during the sweep).
#[allow(clippy::too_many_arguments)]
pub fn measure_real(
    models: &mut BTreeMap<usize, NetworkGraph>,
    expected: &[usize],
    calibration: &Tensor,
    net: &WirelessProfile,
    d_bytes: &BTreeMap<usize, u64>,
    pm_mw: f64,
    k_mobile: f64,
    k_cloud: f64,
    warmup: usize,
    repetitions: usize,
    clock: &mut dyn Clock,
) -> Result<CostProfile> {
    let missing: Vec<usize> = expected
        .iter()
        .filter(|j| !models.contains_key(j) || !d_bytes.contains_key(j))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "missing trained model or feature size for partitions {missing:?}"
        )));
    }
    let mut rows = Vec::with_capacity(expected.len());
    for &j in expected {
        let graph = models.get_mut(&j).unwrap();
        let codec_idx = graph
            .codec_index()
            .ok_or_else(|| Error::InvalidConfig(format!("model {j} has no codec node")))?;
        let mid = graph.forward(calibration, Some(codec_idx))?;
        let mut g_mobile = graph.clone();
        let tm = bench_median_ms(
            clock,
            &mut || {
                g_mobile.forward(calibration, Some(codec_idx)).unwrap();
            },
            warmup,
            repetitions,
        )?;
        let mut g_cloud = graph.clone();
        let tc = bench_median_ms(
            clock,
            &mut || {
                g_cloud.forward_from(&mid, codec_idx + 1).unwrap();
            },
            warmup,
            repetitions,
        )?;
        let d = d_bytes[&j];
        rows.push(CostRow {
            j,
            tm_ms: tm,
            pm_mw,
            tc_ms: tc,
            tu_ms: uplink_time_ms(d, net),
            d_bytes: d,
        });
    }
    Ok(CostProfile {
        rows,
        network: net.clone(),
        k_mobile,
        k_cloud,
        mobile_only: None,
        cloud_only: None,
    })
}
