//! Split-inference runtime: the cloud-side server, the mobile-side client,
//! and the load monitor that drives run-time repartitioning.

use crate::codec::{decode_feature, encode_feature, EncodedFeature};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layers::Layer;
use crate::protocol::{error_code, read_message, write_message, Message};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Default request timeout; `BOTTLENET_TIMEOUT_MS` overrides.
pub const DEFAULT_TIMEOUT_MS: u64 = 5000;

pub fn configured_timeout() -> Duration {
    let ms = std::env::var("BOTTLENET_TIMEOUT_MS")
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or(DEFAULT_TIMEOUT_MS);
    Duration::from_millis(ms)
}

// ---------------------------------------------------------------------------
// Split execution of a bottlenecked graph
// ---------------------------------------------------------------------------

fn codec_params_of(graph: &NetworkGraph, codec_idx: usize) -> Result<crate::codec::CodecParams> {
    match &graph.layers[codec_idx] {
        Layer::Codec(c) => Ok(c.params),
        _ => Err(Error::InvalidConfig("layer at codec index is not a codec".into())),
    }
}

/// Mobile side: layers up to the codec, then the encoder.
pub fn mobile_encode(graph: &mut NetworkGraph, input: &Tensor) -> Result<EncodedFeature> {
    let codec_idx = graph
        .codec_index()
        .ok_or_else(|| Error::InvalidConfig("graph has no codec node".into()))?;
    let params = codec_params_of(graph, codec_idx)?;
    let act = if codec_idx == 0 {
        input.clone()
    } else {
        graph.forward(input, Some(codec_idx - 1))?
    };
    encode_feature(&act, params)
}

/// Cloud side: decoder, restoration unit, and the remaining layers.
pub fn cloud_infer(graph: &mut NetworkGraph, enc: &EncodedFeature) -> Result<Tensor> {
    let codec_idx = graph
        .codec_index()
        .ok_or_else(|| Error::InvalidConfig("graph has no codec node".into()))?;
    let act = decode_feature(enc)?;
    graph.forward_from(&act, codec_idx + 1)
}

/// Final logits as the f32 values the wire carries.
pub fn logits_f32(t: &Tensor) -> Vec<f32> {
    t.data.iter().map(|&v| v as f32).collect()
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

pub struct ServerConfig {
    /// Fixed K_cloud to report; `None` reports the live in-flight count.
    pub load_stub: Option<f32>,
}

pub struct ServerHandle {
    pub port: u16,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock the accept loop
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

type SharedModels = Arc<BTreeMap<u16, Mutex<NetworkGraph>>>;

/// Serve per-partition cloud halves on `addr`. Binds immediately and returns
/// a handle; port 0 picks an ephemeral port.
pub fn serve(
    models: BTreeMap<u16, NetworkGraph>,
    addr: impl ToSocketAddrs,
    config: ServerConfig,
) -> Result<ServerHandle> {
    for (id, graph) in &models {
        if graph.codec_index().is_none() {
            return Err(Error::MissingPartition(*id));
        }
    }
    let listener = TcpListener::bind(addr)?;
    let port = listener.local_addr()?.port();
    let stop = Arc::new(AtomicBool::new(false));
    let shared: SharedModels = Arc::new(models.into_iter().map(|(k, v)| (k, Mutex::new(v))).collect());
    let inflight = Arc::new(AtomicU32::new(0));
    let load_stub = config.load_stub;
    let stop2 = stop.clone();
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let models = shared.clone();
            let inflight = inflight.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &models, &inflight, load_stub);
            });
        }
    });
    Ok(ServerHandle {
        port,
        stop,
        join: Some(join),
    })
}

fn handle_connection(
    mut stream: TcpStream,
    models: &SharedModels,
    inflight: &AtomicU32,
    load_stub: Option<f32>,
) -> Result<()> {
    stream.set_read_timeout(Some(configured_timeout()))?;
    stream.set_write_timeout(Some(configured_timeout()))?;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(Error::Io(_)) => return Ok(()), // peer gone or idle timeout
            Err(_) => {
                // stream may be desynchronized; answer once and drop it
                let _ = write_message(
                    &mut stream,
                    &Message::Error {
                        code: error_code::BAD_REQUEST,
                        message: "malformed frame".into(),
                    },
                );
                return Ok(());
            }
        };
        let reply = match msg {
            Message::InferReq {
                partition_id,
                feature,
            } => {
                inflight.fetch_add(1, Ordering::SeqCst);
                let reply = infer_reply(models, partition_id, &feature);
                inflight.fetch_sub(1, Ordering::SeqCst);
                reply
            }
            Message::LoadQuery => {
                let depth = inflight.load(Ordering::SeqCst);
                Message::LoadReport {
                    k_cloud: load_stub.unwrap_or(1.0 + depth as f32),
                    queue_depth: depth,
                }
            }
            _ => Message::Error {
                code: error_code::BAD_REQUEST,
                message: "unexpected message type".into(),
            },
        };
        write_message(&mut stream, &reply)?;
    }
}

fn infer_reply(models: &SharedModels, partition_id: u16, feature: &[u8]) -> Message {
    let Some(model) = models.get(&partition_id) else {
        return Message::Error {
            code: error_code::NOT_FOUND,
            message: format!("unknown partition {partition_id}"),
        };
    };
    let enc = match EncodedFeature::from_bytes(feature) {
        Ok(e) => e,
        Err(e) => {
            return Message::Error {
                code: error_code::BAD_REQUEST,
                message: format!("bad encoded feature: {e}"),
            }
        }
    };
    let mut graph = model.lock().expect("model lock poisoned");
    match cloud_infer(&mut graph, &enc) {
        Ok(logits) => Message::InferResp {
            logits: logits_f32(&logits),
        },
        Err(e) => Message::Error {
            code: error_code::INTERNAL,
            message: e.to_string(),
        },
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub logits: Vec<f32>,
    /// Mobile compute + encode time.
    pub tm_ms: f64,
    /// Send-to-receive round trip, including cloud compute.
    pub rtt_ms: f64,
    pub sent_bytes: usize,
}

pub struct SplitClient {
    stream: TcpStream,
}

impl SplitClient {
    /// Connect with the configured timeout. Connection failures are reported
    /// distinctly from mid-stream failures.
    pub fn connect(addr: &str) -> Result<Self> {
        let timeout = configured_timeout();
        let sockaddr = addr
            .to_socket_addrs()
            .map_err(|e| Error::Connect(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::Connect(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sockaddr, timeout)
            .map_err(|e| Error::Connect(format!("{addr}: {e}")))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(SplitClient { stream })
    }

    /// Run the mobile half on `input`, ship the encoded feature, and return
    /// the server's logits with timing measurements.
    pub fn infer(
        &mut self,
        mobile: &mut NetworkGraph,
        input: &Tensor,
        partition_id: u16,
    ) -> Result<InferOutcome> {
        let t0 = Instant::now();
        let enc = mobile_encode(mobile, input)?;
        let feature = enc.to_bytes();
        let tm_ms = t0.elapsed().as_secs_f64() * 1e3;
        let sent_bytes = feature.len();
        let t1 = Instant::now();
        write_message(
            &mut self.stream,
            &Message::InferReq {
                partition_id,
                feature,
            },
        )?;
        let reply = read_message(&mut self.stream)?;
        let rtt_ms = t1.elapsed().as_secs_f64() * 1e3;
        match reply {
            Message::InferResp { logits } => Ok(InferOutcome {
                logits,
                tm_ms,
                rtt_ms,
                sent_bytes,
            }),
            Message::Error { code, message } => Err(Error::Remote { code, message }),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn query_load(&mut self) -> Result<(f32, u32)> {
        write_message(&mut self.stream, &Message::LoadQuery)?;
        match read_message(&mut self.stream)? {
            Message::LoadReport {
                k_cloud,
                queue_depth,
            } => Ok((k_cloud, queue_depth)),
            Message::Error { code, message } => Err(Error::Remote { code, message }),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Load monitor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub period: Duration,
    /// Relative band around the last planned K; samples inside it do not
    /// trigger a replan.
    pub hysteresis: f64,
    /// Consecutive missed pings before the plan is marked stale.
    pub max_missed: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            period: Duration::from_millis(500),
            hysteresis: 0.25,
            max_missed: 3,
        }
    }
}

/// Pure monitor state machine: feed it load samples (or misses) and it
/// decides when to replan and swap the active partition.
#[derive(Debug)]
pub struct MonitorState {
    cfg: MonitorConfig,
    planned_k: f64,
    missed: u32,
    pub stale: bool,
}

impl MonitorState {
    pub fn new(cfg: MonitorConfig, initial_k: f64) -> Self {
        MonitorState {
            cfg,
            planned_k: initial_k,
            missed: 0,
            stale: false,
        }
    }

    /// A load sample arrived. Returns the new partition id when the sample
    /// left the hysteresis band and the replan chose a different partition.
    pub fn on_sample(
        &mut self,
        k: f64,
        active_j: usize,
        replan: impl FnOnce(f64) -> Result<usize>,
    ) -> Result<Option<usize>> {
        self.missed = 0;
        self.stale = false;
        let band = self.cfg.hysteresis * self.planned_k.max(1.0);
        if (k - self.planned_k).abs() <= band {
            return Ok(None);
        }
        let new_j = replan(k)?;
        self.planned_k = k;
        Ok(if new_j != active_j { Some(new_j) } else { None })
    }

    /// A ping timed out. Returns true once the plan has gone stale.
    pub fn on_missed(&mut self) -> bool {
        self.missed += 1;
        if self.missed >= self.cfg.max_missed {
            self.stale = true;
        }
        self.stale
    }
}

pub struct MonitorHandle {
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
    /// Swapped atomically; in-flight inferences keep the id they started with.
    pub active_partition: Arc<AtomicU16>,
    pub stale: Arc<AtomicBool>,
}

impl MonitorHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Periodically ping the server for its load and swap the active partition
/// when the replanner picks a different one.
pub fn run_load_monitor(
    addr: String,
    cfg: MonitorConfig,
    initial_k: f64,
    initial_partition: u16,
    replan: impl Fn(f64) -> Result<usize> + Send + 'static,
) -> MonitorHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let active = Arc::new(AtomicU16::new(initial_partition));
    let stale = Arc::new(AtomicBool::new(false));
    let (stop2, active2, stale2) = (stop.clone(), active.clone(), stale.clone());
    let period = cfg.period;
    let join = std::thread::spawn(move || {
        let mut state = MonitorState::new(cfg, initial_k);
        let mut client: Option<SplitClient> = None;
        while !stop2.load(Ordering::SeqCst) {
            let sample = match &mut client {
                Some(c) => c.query_load().ok(),
                None => None,
            };
            let sample = match sample {
                Some(s) => Some(s),
                None => {
                    client = SplitClient::connect(&addr).ok();
                    client.as_mut().and_then(|c| c.query_load().ok())
                }
            };
            match sample {
                Some((k, _)) => {
                    let cur = active2.load(Ordering::SeqCst);
                    if let Ok(Some(new_j)) = state.on_sample(k as f64, cur as usize, &replan) {
                        active2.store(new_j as u16, Ordering::SeqCst);
                    }
                    stale2.store(state.stale, Ordering::SeqCst);
                }
                None => {
                    client = None;
                    state.on_missed();
                    stale2.store(state.stale, Ordering::SeqCst);
                }
            }
            std::thread::sleep(period);
        }
    });
    MonitorHandle {
        stop,
        join: Some(join),
        active_partition: active,
        stale,
    }
}
