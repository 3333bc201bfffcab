//! Campaign runner: generates a randomized request stream from the
//! device API and delivers the identical stream to every target (twin
//! endpoints and the reference device) at a configured virtual rate, with
//! timer ticks interleaved on their own schedule.
//!
//! Requests are paired across targets by sequence number. The whole run
//! is deterministic under a fixed seed because time is virtual: a
//! two-hour campaign at 100 requests per minute replays in seconds.

pub mod genreq;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mldt::TraceRecord;
use crate::time::{VirtualTime, MS_PER_MINUTE};
use crate::wire::{DeviceRequest, DeviceResponse};
use genreq::{GenError, GeneratorConfig, RequestGenerator, StateHints};

/// One endpoint receiving the campaign stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    /// Full URL accepting POSTed device requests, e.g.
    /// `http://127.0.0.1:8080/dts/dt-ab12/requests` or
    /// `http://127.0.0.1:8090/device/requests`.
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub seed: u64,
    /// Number of generated device requests (ticks come on top).
    pub request_count: u64,
    /// Device requests per virtual minute.
    pub rate_per_minute: u64,
    /// Campaign start in virtual time.
    pub start: VirtualTime,
    /// Interval of interleaved `tick` requests; 0 disables ticks.
    pub tick_interval_ms: u64,
    pub generator: GeneratorConfig,
    pub targets: Vec<TargetSpec>,
    pub api_key: Option<String>,
    /// Target whose reported state feeds generation hints, if any.
    pub hint_target: Option<String>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 42,
            request_count: 12_000,
            rate_per_minute: 100,
            start: VirtualTime::parse("2026-01-05T08:00").unwrap(),
            tick_interval_ms: 30_000,
            generator: GeneratorConfig::default(),
            targets: Vec::new(),
            api_key: None,
            hint_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CampaignError {
    #[error("campaign needs at least one target")]
    NoTargets,
    #[error("rate must be positive")]
    ZeroRate,
    #[error(transparent)]
    Generator(#[from] GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Device,
    Tick,
}

/// The deterministic event schedule: device requests exactly at the
/// configured per-minute rate, ticks on their own grid. At equal
/// timestamps device requests come first.
pub fn schedule(cfg: &CampaignConfig) -> Vec<(VirtualTime, EventKind)> {
    let mut events = Vec::new();
    for k in 0..cfg.request_count {
        let offset = k * MS_PER_MINUTE / cfg.rate_per_minute;
        events.push((VirtualTime(cfg.start.0 + offset), EventKind::Device));
    }
    if cfg.tick_interval_ms > 0 {
        let end = cfg.start.0 + cfg.request_count * MS_PER_MINUTE / cfg.rate_per_minute;
        let mut t = cfg.start.0 + cfg.tick_interval_ms;
        while t <= end {
            events.push((VirtualTime(t), EventKind::Tick));
            t += cfg.tick_interval_ms;
        }
    }
    // Stable by construction: device events are already sorted and ticks
    // are merged behind same-instant device requests.
    events.sort_by_key(|(t, kind)| (t.0, matches!(kind, EventKind::Tick)));
    events
}

/// What one target answered for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResponse {
    pub http_status: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<DeviceResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One request paired with every target's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub seq: u64,
    pub at: VirtualTime,
    pub request: DeviceRequest,
    pub responses: BTreeMap<String, TargetResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub records: Vec<PairedRecord>,
    /// SHA-256 over the canonical bytes of the request sequence actually
    /// sent to each target; equal digests prove stream equality.
    pub request_digests: BTreeMap<String, String>,
    /// Set when a target became unreachable and the campaign stopped
    /// early with partial results.
    pub aborted: Option<String>,
}

/// Body shape accepted by twin and reference-device request endpoints.
#[derive(Debug, Deserialize)]
struct ResponseEnvelope {
    response: DeviceResponse,
    #[serde(default)]
    state_digest: Option<String>,
}

/// Runs the campaign over HTTP. Each event is sent to all targets
/// concurrently and awaited before the next event, so every target sees
/// the same stream in the same order.
pub async fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    if cfg.targets.is_empty() {
        return Err(CampaignError::NoTargets);
    }
    if cfg.rate_per_minute == 0 {
        return Err(CampaignError::ZeroRate);
    }
    // Ticks draw from the same api; the generator only needs the device
    // operations.
    let mut generator = RequestGenerator::new(
        cfg.seed,
        &medido_api_for_generation()?,
        cfg.generator.clone(),
    )?;

    let client = reqwest::Client::new();
    let events = schedule(cfg);
    let mut records = Vec::with_capacity(events.len());
    let mut hashers: BTreeMap<String, Sha256> = cfg
        .targets
        .iter()
        .map(|t| (t.name.clone(), Sha256::new()))
        .collect();
    let mut hints = StateHints::default();
    let mut aborted = None;

    for (i, (at, kind)) in events.iter().enumerate() {
        let seq = i as u64 + 1;
        let request = match kind {
            EventKind::Device => generator.generate(seq, *at, &hints),
            EventKind::Tick => DeviceRequest::tick(seq, *at),
        };
        let body = serde_json::to_vec(&request).expect("request serializes");

        let sends = cfg.targets.iter().map(|t| {
            let mut call = client
                .post(&t.url)
                .header("content-type", "application/json")
                .body(body.clone());
            if let Some(key) = &cfg.api_key {
                call = call.header("X-API-Key", key);
            }
            async move { (t.name.clone(), call.send().await) }
        });
        let outcomes = futures_join_all(sends).await;

        let mut responses = BTreeMap::new();
        for (name, outcome) in outcomes {
            hashers.get_mut(&name).unwrap().update(&body);
            match outcome {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let parsed: Option<ResponseEnvelope> = resp.json().await.ok();
                    responses.insert(
                        name,
                        TargetResponse {
                            http_status: status,
                            response: parsed.as_ref().map(|e| e.response.clone()),
                            state_digest: parsed.and_then(|e| e.state_digest),
                            error: None,
                        },
                    );
                }
                Err(e) => {
                    // Transport failure: abort with partial results.
                    responses.insert(
                        name.clone(),
                        TargetResponse {
                            http_status: 0,
                            response: None,
                            state_digest: None,
                            error: Some(e.to_string()),
                        },
                    );
                    aborted = Some(format!("target '{name}' unreachable: {e}"));
                }
            }
        }

        if let Some(hint_target) = &cfg.hint_target {
            if let Some(tr) = responses.get(hint_target) {
                hints.last_state = tr.response.as_ref().and_then(|r| r.state.clone());
            }
        }

        records.push(PairedRecord {
            seq,
            at: *at,
            request,
            responses,
        });
        if aborted.is_some() {
            break;
        }
    }

    let request_digests = hashers
        .into_iter()
        .map(|(name, h)| (name, hex::encode(h.finalize())))
        .collect();

    Ok(CampaignResult {
        records,
        request_digests,
        aborted,
    })
}

// The generator works from any api; campaigns built through the CLI and
// experiments use the dispenser model's api section.
fn medido_api_for_generation() -> Result<Vec<crate::model::EndpointDef>, GenError> {
    let src = include_str!("../../examples/medido.twinmodel");
    let model = crate::model::parse_model(src).expect("bundled model parses");
    Ok(model.api)
}

async fn futures_join_all<F, T>(futs: impl IntoIterator<Item = F>) -> Vec<T>
where
    F: std::future::Future<Output = T>,
{
    let mut handles = Vec::new();
    for f in futs {
        handles.push(f);
    }
    let mut out = Vec::with_capacity(handles.len());
    for f in handles {
        out.push(f.await);
    }
    out
}

/// Extracts the (twin, reference) response pairs present on both sides.
pub fn response_pairs(
    records: &[PairedRecord],
    twin: &str,
    reference: &str,
) -> Vec<(DeviceResponse, DeviceResponse)> {
    records
        .iter()
        .filter_map(|r| {
            let t = r.responses.get(twin)?.response.clone()?;
            let g = r.responses.get(reference)?.response.clone()?;
            Some((t, g))
        })
        .collect()
}

/// Builds ML training records from one target's response stream.
pub fn extract_trace(records: &[PairedRecord], target: &str, campaign: &str) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    let mut last = None;
    for r in records {
        let Some(resp) = r.responses.get(target).and_then(|t| t.response.as_ref()) else {
            continue;
        };
        let delta = match last {
            Some(prev: u64) => r.at.0.saturating_sub(prev),
            None => 0,
        };
        last = Some(r.at.0);
        out.push(TraceRecord {
            campaign: campaign.to_string(),
            seq: r.seq,
            operation: r.request.operation.clone(),
            payload: r.request.payload.clone(),
            delta_ms: delta,
            label: resp.status.as_str().to_string(),
        });
    }
    out
}

/// Writes paired records as JSON lines.
pub fn save_paired(path: &Path, result: &CampaignResult) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &result.records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn load_paired(path: &Path) -> std::io::Result<Vec<PairedRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// Writes trace records as JSON lines (the ML training input format).
pub fn save_trace(path: &Path, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn load_trace(path: &Path) -> std::io::Result<Vec<TraceRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_the_rate_exactly_per_virtual_minute() {
        let cfg = CampaignConfig {
            request_count: 730,
            rate_per_minute: 73,
            tick_interval_ms: 17_000,
            ..CampaignConfig::default()
        };
        let events = schedule(&cfg);
        let mut per_minute: BTreeMap<u64, u64> = BTreeMap::new();
        for (t, kind) in &events {
            if *kind == EventKind::Device {
                *per_minute.entry((t.0 - cfg.start.0) / MS_PER_MINUTE).or_default() += 1;
            }
        }
        assert_eq!(per_minute.len(), 10);
        assert!(per_minute.values().all(|&n| n == 73));
        // Sorted by time.
        assert!(events.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn schedule_interleaves_ticks_after_same_instant_requests() {
        let cfg = CampaignConfig {
            request_count: 100,
            rate_per_minute: 100,
            tick_interval_ms: 600,
            ..CampaignConfig::default()
        };
        let events = schedule(&cfg);
        for pair in events.windows(2) {
            if pair[0].0 == pair[1].0 {
                assert!(
                    !(pair[0].1 == EventKind::Tick && pair[1].1 == EventKind::Device),
                    "tick ordered before a device request at the same instant"
                );
            }
        }
    }
}
