//! Protocol endpoint: one session per connection, frames handled strictly in
//! order. Any error is reported with an error message and ends the session.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use super::protocol::{
    read_message, tag, write_message, Entry, Message, StepPayload, ERR_MALFORMED, ERR_SHAPE, ERR_STATE,
    ERR_VERSION, PROTOCOL_VERSION, ROLE_DRIVER,
};
use crate::attention::blend_values;
use crate::error::{Error, Result};
use crate::sampler::step::{ama_layer, guidance_term, match_step};
use crate::sampler::{parse_config, Branch, SessionConfig};
use crate::tensors::frame::RawFrame;
use crate::tensors::TensorGrid;

/// Issues session ids and tracks which sessions are live.
#[derive(Debug)]
pub struct SessionRegistry {
    next_id: AtomicU64,
    active: Mutex<BTreeSet<u64>>,
}

impl Default for SessionRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self {
            next_id: AtomicU64::new(1),
            active: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn open(&self) -> u64 {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.active.lock().unwrap().insert(id);
        id
    }

    pub fn close(&self, id: u64) {
        self.active.lock().unwrap().remove(&id);
    }

    pub fn active(&self) -> Vec<u64> {
        self.active.lock().unwrap().iter().copied().collect()
    }
}

/// Protocol error code for an engine error.
pub fn error_code(err: &Error) -> u8 {
    match err.root() {
        Error::Protocol { code, .. } => *code,
        Error::Shape(_) => ERR_SHAPE,
        _ => ERR_MALFORMED,
    }
}

fn protocol(code: u8, message: impl Into<String>) -> Error {
    Error::Protocol {
        code,
        message: message.into(),
    }
}

/// Engine state of one connected session.
#[derive(Debug, Clone)]
pub struct EngineSession {
    pub id: u64,
    config: SessionConfig,
    stepped: bool,
}

impl EngineSession {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            config: SessionConfig::default(),
            stepped: false,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Replaces the session config; only allowed before the first step.
    pub fn configure(&mut self, text: &str) -> Result<()> {
        if self.stepped {
            return Err(protocol(ERR_STATE, "configure after the first step"));
        }
        self.config = parse_config(text)?.session;
        Ok(())
    }

    pub fn step(&mut self, req: &StepPayload) -> Result<StepPayload> {
        self.stepped = true;
        process_step(&self.config, req)
    }
}

fn grid_of(frame: &RawFrame) -> Result<TensorGrid> {
    frame.to_grid()
}

fn entry(tag: u8, layer: u8, branch: u8, grid: &TensorGrid) -> Result<Entry> {
    Ok(Entry {
        tag,
        layer,
        branch,
        frame: RawFrame::from_grid(grid)?,
    })
}

fn layer_byte(layer: usize) -> Result<u8> {
    u8::try_from(layer).map_err(|_| protocol(ERR_MALFORMED, format!("layer {layer} does not fit the wire format")))
}

fn required<'a>(req: &'a StepPayload, tag: u8, layer: u8, branch: u8, what: &str) -> Result<&'a RawFrame> {
    req.find(tag, layer, branch)
        .ok_or_else(|| protocol(ERR_MALFORMED, format!("missing {what} (layer {layer}, branch {branch})")))
}

/// Engine work for one step request under `config`.
pub fn process_step(config: &SessionConfig, req: &StepPayload) -> Result<StepPayload> {
    let i = req.step_index as usize;
    let t = req.t as usize;
    let ama_on = config.ama_enabled(i);
    let guidance_on = config.guidance_enabled(i);
    let mut out = StepPayload {
        t: req.t,
        step_index: req.step_index,
        entries: Vec::new(),
    };
    if !(ama_on || guidance_on) {
        return Ok(out);
    }

    let mut ref_feats = Vec::new();
    let mut tgt_feats = Vec::new();
    for &layer in &config.descriptor_layers {
        let l = layer_byte(layer)?;
        ref_feats.push(grid_of(required(req, tag::FEAT_REF, l, 0, "reference features")?)?);
        tgt_feats.push(grid_of(required(req, tag::FEAT_TGT, l, 0, "target features")?)?);
    }
    let mut maps: Vec<&Entry> = req.entries.iter().filter(|e| e.tag == tag::CROSS_ATTN).collect();
    maps.sort_by_key(|e| e.layer);
    let maps = maps.iter().map(|e| grid_of(&e.frame)).collect::<Result<Vec<_>>>()?;
    let state = match_step(&ref_feats, &tgt_feats, &maps, config.pca_dim, &config.consistency())?;
    out.entries.push(entry(tag::FLOW, 0, 0, &state.flows.ref_to_target.to_grid())?);
    out.entries.push(entry(tag::MASK, 0, 0, &state.m_prime.to_grid())?);

    if ama_on {
        for &layer in &config.ama_layers {
            let l = layer_byte(layer)?;
            let v_ref = grid_of(required(req, tag::V_REF, l, 0, "reference values")?)?;
            let mut seen = false;
            for branch in Branch::BOTH {
                let b = branch.code();
                let Some(v_tgt) = req.find(tag::V_TGT, l, b) else {
                    continue;
                };
                seen = true;
                let v_tgt = grid_of(v_tgt)?;
                match (req.find(tag::Q_TGT, l, b), req.find(tag::K_TGT, l, b)) {
                    (Some(q), Some(k)) => {
                        let (q, k) = (grid_of(q)?, grid_of(k)?);
                        let heads = config.heads(layer);
                        let ama = ama_layer(&state, &q, &k, &v_tgt, &v_ref, heads)?;
                        out.entries.push(entry(tag::VALUES, l, b, &ama.values)?);
                        out.entries.push(entry(tag::ATTN_OUT, l, b, &ama.output)?);
                    }
                    _ => {
                        let (flow, mask) = state.at_resolution(v_tgt.height(), v_tgt.width())?;
                        let values = blend_values(&v_tgt, &v_ref, &flow, &mask)?;
                        out.entries.push(entry(tag::VALUES, l, b, &values)?);
                    }
                }
            }
            if !seen {
                return Err(protocol(ERR_MALFORMED, format!("no target values for layer {layer}")));
            }
        }
    }

    if guidance_on {
        let z0_ref = grid_of(required(req, tag::Z0_REF, 0, 0, "reference clean latent")?)?;
        let sched = config.schedule()?;
        let params = config.guidance();
        for branch in Branch::BOTH {
            let b = branch.code();
            let (Some(z), Some(eps)) = (req.find(tag::Z_TGT, 0, b), req.find(tag::EPS_TGT, 0, b)) else {
                continue;
            };
            let term = guidance_term(&state, &grid_of(z)?, &grid_of(eps)?, &z0_ref, t, &sched, &params)?;
            out.entries.push(entry(tag::GUIDANCE, 0, b, &term.delta)?);
            out.entries.push(entry(tag::ENERGY, 0, b, &TensorGrid::filled(1, 1, 1, term.energy)?)?);
        }
    }
    Ok(out)
}

/// Runs one session over `stream` until the client closes it, the stream
/// ends, or an error is reported.
pub fn handle_connection<S: Read + Write>(stream: &mut S, registry: &SessionRegistry) -> Result<()> {
    let mut session: Option<EngineSession> = None;
    let result = run_session(stream, registry, &mut session);
    if let Some(s) = &session {
        registry.close(s.id);
    }
    if let Err(err) = &result {
        if !matches!(err, Error::Io(_)) {
            let reply = Message::Error {
                code: error_code(err),
                message: err.to_string(),
            };
            // The peer may already be gone; the original error is what matters.
            let _ = write_message(stream, &reply);
        }
    }
    result
}

fn run_session<S: Read + Write>(
    stream: &mut S,
    registry: &SessionRegistry,
    session: &mut Option<EngineSession>,
) -> Result<()> {
    loop {
        let Some(msg) = read_message(stream)? else {
            if let Some(s) = session {
                log::info!("session {} ended by disconnect", s.id);
            }
            return Ok(());
        };
        match (msg, session.as_mut()) {
            (Message::Hello { version, role }, None) => {
                if version != PROTOCOL_VERSION {
                    return Err(protocol(
                        ERR_VERSION,
                        format!("client speaks version {version}, engine {PROTOCOL_VERSION}"),
                    ));
                }
                if role != ROLE_DRIVER {
                    return Err(protocol(ERR_MALFORMED, format!("unknown role {role}")));
                }
                let id = registry.open();
                *session = Some(EngineSession::new(id));
                write_message(
                    stream,
                    &Message::Welcome {
                        session_id: id,
                        version: PROTOCOL_VERSION,
                    },
                )?;
            }
            (Message::Configure(text), Some(s)) => {
                s.configure(&text)?;
                write_message(stream, &Message::Ack)?;
            }
            (Message::StepRequest(req), Some(s)) => {
                let resp = s.step(&req)?;
                write_message(stream, &Message::StepResponse(resp))?;
            }
            (Message::Close, Some(s)) => {
                log::info!("session {} closed", s.id);
                return Ok(());
            }
            (other, _) => {
                return Err(protocol(
                    ERR_STATE,
                    format!("unexpected message {:#04x} in this state", other.type_byte()),
                ))
            }
        }
    }
}

/// Accepts connections forever, one thread per session.
pub fn serve_listener(listener: TcpListener, registry: Arc<SessionRegistry>) -> Result<()> {
    for stream in listener.incoming() {
        let mut stream = stream?;
        let registry = Arc::clone(&registry);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle_connection(&mut stream, &registry) {
                log::warn!("session with {peer:?} aborted: {e}");
            }
        });
    }
    Ok(())
}

pub fn serve(addr: impl ToSocketAddrs, registry: Arc<SessionRegistry>) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(listener, registry)
}
