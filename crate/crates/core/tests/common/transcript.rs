//! A small recorded session for the step protocol, plus an oracle that
//! recomputes the engine's answer to a step request from the individual
//! module functions.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use semmatch::attention::{ama_with_diagnostics, blend_values, AttentionInputs};
use semmatch::backend::protocol::{tag, Entry, Message, StepPayload, PROTOCOL_VERSION, ROLE_DRIVER};
use semmatch::backend::synthetic::{AttentionLayerSpec, FeatureLayerSpec};
use semmatch::backend::{DenoiseRequest, Denoiser, Extraction, SyntheticBackend, SyntheticBackendSpec};
use semmatch::consistency::{cycle_confidence, foreground_mask, semantic_consistent_mask, ConsistencyParams};
use semmatch::guidance::{
    align_reference_z0, guidance_energy, guidance_gradient, predict_z0, GuidanceParams, NoiseSchedule,
};
use semmatch::matching::{assemble_descriptors, bidirectional_flow};
use semmatch::sampler::{initial_noise, parse_config};
use semmatch::tensors::frame::RawFrame;
use semmatch::tensors::TensorGrid;

pub const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

pub const CONFIG_TEXT: &str = "\
# recorded transcript session
total_steps = 10
ama_steps = 2..10
guidance_steps = 2..10
ama_layers = 1, 2
descriptor_layers = 2, 3
attention_heads = 1:2, 2:2
lambda_c = 0.4
lambda_g = 5
pca_dim = 8
";

pub const GATED_STEP: (u32, u32) = (8, 2);
pub const UNGATED_STEP: (u32, u32) = (10, 0);

pub fn small_backend_spec() -> SyntheticBackendSpec {
    SyntheticBackendSpec {
        seed: 3,
        latent_height: 8,
        latent_width: 8,
        latent_channels: 4,
        feature_layers: vec![
            FeatureLayerSpec {
                layer: 2,
                downsample: 2,
                channels: 24,
            },
            FeatureLayerSpec {
                layer: 3,
                downsample: 1,
                channels: 16,
            },
        ],
        attention_layers: vec![
            AttentionLayerSpec {
                layer: 1,
                downsample: 2,
                dim: 8,
                heads: 2,
            },
            AttentionLayerSpec {
                layer: 2,
                downsample: 1,
                dim: 8,
                heads: 2,
            },
        ],
        subject_size: 3,
        ..SyntheticBackendSpec::default()
    }
}

fn frame(g: &TensorGrid) -> RawFrame {
    RawFrame::from_grid(g).unwrap()
}

fn push(entries: &mut Vec<Entry>, tag: u8, layer: usize, branch: u8, g: &TensorGrid) {
    entries.push(Entry {
        tag,
        layer: layer as u8,
        branch,
        frame: frame(g),
    });
}

/// The gated step request, built from the small synthetic backend. The
/// unconditional branch of layer 2 sends values only, so the engine answers
/// it with blended values and no attention output.
pub fn gated_request() -> StepPayload {
    let mut backend = SyntheticBackend::new(small_backend_spec()).unwrap();
    let reference = backend.register_subject((1, 1)).unwrap();
    let target = backend.register_subject((4, 3)).unwrap();
    let uncond = backend.register_unconditional().unwrap();
    let dims = backend.latent_dims();
    let z_ref = initial_noise(dims, 11).unwrap();
    let z_tgt = initial_noise(dims, 12).unwrap();
    let (t, step_index) = GATED_STEP;
    let t_us = t as usize;
    let overrides = BTreeMap::new();
    let call = |z: &TensorGrid, cond, needs: &Extraction| {
        backend
            .denoise(&DenoiseRequest {
                z,
                t: t_us,
                cond,
                needs,
                attention_overrides: &overrides,
            })
            .unwrap()
    };
    let full = Extraction {
        feature_layers: vec![2, 3],
        attention_layers: vec![1, 2],
        cross_attention: true,
    };
    let r = call(&z_ref, reference, &full);
    let c = call(&z_tgt, target, &full);
    let u = call(&z_tgt, uncond, &full);

    let mut entries = Vec::new();
    for layer in [2, 3] {
        push(&mut entries, tag::FEAT_REF, layer, 0, &r.decoder_features[&layer]);
        push(&mut entries, tag::FEAT_TGT, layer, 0, &c.decoder_features[&layer]);
    }
    for (k, map) in c.cross_attn_maps.iter().enumerate() {
        push(&mut entries, tag::CROSS_ATTN, k, 0, map);
    }
    for layer in [1, 2] {
        push(&mut entries, tag::V_REF, layer, 0, &r.attention[&layer].v);
        for (branch, resp) in [(0u8, &u), (1u8, &c)] {
            let qkv = &resp.attention[&layer];
            if !(branch == 0 && layer == 2) {
                push(&mut entries, tag::Q_TGT, layer, branch, &qkv.q);
                push(&mut entries, tag::K_TGT, layer, branch, &qkv.k);
            }
            push(&mut entries, tag::V_TGT, layer, branch, &qkv.v);
        }
    }
    let sched = NoiseSchedule::scaled_linear(10, 1000, 0.00085, 0.012).unwrap();
    let z0_ref = predict_z0(&z_ref, &r.eps, t_us, &sched).unwrap();
    push(&mut entries, tag::Z0_REF, 0, 0, &z0_ref);
    for (branch, resp) in [(0u8, &u), (1u8, &c)] {
        push(&mut entries, tag::Z_TGT, 0, branch, &z_tgt);
        push(&mut entries, tag::EPS_TGT, 0, branch, &resp.eps);
    }
    StepPayload { t, step_index, entries }
}

pub fn ungated_request() -> StepPayload {
    let (t, step_index) = UNGATED_STEP;
    StepPayload {
        t,
        step_index,
        entries: Vec::new(),
    }
}

/// Client side of the recorded session.
pub fn request_messages() -> Vec<Message> {
    vec![
        Message::Hello {
            version: PROTOCOL_VERSION,
            role: ROLE_DRIVER,
        },
        Message::Configure(CONFIG_TEXT.to_string()),
        Message::StepRequest(ungated_request()),
        Message::StepRequest(gated_request()),
        Message::Close,
    ]
}

pub fn encode_all(messages: &[Message]) -> Vec<u8> {
    messages.iter().flat_map(|m| m.encode()).collect()
}

pub fn decode_all(mut bytes: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (msg, used) = Message::decode(bytes).unwrap();
        out.push(msg);
        bytes = &bytes[used..];
    }
    out
}

/// In-memory stream: reads from a fixed input, collects everything written.
pub struct Duplex {
    input: Cursor<Vec<u8>>,
    pub output: Vec<u8>,
}

impl Duplex {
    pub fn new(input: Vec<u8>) -> Self {
        Self {
            input: Cursor::new(input),
            output: Vec::new(),
        }
    }
}

impl Read for Duplex {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.input.read(buf)
    }
}

impl Write for Duplex {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.output.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn grid(req: &StepPayload, tag: u8, layer: u8, branch: u8) -> TensorGrid {
    req.find(tag, layer, branch)
        .unwrap_or_else(|| panic!("request lacks tag {tag:#x} layer {layer} branch {branch}"))
        .to_grid()
        .unwrap()
}

/// Recomputes the gated step response directly from the module functions.
pub fn oracle_response(req: &StepPayload) -> StepPayload {
    let cfg = parse_config(CONFIG_TEXT).unwrap().session;
    let t = req.t as usize;
    let ref_feats: Vec<TensorGrid> = [2, 3].iter().map(|&l| grid(req, tag::FEAT_REF, l, 0)).collect();
    let tgt_feats: Vec<TensorGrid> = [2, 3].iter().map(|&l| grid(req, tag::FEAT_TGT, l, 0)).collect();
    let maps: Vec<TensorGrid> = req
        .entries
        .iter()
        .filter(|e| e.tag == tag::CROSS_ATTN)
        .map(|e| e.frame.to_grid().unwrap())
        .collect();
    // The finest feature layer sets the descriptor grid.
    let res = (ref_feats[1].height(), ref_feats[1].width());
    let pair = assemble_descriptors(&ref_feats, &tgt_feats, res, cfg.pca_dim).unwrap();
    let flows = bidirectional_flow(&pair.psi_ref, &pair.psi_tgt).unwrap();
    let params = ConsistencyParams {
        lambda_c: cfg.lambda_c,
        mask_threshold: cfg.mask_threshold,
    };
    let m_t = foreground_mask(&maps, &params, res).unwrap();
    let u_t = cycle_confidence(&flows.ref_to_target, &flows.target_to_ref, &m_t, &params).unwrap();
    let m_prime = semantic_consistent_mask(&m_t, &u_t).unwrap();

    let mut entries = Vec::new();
    push(&mut entries, tag::FLOW, 0, 0, &flows.ref_to_target.to_grid());
    push(&mut entries, tag::MASK, 0, 0, &m_prime.to_grid());
    for layer in [1u8, 2] {
        let v_ref = grid(req, tag::V_REF, layer, 0);
        for branch in [0u8, 1] {
            let v_tgt = grid(req, tag::V_TGT, layer, branch);
            let (h, w) = (v_tgt.height(), v_tgt.width());
            let flow = flows.ref_to_target.resize(h, w).unwrap();
            let mask = m_prime.resize_binary(h, w).unwrap();
            if req.find(tag::Q_TGT, layer, branch).is_some() {
                let inputs = AttentionInputs::new(
                    grid(req, tag::Q_TGT, layer, branch),
                    grid(req, tag::K_TGT, layer, branch),
                    v_tgt,
                    v_ref.clone(),
                    2,
                )
                .unwrap();
                let out = ama_with_diagnostics(&inputs, &flow, &mask).unwrap();
                push(&mut entries, tag::VALUES, layer as usize, branch, &out.values);
                push(&mut entries, tag::ATTN_OUT, layer as usize, branch, &out.output);
            } else {
                let values = blend_values(&v_tgt, &v_ref, &flow, &mask).unwrap();
                push(&mut entries, tag::VALUES, layer as usize, branch, &values);
            }
        }
    }
    let sched = NoiseSchedule::scaled_linear(cfg.total_steps, cfg.train_steps, cfg.beta_start, cfg.beta_end).unwrap();
    let gp = GuidanceParams {
        lambda_g: cfg.lambda_g,
        enabled_steps: cfg.guidance_steps.clone(),
    };
    let z0_ref = grid(req, tag::Z0_REF, 0, 0);
    let aligned = align_reference_z0(&z0_ref, &flows.ref_to_target).unwrap();
    for branch in [0u8, 1] {
        let z = grid(req, tag::Z_TGT, 0, branch);
        let eps = grid(req, tag::EPS_TGT, 0, branch);
        let z0_hat = predict_z0(&z, &eps, t, &sched).unwrap();
        let mask = m_prime.resize_binary(z.height(), z.width()).unwrap();
        let energy = guidance_energy(&aligned, &z0_hat, &mask).unwrap();
        let grad = guidance_gradient(&aligned, &z0_hat, &mask, t, &sched).unwrap();
        let weight = gp.lambda_g * sched.sigma(t).unwrap();
        let delta = grad.map(|g| weight * g).unwrap();
        push(&mut entries, tag::GUIDANCE, 0, branch, &delta);
        push(&mut entries, tag::ENERGY, 0, branch, &TensorGrid::filled(1, 1, 1, energy).unwrap());
    }
    StepPayload {
        t: req.t,
        step_index: req.step_index,
        entries,
    }
}
