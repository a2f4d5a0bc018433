//! Independent reference implementations used as oracles by the
//! integration tests. Written for clarity, not speed, and deliberately free
//! of calls into the engine beyond plain data access.

#![allow(dead_code)]

pub mod transcript;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semmatch::tensors::{FlowField, MaskGrid, TensorGrid};

pub fn grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> TensorGrid {
    TensorGrid::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn binary_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> MaskGrid {
    MaskGrid::from_fn(h, w, |_, _| if rng.gen_bool(p) { 1.0 } else { 0.0 }).unwrap()
}

/// Cosine similarity between reference pixel `i` and target pixel `j`,
/// zero when either vector is zero.
pub fn brute_cost(psi_ref: &TensorGrid, psi_tgt: &TensorGrid) -> Vec<Vec<f64>> {
    let n = psi_ref.num_pixels();
    let mut c = vec![vec![0.0; n]; n];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let a = psi_ref.token(i);
            let b = psi_tgt.token(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            *cell = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        }
    }
    c
}

/// Forward flow (per target pixel, best reference pixel) and reverse flow
/// (per reference pixel, best target pixel); first index wins ties.
pub fn brute_flows(cost: &[Vec<f64>], h: usize, w: usize) -> (FlowField, FlowField) {
    let n = h * w;
    let pos = |k: usize| ((k % w) as f64, (k / w) as f64);
    let mut fwd = vec![0.0; 2 * n];
    for j in 0..n {
        let mut best = 0;
        for i in 1..n {
            if cost[i][j] > cost[best][j] {
                best = i;
            }
        }
        fwd[2 * j] = pos(best).0 - pos(j).0;
        fwd[2 * j + 1] = pos(best).1 - pos(j).1;
    }
    let mut bwd = vec![0.0; 2 * n];
    for i in 0..n {
        let mut best = 0;
        for j in 1..n {
            if cost[i][j] > cost[i][best] {
                best = j;
            }
        }
        bwd[2 * i] = pos(best).0 - pos(i).0;
        bwd[2 * i + 1] = pos(best).1 - pos(i).1;
    }
    (FlowField::new(h, w, fwd).unwrap(), FlowField::new(h, w, bwd).unwrap())
}

/// Bilinear sample of channel `c` at `(y, x)` with coordinates clamped to
/// the grid.
pub fn sample(data: &dyn Fn(usize, usize) -> f64, h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = data(y0, x0) * (1.0 - fx) + data(y0, x1) * fx;
    let bottom = data(y1, x0) * (1.0 - fx) + data(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn brute_warp(g: &TensorGrid, flow: &FlowField) -> TensorGrid {
    let (h, w, c) = g.dims();
    TensorGrid::from_fn(h, w, c, |y, x, ch| {
        let (dx, dy) = flow.get(y, x);
        sample(&|yy, xx| g.get(yy, xx, ch), h, w, y as f64 + dy, x as f64 + dx)
    })
    .unwrap()
}

/// `U(x) = [‖F_xy(x) + F_yx(x + F_xy(x))‖ < H·(|M|/(H·W))·λ_c]`.
pub fn brute_confidence(f_xy: &FlowField, f_yx: &FlowField, m: &MaskGrid, lambda_c: f64) -> MaskGrid {
    let (h, w) = (f_xy.height(), f_xy.width());
    let area: f64 = m.values().iter().sum();
    let threshold = h as f64 * (area / (h * w) as f64) * lambda_c;
    MaskGrid::from_fn(h, w, |y, x| {
        let (dx, dy) = f_xy.get(y, x);
        let (sy, sx) = (y as f64 + dy, x as f64 + dx);
        let bx = sample(&|yy, xx| f_yx.get(yy, xx).0, h, w, sy, sx);
        let by = sample(&|yy, xx| f_yx.get(yy, xx).1, h, w, sy, sx);
        let e = ((dx + bx).powi(2) + (dy + by).powi(2)).sqrt();
        if e < threshold {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Masked mean of per-pixel l2 distances.
pub fn brute_energy(a: &TensorGrid, b: &TensorGrid, m: &MaskGrid) -> f64 {
    let area: f64 = m.values().iter().sum();
    if area == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if m.get(y, x) == 0.0 {
                continue;
            }
            let d: f64 = a.pixel(y, x).iter().zip(b.pixel(y, x)).map(|(p, q)| (p - q) * (p - q)).sum();
            total += m.get(y, x) * d.sqrt();
        }
    }
    total / area
}

/// Softmax attention computed per head with explicit loops.
pub fn brute_attention(q: &TensorGrid, k: &TensorGrid, v: &TensorGrid, heads: usize) -> TensorGrid {
    let (h, w, d) = q.dims();
    let n = h * w;
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = (0..dh).map(|c| q.token(i)[off + c] * k.token(j)[off + c]).sum();
                    s / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * d + off + c] = (0..n).map(|j| e[j] / z * v.token(j)[off + c]).sum();
            }
        }
    }
    TensorGrid::new(h, w, d, out).unwrap()
}

pub mod wire {
    use proptest::collection::vec;
    use proptest::prelude::*;
    use semmatch::backend::protocol::{Entry, Message, StepPayload};
    use semmatch::tensors::frame::RawFrame;

    pub fn raw_frame() -> impl Strategy<Value = RawFrame> {
        vec(1u32..5, 1..4).prop_flat_map(|dims| {
            let n = dims.iter().product::<u32>() as usize;
            vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n).prop_map(move |values| RawFrame {
                dims: dims.clone(),
                values,
            })
        })
    }

    fn payload() -> impl Strategy<Value = StepPayload> {
        (
            any::<u32>(),
            any::<u32>(),
            vec((any::<u8>(), any::<u8>(), any::<u8>(), raw_frame()), 0..5),
        )
            .prop_map(|(t, step_index, entries)| StepPayload {
                t,
                step_index,
                entries: entries
                    .into_iter()
                    .map(|(tag, layer, branch, frame)| Entry {
                        tag,
                        layer,
                        branch,
                        frame,
                    })
                    .collect(),
            })
    }

    pub fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u16>(), any::<u8>()).prop_map(|(version, role)| Message::Hello { version, role }),
            (any::<u64>(), any::<u16>()).prop_map(|(session_id, version)| Message::Welcome { session_id, version }),
            ".{0,40}".prop_map(Message::Configure),
            Just(Message::Ack),
            payload().prop_map(Message::StepRequest),
            payload().prop_map(Message::StepResponse),
            Just(Message::Close),
            (any::<u8>(), ".{0,40}").prop_map(|(code, message)| Message::Error { code, message }),
        ]
    }
}
