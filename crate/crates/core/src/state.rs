//! Synthetic training workload: a fixed random linear-regression problem with
//! deterministic gradients, a bias-corrected Adam optimizer, and optimizer
//! state sharded across data-parallel ranks while half-precision weights stay
//! replicated. Every checkpoint and recovery path is validated against this
//! ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, ProtocolError, StepError};
use crate::f16::{f16_bits_to_f32, f32_to_f16_bits, round_f16};
use crate::rng::{mix_seed, SplitMix64};

/// Contiguous slice of the parameter vector owned by one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub start: usize,
    pub len: usize,
}

impl Partition {
    /// Owned range of `rank` under `dp`-way sharding of `phi` parameters.
    /// The remainder spreads over the first `phi % dp` ranks so the ranges
    /// tile `[0, phi)` exactly.
    pub fn for_rank(phi: usize, dp: usize, rank: usize) -> Self {
        assert!(dp > 0 && rank < dp, "rank {rank} out of 0..{dp}");
        let base = phi / dp;
        let rem = phi % dp;
        let start = rank * base + rank.min(rem);
        let len = base + usize::from(rank < rem);
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0) {
            return Err(ConfigError::new("optimizer.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(ConfigError::new("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(ConfigError::new("optimizer.beta2", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(ConfigError::new("optimizer.eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Emulated loss scaler: the scale itself is constant, and the tick counter
/// advances only when the native optimizer path runs. Fused replay skips the
/// ticks for the steps it folds together, which makes "the final step went
/// through the native path" observable in tests.
pub const DEFAULT_LOSS_SCALE: f64 = 65536.0;

/// One rank's gradient over its owned partition for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientShard {
    pub iteration: u64,
    pub rank: usize,
    pub values: Vec<f32>,
}

/// Fixed random linear-regression problem. Gradients are a pure function of
/// (seed, iteration, weights): the design matrix rows and targets for an
/// iteration are regenerated from the seed on demand.
#[derive(Debug, Clone)]
pub struct Workload {
    pub phi: usize,
    pub seed: u64,
    pub batch_samples: usize,
    pub noise_std: f64,
    pub true_weights: Vec<f32>,
}

impl Workload {
    pub fn from_seed(seed: u64, phi: usize, batch_samples: usize, noise_std: f64) -> Self {
        let mut rng = SplitMix64::new(mix_seed(seed, 0x77, 0));
        let scale = 3.0 / (phi as f32).sqrt();
        let true_weights = (0..phi)
            .map(|_| rng.next_symmetric_f32() * scale)
            .collect();
        Self {
            phi,
            seed,
            batch_samples,
            noise_std,
            true_weights,
        }
    }

    /// Regenerates the sample batch for `iteration`: `(features, targets)`.
    pub fn batch(&self, iteration: u64) -> (Vec<Vec<f32>>, Vec<f64>) {
        let mut xs = Vec::with_capacity(self.batch_samples);
        let mut ys = Vec::with_capacity(self.batch_samples);
        let mut xrng = SplitMix64::new(mix_seed(self.seed, iteration, 1));
        let mut nrng = SplitMix64::new(mix_seed(self.seed, iteration, 2));
        for _ in 0..self.batch_samples {
            let x: Vec<f32> = (0..self.phi).map(|_| xrng.next_symmetric_f32()).collect();
            let mut dot = 0.0f64;
            for (xi, wi) in x.iter().zip(&self.true_weights) {
                dot += (*xi as f64) * (*wi as f64);
            }
            let noise = self.noise_std * (nrng.next_f64() * 2.0 - 1.0);
            xs.push(x);
            ys.push(dot + noise);
        }
        (xs, ys)
    }

    /// Mean-squared-error loss and its gradient with respect to `weights`
    /// (the half-precision forward weights).
    pub fn eval(&self, iteration: u64, weights: &[f32]) -> (Vec<f32>, f64) {
        assert_eq!(weights.len(), self.phi);
        let mut grad = vec![0.0f32; self.phi];
        let mut loss = 0.0f64;
        let inv_b = 1.0 / self.batch_samples as f64;
        let mut xrng = SplitMix64::new(mix_seed(self.seed, iteration, 1));
        let mut nrng = SplitMix64::new(mix_seed(self.seed, iteration, 2));
        let mut x = vec![0.0f32; self.phi];
        for _ in 0..self.batch_samples {
            for xi in x.iter_mut() {
                *xi = xrng.next_symmetric_f32();
            }
            let mut pred = 0.0f64;
            let mut target = 0.0f64;
            for j in 0..self.phi {
                pred += (x[j] as f64) * (weights[j] as f64);
                target += (x[j] as f64) * (self.true_weights[j] as f64);
            }
            target += self.noise_std * (nrng.next_f64() * 2.0 - 1.0);
            let residual = pred - target;
            loss += residual * residual * inv_b;
            let coeff = (2.0 * residual * inv_b) as f32;
            for j in 0..self.phi {
                grad[j] += coeff * x[j];
            }
        }
        (grad, loss)
    }
}

/// Per-rank training state: replicated half-precision weights plus the rank's
/// shard of the full-precision master weights and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub phi: usize,
    pub dp: usize,
    pub rank: usize,
    /// Half-precision-rounded forward weights, replicated on every rank.
    pub fp16_weights: Vec<f32>,
    /// Full-precision master weights over the owned partition.
    pub master_weights: Vec<f32>,
    /// Adam first moment over the owned partition.
    pub moment1: Vec<f32>,
    /// Adam second moment over the owned partition.
    pub moment2: Vec<f32>,
    pub step: u64,
    pub loss_scale: f64,
    /// Native-optimizer-path invocation count; see [`DEFAULT_LOSS_SCALE`].
    pub scaler_ticks: u64,
}

impl TrainingState {
    pub fn new(phi: usize, dp: usize, rank: usize) -> Self {
        let own = Partition::for_rank(phi, dp, rank);
        Self {
            phi,
            dp,
            rank,
            fp16_weights: vec![0.0; phi],
            master_weights: vec![0.0; own.len],
            moment1: vec![0.0; own.len],
            moment2: vec![0.0; own.len],
            step: 0,
            loss_scale: DEFAULT_LOSS_SCALE,
            scaler_ticks: 0,
        }
    }

    /// All ranks of a fresh data-parallel group.
    pub fn new_group(phi: usize, dp: usize) -> Vec<Self> {
        (0..dp).map(|r| Self::new(phi, dp, r)).collect()
    }

    pub fn partition(&self) -> Partition {
        Partition::for_rank(self.phi, self.dp, self.rank)
    }

    /// Snapshot byte accounting: `(replicated fp16 bytes, sharded optimizer
    /// bytes)`. The replicated part is 2 bytes per parameter; master weights
    /// and both moments are 4 bytes each over the owned partition.
    pub fn snapshot_bytes(&self) -> (u64, u64) {
        let own = self.partition().len as u64;
        (2 * self.phi as u64, 12 * own)
    }

    /// One bias-corrected Adam update over the owned partition. The gradient
    /// shard must carry this rank's slice for the current step.
    pub fn adam_step(&mut self, grad: &GradientShard, hp: &AdamParams) -> Result<(), StepError> {
        hp.validate()?;
        if grad.iteration != self.step {
            return Err(ProtocolError::StepMismatch {
                expected: self.step,
                rank: self.rank,
                actual: grad.iteration,
            }
            .into());
        }
        let own = self.partition();
        if grad.values.len() != own.len {
            return Err(ProtocolError::LengthMismatch {
                expected: own.len,
                actual: grad.values.len(),
            }
            .into());
        }
        let upd = self.step + 1;
        let corr1 = bias_correction(hp.beta1, upd);
        let corr2 = bias_correction(hp.beta2, upd);
        for i in 0..own.len {
            adam_update_elem(
                &mut self.master_weights[i],
                &mut self.moment1[i],
                &mut self.moment2[i],
                grad.values[i],
                hp,
                corr1,
                corr2,
            );
            self.fp16_weights[own.start + i] = round_f16(self.master_weights[i]);
        }
        self.step += 1;
        Ok(())
    }

    /// Advances the loss scaler; only the native optimizer path calls this.
    pub fn tick_scaler(&mut self) {
        self.scaler_ticks += 1;
    }

    /// Serializable shard of this state: owned fp16 slice plus the sharded
    /// optimizer state. Weights are reconstructible cluster-wide from the
    /// union of shards.
    pub fn to_shard(&self) -> StateShard {
        let own = self.partition();
        StateShard {
            phi: self.phi as u64,
            dp: self.dp as u32,
            rank: self.rank as u32,
            step: self.step,
            loss_scale: self.loss_scale,
            scaler_ticks: self.scaler_ticks,
            own_start: own.start as u64,
            fp16_bits: self.fp16_weights[own.range()]
                .iter()
                .map(|&w| f32_to_f16_bits(w))
                .collect(),
            master: self.master_weights.clone(),
            moment1: self.moment1.clone(),
            moment2: self.moment2.clone(),
        }
    }

    /// Bitwise equality of the training-relevant content: step, weights,
    /// moments, and the loss-scale value. The scaler tick counter is a
    /// path-observability aid and deliberately excluded.
    pub fn content_eq(&self, other: &Self) -> bool {
        self.content_hash() == other.content_hash()
            && self.step == other.step
            && self.phi == other.phi
            && self.dp == other.dp
            && self.rank == other.rank
    }

    /// FNV-1a over the bit patterns of the training-relevant fields.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.phi as u64);
        h.write_u64(self.dp as u64);
        h.write_u64(self.rank as u64);
        h.write_u64(self.step);
        h.write_u64(self.loss_scale.to_bits());
        for w in &self.fp16_weights {
            h.write_u32(w.to_bits());
        }
        for v in [&self.master_weights, &self.moment1, &self.moment2] {
            for x in v.iter() {
                h.write_u32(x.to_bits());
            }
        }
        h.finish()
    }
}

#[inline]
fn bias_correction(beta: f32, upd: u64) -> f32 {
    (1.0 - (beta as f64).powi(upd.min(i32::MAX as u64) as i32)) as f32
}

/// Shared per-element Adam update. Both the native step and the fused replay
/// pass go through this exact function so their arithmetic is bit-identical.
#[inline]
pub(crate) fn adam_update_elem(
    w: &mut f32,
    m: &mut f32,
    v: &mut f32,
    g: f32,
    hp: &AdamParams,
    corr1: f32,
    corr2: f32,
) {
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let mhat = *m / corr1;
    let vhat = *v / corr2;
    *w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
}

pub(crate) fn bias_corrections(hp: &AdamParams, upd: u64) -> (f32, f32) {
    (bias_correction(hp.beta1, upd), bias_correction(hp.beta2, upd))
}

/// Computes this rank's gradient shard for `iteration`. The full gradient is
/// a pure function of (workload seed, iteration, replicated fp16 weights), so
/// every rank sees identical values and each checkpoints only its owned slice.
pub fn compute_gradient(
    state: &TrainingState,
    workload: &Workload,
    iteration: u64,
) -> Result<GradientShard, ProtocolError> {
    if iteration != state.step {
        return Err(ProtocolError::StepMismatch {
            expected: state.step,
            rank: state.rank,
            actual: iteration,
        });
    }
    let (full, _) = workload.eval(iteration, &state.fp16_weights);
    Ok(shard_of(&full, state, iteration))
}

/// Slices a full gradient down to `state`'s owned partition.
pub fn shard_of(full: &[f32], state: &TrainingState, iteration: u64) -> GradientShard {
    let own = state.partition();
    GradientShard {
        iteration,
        rank: state.rank,
        values: full[own.range()].to_vec(),
    }
}

/// Copies every owner's freshly rounded fp16 slice to all ranks, so the
/// replicated weight vectors agree bit-exactly after each update.
pub fn broadcast_weights(states: &mut [TrainingState]) -> Result<(), ProtocolError> {
    let Some(first) = states.first() else {
        return Ok(());
    };
    let step = first.step;
    for s in states.iter() {
        if s.step != step {
            return Err(ProtocolError::StepMismatch {
                expected: step,
                rank: s.rank,
                actual: s.step,
            });
        }
    }
    let slices: Vec<(Partition, Vec<f32>)> = states
        .iter()
        .map(|s| {
            let own = s.partition();
            (own, s.fp16_weights[own.range()].to_vec())
        })
        .collect();
    for s in states.iter_mut() {
        for (own, slice) in &slices {
            s.fp16_weights[own.range()].copy_from_slice(slice);
        }
    }
    Ok(())
}

/// One full native training step for the whole group: per-rank Adam update on
/// the shared gradient, weight broadcast, then a loss-scaler tick on every
/// rank.
pub fn native_step(
    states: &mut [TrainingState],
    full_grad: &[f32],
    hp: &AdamParams,
) -> Result<(), StepError> {
    let iteration = states.first().map(|s| s.step).unwrap_or(0);
    for s in states.iter_mut() {
        let shard = shard_of(full_grad, s, iteration);
        s.adam_step(&shard, hp)?;
    }
    broadcast_weights(states)?;
    for s in states.iter_mut() {
        s.tick_scaler();
    }
    Ok(())
}

/// Serialized form of one rank's state shard.
#[derive(Debug, Clone, PartialEq)]
pub struct StateShard {
    pub phi: u64,
    pub dp: u32,
    pub rank: u32,
    pub step: u64,
    pub loss_scale: f64,
    pub scaler_ticks: u64,
    pub own_start: u64,
    pub fp16_bits: Vec<u16>,
    pub master: Vec<f32>,
    pub moment1: Vec<f32>,
    pub moment2: Vec<f32>,
}

const SHARD_MAGIC: &[u8; 4] = b"TSH1";

impl StateShard {
    pub fn own_len(&self) -> usize {
        self.master.len()
    }

    /// Little-endian wire encoding; bit-exact round trip.
    pub fn encode(&self) -> Vec<u8> {
        let n = self.own_len();
        let mut out = Vec::with_capacity(4 + 8 * 6 + n * 14);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&self.phi.to_le_bytes());
        out.extend_from_slice(&self.dp.to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.loss_scale.to_le_bytes());
        out.extend_from_slice(&self.scaler_ticks.to_le_bytes());
        out.extend_from_slice(&self.own_start.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for b in &self.fp16_bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
        for v in [&self.master, &self.moment1, &self.moment2] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SHARD_MAGIC.as_slice() {
            return Err("bad shard magic".into());
        }
        let phi = r.u64()?;
        let dp = r.u32()?;
        let rank = r.u32()?;
        let step = r.u64()?;
        let loss_scale = f64::from_bits(r.u64()?);
        let scaler_ticks = r.u64()?;
        let own_start = r.u64()?;
        let n = r.u64()? as usize;
        let mut fp16_bits = Vec::with_capacity(n);
        for _ in 0..n {
            fp16_bits.push(r.u16()?);
        }
        let mut vecs = [Vec::new(), Vec::new(), Vec::new()];
        for v in vecs.iter_mut() {
            v.reserve(n);
            for _ in 0..n {
                v.push(f32::from_bits(r.u32()?));
            }
        }
        r.finish()?;
        let [master, moment1, moment2] = vecs;
        Ok(Self {
            phi,
            dp,
            rank,
            step,
            loss_scale,
            scaler_ticks,
            own_start,
            fp16_bits,
            master,
            moment1,
            moment2,
        })
    }
}

/// Rebuilds every rank's full state from the complete set of shards. The
/// replicated fp16 vector is the union of the shards' owned slices.
pub fn states_from_shards(shards: &[StateShard]) -> Result<Vec<TrainingState>, ProtocolError> {
    assert!(!shards.is_empty());
    let phi = shards[0].phi as usize;
    let dp = shards[0].dp as usize;
    let step = shards[0].step;
    let mut fp16 = vec![0.0f32; phi];
    let mut covered = 0usize;
    for sh in shards {
        if sh.step != step {
            return Err(ProtocolError::StepMismatch {
                expected: step,
                rank: sh.rank as usize,
                actual: sh.step,
            });
        }
        let own = Partition::for_rank(phi, dp, sh.rank as usize);
        if sh.own_len() != own.len || sh.own_start as usize != own.start {
            return Err(ProtocolError::LengthMismatch {
                expected: own.len,
                actual: sh.own_len(),
            });
        }
        for (i, bits) in sh.fp16_bits.iter().enumerate() {
            fp16[own.start + i] = f16_bits_to_f32(*bits);
        }
        covered += own.len;
    }
    if covered != phi {
        return Err(ProtocolError::LengthMismatch {
            expected: phi,
            actual: covered,
        });
    }
    let mut out = Vec::with_capacity(dp);
    let mut sorted: Vec<&StateShard> = shards.iter().collect();
    sorted.sort_by_key(|s| s.rank);
    for sh in sorted {
        out.push(TrainingState {
            phi,
            dp,
            rank: sh.rank as usize,
            fp16_weights: fp16.clone(),
            master_weights: sh.master.clone(),
            moment1: sh.moment1.clone(),
            moment2: sh.moment2.clone(),
            step,
            loss_scale: sh.loss_scale,
            scaler_ticks: sh.scaler_ticks,
        });
    }
    Ok(out)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write_u32(&mut self, x: u32) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    fn write_u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated input: wanted {n} bytes at {}, have {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32, String> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }
    pub fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    pub fn finish(&self) -> Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!(
                "trailing garbage: {} bytes unread",
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_target_workload(phi: usize) -> Workload {
        let mut w = Workload::from_seed(11, phi, 3, 0.0);
        w.true_weights.iter_mut().for_each(|x| *x = 0.0);
        w
    }

    #[test]
    fn partition_tiles_exactly() {
        for phi in [1usize, 7, 64, 1000, 1 << 16] {
            for dp in [1usize, 2, 3, 4, 7, 8] {
                let mut covered = 0;
                let mut next = 0;
                for r in 0..dp {
                    let p = Partition::for_rank(phi, dp, r);
                    assert_eq!(p.start, next, "phi={phi} dp={dp} rank={r}");
                    next = p.end();
                    covered += p.len;
                }
                assert_eq!(covered, phi);
                assert_eq!(next, phi);
            }
        }
    }

    #[test]
    fn byte_accounting_is_14_phi() {
        let phi = 4096;
        let dp = 4;
        let states = TrainingState::new_group(phi, dp);
        let fp16_total = states[0].snapshot_bytes().0;
        let sharded_total: u64 = states.iter().map(|s| s.snapshot_bytes().1).sum();
        assert_eq!(fp16_total, 2 * phi as u64);
        assert_eq!(sharded_total, 12 * phi as u64);
        assert_eq!(fp16_total + sharded_total, 14 * phi as u64);
    }

    #[test]
    fn zero_weights_zero_targets_give_zero_gradient() {
        let phi = 128;
        let w = zero_target_workload(phi);
        let state = TrainingState::new(phi, 1, 0);
        let g = compute_gradient(&state, &w, 0).unwrap();
        assert!(g.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_deterministic() {
        let phi = 256;
        let w = Workload::from_seed(3, phi, 2, 0.01);
        let mut state = TrainingState::new(phi, 1, 0);
        state.fp16_weights.iter_mut().enumerate().for_each(|(i, x)| {
            *x = round_f16((i as f32 * 0.01).sin());
        });
        let a = compute_gradient(&state, &w, 0).unwrap();
        let b = compute_gradient(&state, &w, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_straight_line_oracle() {
        // Independent re-derivation of the MSE gradient from the raw batch.
        let phi = 64;
        let w = Workload::from_seed(7, phi, 4, 0.0);
        let mut state = TrainingState::new(phi, 1, 0);
        for (i, x) in state.fp16_weights.iter_mut().enumerate() {
            *x = round_f16(((i * 13 % 29) as f32 - 14.0) * 0.05);
        }
        let got = compute_gradient(&state, &w, 0).unwrap();

        let (xs, ys) = w.batch(0);
        let b = xs.len() as f64;
        let mut expect = vec![0.0f64; phi];
        for (x, y) in xs.iter().zip(&ys) {
            let mut pred = 0.0f64;
            for j in 0..phi {
                pred += x[j] as f64 * state.fp16_weights[j] as f64;
            }
            let r = pred - y;
            for j in 0..phi {
                expect[j] += 2.0 * r * x[j] as f64 / b;
            }
        }
        for j in 0..phi {
            let diff = (got.values[j] as f64 - expect[j]).abs();
            assert!(diff < 1e-5, "elem {j}: got {} want {}", got.values[j], expect[j]);
        }
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut state = TrainingState::new(16, 1, 0);
        let grad = GradientShard {
            iteration: 0,
            rank: 0,
            values: vec![0.0; 16],
        };
        let before = state.fp16_weights.clone();
        state.adam_step(&grad, &AdamParams::default()).unwrap();
        assert_eq!(state.fp16_weights, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_element_first_step_oracle() {
        // Hand-evaluated Adam: m = 0.01, v = 1e-5, mhat = 0.1, vhat = 0.01,
        // update = 0.1 * 0.1 / (0.1 + 1e-8) which is essentially 0.1.
        let mut state = TrainingState::new(1, 1, 0);
        state.master_weights[0] = 1.0;
        state.fp16_weights[0] = round_f16(1.0);
        let hp = AdamParams {
            lr: 0.1,
            ..AdamParams::default()
        };
        let grad = GradientShard {
            iteration: 0,
            rank: 0,
            values: vec![0.1],
        };
        state.adam_step(&grad, &hp).unwrap();
        assert!(
            (state.master_weights[0] - 0.9).abs() < 1e-6,
            "got {}",
            state.master_weights[0]
        );
    }

    #[test]
    fn two_steps_equal_sequential_replay() {
        let phi = 32;
        let hp = AdamParams::default().clone();
        let g0: Vec<f32> = (0..phi).map(|i| (i as f32 * 0.3).cos()).collect();
        let g1: Vec<f32> = (0..phi).map(|i| (i as f32 * 0.7).sin()).collect();

        let mut direct = TrainingState::new(phi, 1, 0);
        direct
            .adam_step(&GradientShard { iteration: 0, rank: 0, values: g0.clone() }, &hp)
            .unwrap();
        direct
            .adam_step(&GradientShard { iteration: 1, rank: 0, values: g1.clone() }, &hp)
            .unwrap();

        let mut replay = TrainingState::new(phi, 1, 0);
        for (it, g) in [(0u64, &g0), (1u64, &g1)] {
            replay
                .adam_step(&GradientShard { iteration: it, rank: 0, values: g.clone() }, &hp)
                .unwrap();
        }
        assert!(direct.content_eq(&replay));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(AdamParams { lr: 0.0, ..AdamParams::default() }.validate().is_err());
        assert!(AdamParams { beta1: 1.0, ..AdamParams::default() }.validate().is_err());
        assert!(AdamParams { beta2: -0.1, ..AdamParams::default() }.validate().is_err());
        assert!(AdamParams { eps: 0.0, ..AdamParams::default() }.validate().is_err());
        assert!(AdamParams::default().validate().is_ok());
    }

    #[test]
    fn broadcast_single_rank_is_identity() {
        let mut states = TrainingState::new_group(64, 1);
        let before = states[0].clone();
        broadcast_weights(&mut states).unwrap();
        assert_eq!(states[0], before);
    }

    #[test]
    fn broadcast_two_ranks_concatenates_owner_halves() {
        let phi = 8;
        let mut states = TrainingState::new_group(phi, 2);
        for s in states.iter_mut() {
            let own = s.partition();
            for i in own.range() {
                s.fp16_weights[i] = (s.rank as f32 + 1.0) * 10.0 + i as f32;
            }
        }
        broadcast_weights(&mut states).unwrap();
        let expect: Vec<f32> = (0..phi)
            .map(|i| if i < 4 { 10.0 + i as f32 } else { 20.0 + i as f32 })
            .collect();
        assert_eq!(states[0].fp16_weights, expect);
        assert_eq!(states[1].fp16_weights, expect);
    }

    #[test]
    fn broadcast_four_ranks_matches_gather_oracle() {
        let phi = 37;
        let dp = 4;
        let mut states = TrainingState::new_group(phi, dp);
        let mut rng = SplitMix64::new(5);
        for s in states.iter_mut() {
            let own = s.partition();
            for i in own.range() {
                s.fp16_weights[i] = round_f16(rng.next_symmetric_f32());
            }
        }
        // Oracle: explicit owner-by-owner gather into one vector.
        let mut gathered = vec![0.0f32; phi];
        for s in states.iter() {
            let own = s.partition();
            gathered[own.range()].copy_from_slice(&s.fp16_weights[own.range()]);
        }
        broadcast_weights(&mut states).unwrap();
        for s in &states {
            assert_eq!(s.fp16_weights, gathered, "rank {}", s.rank);
        }
    }

    #[test]
    fn broadcast_rejects_step_mismatch() {
        let mut states = TrainingState::new_group(16, 2);
        states[1].step = 3;
        assert!(matches!(
            broadcast_weights(&mut states),
            Err(ProtocolError::StepMismatch { .. })
        ));
    }

    #[test]
    fn sharded_training_matches_single_rank() {
        let phi = 97;
        let hp = AdamParams::default();
        let w = Workload::from_seed(21, phi, 2, 0.01);

        let mut single = TrainingState::new_group(phi, 1);
        let mut sharded = TrainingState::new_group(phi, 4);
        for it in 0..20u64 {
            let (grad, _) = w.eval(it, &single[0].fp16_weights);
            native_step(&mut single, &grad, &hp).unwrap();
            let (grad_s, _) = w.eval(it, &sharded[0].fp16_weights);
            assert_eq!(grad, grad_s, "gradient streams diverged at {it}");
            native_step(&mut sharded, &grad_s, &hp).unwrap();
        }
        for s in &sharded {
            assert_eq!(
                s.fp16_weights
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>(),
                single[0]
                    .fp16_weights
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn shard_roundtrip_is_bit_exact() {
        let phi = 53;
        let w = Workload::from_seed(2, phi, 2, 0.0);
        let mut states = TrainingState::new_group(phi, 3);
        let hp = AdamParams::default();
        for it in 0..7u64 {
            let (grad, _) = w.eval(it, &states[0].fp16_weights);
            native_step(&mut states, &grad, &hp).unwrap();
        }
        for s in &states {
            let shard = s.to_shard();
            let decoded = StateShard::decode(&shard.encode()).unwrap();
            assert_eq!(shard, decoded);
        }
    }

    #[test]
    fn states_rebuild_from_shards() {
        let phi = 41;
        let w = Workload::from_seed(9, phi, 2, 0.0);
        let mut states = TrainingState::new_group(phi, 4);
        let hp = AdamParams::default();
        for it in 0..11u64 {
            let (grad, _) = w.eval(it, &states[0].fp16_weights);
            native_step(&mut states, &grad, &hp).unwrap();
        }
        let shards: Vec<StateShard> = states.iter().map(|s| s.to_shard()).collect();
        let rebuilt = states_from_shards(&shards).unwrap();
        for (orig, back) in states.iter().zip(&rebuilt) {
            assert!(orig.content_eq(back), "rank {}", orig.rank);
            assert_eq!(orig.scaler_ticks, back.scaler_ticks);
        }
    }

    #[test]
    fn determinism_across_runs() {
        let phi = 129;
        let run = || {
            let w = Workload::from_seed(77, phi, 2, 0.02);
            let mut states = TrainingState::new_group(phi, 2);
            let hp = AdamParams::default();
            for it in 0..25u64 {
                let (grad, _) = w.eval(it, &states[0].fp16_weights);
                native_step(&mut states, &grad, &hp).unwrap();
            }
            states.iter().map(|s| s.content_hash()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
