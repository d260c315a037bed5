//! Classical post-processing between Alice and Bob over an authenticated
//! public channel: sifting, parameter estimation, two-pass parity-bisection
//! reconciliation with a hash check, and Toeplitz privacy amplification.
//!
//! Each party is a state machine that consumes one message and emits zero or
//! more replies. The driver delivers messages in send order and records them
//! in a transcript with the wire format
//! `u32 seq | u8 kind | u32 payload_len | payload` (all little-endian).

use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::architectures::{self, secret_fraction, ArchError, RunResult, Scenario, RAW_X, RAW_Y};
use crate::qstate::CorrelationTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("malformed {kind:?} payload: {reason}")]
    MalformedPayload { kind: MessageKind, reason: String },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated transcript at byte {0}")]
    TruncatedTranscript(usize),
    #[error("unexpected {kind:?} in state {state}")]
    UnexpectedMessage { kind: MessageKind, state: &'static str },
    #[error("bit strings of different lengths: {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("session exceeded {0} messages")]
    Runaway(usize),
    #[error("round count must be positive")]
    NoRounds,
    #[error(transparent)]
    Architecture(#[from] ArchError),
}

pub type Result<T> = std::result::Result<T, ProtoError>;

/// One round of the experiment as seen by an omniscient simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoundRecord {
    pub index: u32,
    pub x: u8,
    pub y: u8,
    pub a: u8,
    pub b: u8,
    pub heralded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// Fraction of key-setting rounds published for the error-rate estimate.
    pub sample_fraction: f64,
    pub security_margin: usize,
    pub min_raw_rounds: usize,
    /// Total failure probability shared by the five Hoeffding bounds.
    pub confidence_delta: f64,
    pub verification_bits: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.1,
            security_margin: 64,
            min_raw_rounds: 256,
            confidence_delta: 1e-6,
            verification_bits: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    BasisAnnounce = 0,
    SampleIndices = 1,
    SampleValues = 2,
    ParityQuery = 3,
    ParityReply = 4,
    HashSeed = 5,
    Abort = 6,
    Done = 7,
}

impl TryFrom<u8> for MessageKind {
    type Error = ProtoError;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::BasisAnnounce,
            1 => Self::SampleIndices,
            2 => Self::SampleValues,
            3 => Self::ParityQuery,
            4 => Self::ParityReply,
            5 => Self::HashSeed,
            6 => Self::Abort,
            7 => Self::Done,
            other => return Err(ProtoError::UnknownKind(other)),
        })
    }
}

/// Largest payload accepted for any message.
pub const MAX_PAYLOAD: usize = 1 << 28;
pub const SEED_BYTES: usize = 32;
const MAX_ABORT_PAYLOAD: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl ProtocolMessage {
    pub fn new(kind: MessageKind, payload: Vec<u8>) -> Result<Self> {
        let m = Self { kind, payload };
        m.check_length()?;
        Ok(m)
    }

    fn check_length(&self) -> Result<()> {
        let len = self.payload.len();
        let ok = match self.kind {
            MessageKind::HashSeed => len == SEED_BYTES,
            MessageKind::Done => len == 0,
            MessageKind::Abort => (1..=MAX_ABORT_PAYLOAD).contains(&len),
            MessageKind::SampleIndices => len.is_multiple_of(4) && len <= MAX_PAYLOAD,
            MessageKind::SampleValues | MessageKind::ParityReply => (4..=MAX_PAYLOAD).contains(&len),
            MessageKind::ParityQuery => len >= 4 && len.is_multiple_of(4) && len <= MAX_PAYLOAD,
            MessageKind::BasisAnnounce => len <= MAX_PAYLOAD,
        };
        if ok {
            Ok(())
        } else {
            Err(ProtoError::MalformedPayload {
                kind: self.kind,
                reason: format!("length {len}"),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    fn peer(self) -> Self {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub seq: u32,
    pub sender: Party,
    pub message: ProtocolMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(&e.seq.to_le_bytes());
            out.push(e.message.kind as u8);
            out.extend_from_slice(&(e.message.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.message.payload);
        }
        out
    }

    /// Parses the wire format back into `(seq, message)` records.
    pub fn parse(bytes: &[u8]) -> Result<Vec<(u32, ProtocolMessage)>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let header = bytes.get(pos..pos + 9).ok_or(ProtoError::TruncatedTranscript(pos))?;
            let seq = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes"));
            let kind = MessageKind::try_from(header[4])?;
            let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
            let payload = bytes
                .get(pos + 9..pos + 9 + len)
                .ok_or(ProtoError::TruncatedTranscript(pos))?
                .to_vec();
            out.push((seq, ProtocolMessage::new(kind, payload)?));
            pos += 9 + len;
        }
        Ok(out)
    }

    /// Total bits carried by parity replies.
    pub fn parity_bits(&self) -> Result<u64> {
        let mut total = 0;
        for e in &self.entries {
            if e.message.kind == MessageKind::ParityReply {
                total += decode_bits(MessageKind::ParityReply, &e.message.payload)?.len() as u64;
            }
        }
        Ok(total)
    }
}

pub fn encode_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = (bits.len() as u32).to_le_bytes().to_vec();
    out.extend(bits.chunks(8).map(|chunk| {
        chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
    }));
    out
}

pub fn decode_bits(kind: MessageKind, payload: &[u8]) -> Result<Vec<bool>> {
    let bad = |reason: &str| ProtoError::MalformedPayload {
        kind,
        reason: reason.to_string(),
    };
    let count = u32::from_le_bytes(payload.get(..4).ok_or_else(|| bad("missing bit count"))?.try_into().expect("4 bytes")) as usize;
    let body = &payload[4..];
    if body.len() != count.div_ceil(8) {
        return Err(bad("bit count does not match packed length"));
    }
    Ok((0..count).map(|i| body[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

pub fn encode_indices(indices: &[u32]) -> Vec<u8> {
    indices.iter().flat_map(|i| i.to_le_bytes()).collect()
}

pub fn decode_indices(kind: MessageKind, payload: &[u8]) -> Result<Vec<u32>> {
    if !payload.len().is_multiple_of(4) {
        return Err(ProtoError::MalformedPayload {
            kind,
            reason: "index array not a multiple of 4 bytes".into(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn encode_sets(sets: &[Vec<u32>]) -> Vec<u8> {
    let mut words = vec![sets.len() as u32];
    for s in sets {
        words.push(s.len() as u32);
        words.extend_from_slice(s);
    }
    encode_indices(&words)
}

fn decode_sets(payload: &[u8], n_bits: usize) -> Result<Vec<Vec<u32>>> {
    let words = decode_indices(MessageKind::ParityQuery, payload)?;
    let bad = |reason: &str| ProtoError::MalformedPayload {
        kind: MessageKind::ParityQuery,
        reason: reason.to_string(),
    };
    let (&n_sets, mut rest) = words.split_first().ok_or_else(|| bad("empty query"))?;
    let mut sets = Vec::with_capacity(n_sets as usize);
    for _ in 0..n_sets {
        let (&len, tail) = rest.split_first().ok_or_else(|| bad("missing set length"))?;
        let len = len as usize;
        if tail.len() < len {
            return Err(bad("set runs past payload"));
        }
        if tail[..len].iter().any(|&i| i as usize >= n_bits) {
            return Err(bad("index outside the raw key"));
        }
        sets.push(tail[..len].to_vec());
        rest = &tail[len..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing words"));
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortStage {
    Sifting = 0,
    Estimation = 1,
    Reconciliation = 2,
    Amplification = 3,
}

impl AbortStage {
    pub fn name(self) -> &'static str {
        match self {
            AbortStage::Sifting => "sifting",
            AbortStage::Estimation => "estimation",
            AbortStage::Reconciliation => "reconciliation",
            AbortStage::Amplification => "amplification",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Sifting,
            1 => Self::Estimation,
            2 => Self::Reconciliation,
            3 => Self::Amplification,
            _ => return None,
        })
    }
}

fn abort_message(stage: AbortStage, reason: &str) -> ProtocolMessage {
    let mut payload = vec![stage as u8];
    payload.extend(reason.bytes().take(MAX_ABORT_PAYLOAD - 1));
    ProtocolMessage {
        kind: MessageKind::Abort,
        payload,
    }
}

fn parse_abort(payload: &[u8]) -> Result<(AbortStage, String)> {
    let stage = payload.first().copied().and_then(AbortStage::from_byte).ok_or(ProtoError::MalformedPayload {
        kind: MessageKind::Abort,
        reason: "unknown stage".into(),
    })?;
    Ok((stage, String::from_utf8_lossy(&payload[1..]).into_owned()))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const ROUND_STREAM: u64 = 0;
const ALICE_STREAM: u64 = 1;
const BOB_STREAM: u64 = 2;

/// Draws rounds from a computed run: herald flag, uniform settings, then the
/// outcome pair from the conditional table. Every round consumes the same
/// random draws whether or not it is heralded.
pub fn simulate_from_run(res: &RunResult, n: usize, seed: u64) -> Result<Vec<RoundRecord>> {
    if n == 0 {
        return Err(ProtoError::NoRounds);
    }
    let table = &res.table;
    let (m_a, m_b, o_a, o_b) = table.shape();
    let mut rng = rng_for(seed, ROUND_STREAM);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let heralded = rng.gen::<f64>() < res.herald_probability;
        let x = rng.gen_range(0..m_a);
        let y = rng.gen_range(0..m_b);
        let u: f64 = rng.gen();
        let (mut a, mut b) = (0, 0);
        if heralded {
            (a, b) = sample_outcome(table, x, y, u, o_a, o_b);
        }
        out.push(RoundRecord {
            index: i as u32,
            x: x as u8,
            y: y as u8,
            a: a as u8,
            b: b as u8,
            heralded,
        });
    }
    Ok(out)
}

fn sample_outcome(table: &CorrelationTable, x: usize, y: usize, u: f64, o_a: usize, o_b: usize) -> (usize, usize) {
    let mut acc = 0.0;
    let mut last = (0, 0);
    for a in 0..o_a {
        for b in 0..o_b {
            let p = table.get(a, b, x, y);
            if p > 0.0 {
                last = (a, b);
            }
            acc += p;
            if u < acc {
                return (a, b);
            }
        }
    }
    last
}

pub fn simulate_rounds(s: &Scenario, n: usize, seed: u64) -> Result<Vec<RoundRecord>> {
    let res = architectures::run(s)?;
    simulate_from_run(&res, n, seed)
}

/// Raw keys and the published sample, from both parties' records.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftResult {
    pub alice_raw: Vec<bool>,
    pub bob_raw: Vec<bool>,
    /// Round indices of the raw key, in order.
    pub key_rounds: Vec<u32>,
    /// Round indices published for estimation, in order.
    pub sample: Vec<u32>,
}

/// Splits heralded rounds into raw key and estimation sample. The sample is
/// every heralded round outside the key setting pair plus a random
/// `sample_fraction` of the key-setting rounds.
pub fn sift<R: Rng>(records: &[RoundRecord], config: &SessionConfig, rng: &mut R) -> std::result::Result<SiftResult, String> {
    let heralded: Vec<&RoundRecord> = records.iter().filter(|r| r.heralded).collect();
    let settings: Vec<(u8, u8)> = heralded.iter().map(|r| (r.x, r.y)).collect();
    let plan = plan_sample(&heralded.iter().map(|r| r.index).collect::<Vec<_>>(), &settings, config, rng)?;
    let by_index = |i: u32| heralded.iter().find(|r| r.index == i).copied();
    let mut alice_raw = Vec::new();
    let mut bob_raw = Vec::new();
    for &i in &plan.key_rounds {
        let r = by_index(i).expect("key round is heralded");
        alice_raw.push(r.a == 1);
        bob_raw.push(r.b == 1);
    }
    Ok(SiftResult {
        alice_raw,
        bob_raw,
        key_rounds: plan.key_rounds,
        sample: plan.sample,
    })
}

struct SamplePlan {
    key_rounds: Vec<u32>,
    sample: Vec<u32>,
}

fn plan_sample<R: Rng>(indices: &[u32], settings: &[(u8, u8)], config: &SessionConfig, rng: &mut R) -> std::result::Result<SamplePlan, String> {
    let key_pos: Vec<usize> = (0..indices.len())
        .filter(|&k| settings[k] == (RAW_X as u8, RAW_Y as u8))
        .collect();
    let n_sample = (config.sample_fraction * key_pos.len() as f64).floor() as usize;
    let n_sample = n_sample.min(key_pos.len());
    let mut chosen = vec![false; indices.len()];
    for k in index::sample(rng, key_pos.len(), n_sample).into_iter() {
        chosen[key_pos[k]] = true;
    }
    let mut key_rounds = Vec::new();
    let mut sample = Vec::new();
    for k in 0..indices.len() {
        if settings[k] == (RAW_X as u8, RAW_Y as u8) && !chosen[k] {
            key_rounds.push(indices[k]);
        } else {
            sample.push(indices[k]);
        }
    }
    if key_rounds.len() < config.min_raw_rounds.max(1) {
        return Err(format!(
            "{} raw rounds, need {}",
            key_rounds.len(),
            config.min_raw_rounds.max(1)
        ));
    }
    Ok(SamplePlan { key_rounds, sample })
}

/// Plug-in estimates with Hoeffding radii.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub s_hat: f64,
    pub q_hat: f64,
    pub s_radius: f64,
    pub q_radius: f64,
    /// Samples per CHSH setting pair `(0,1), (0,2), (1,1), (1,2)` and for Q.
    pub counts: [usize; 5],
}

impl Estimate {
    /// Key rate at the worst-case corner `(S − radius, Q + radius)`.
    pub fn worst_case_rate(&self) -> f64 {
        secret_fraction(self.s_hat - self.s_radius, (self.q_hat + self.q_radius).min(0.5))
    }
}

const CHSH_TERMS: [(u8, u8, f64); 4] = [(0, 1, 1.0), (0, 2, 1.0), (1, 1, 1.0), (1, 2, -1.0)];

/// `samples` are `(x, y, a, b)` tuples from the published rounds.
pub fn estimate(samples: &[(u8, u8, u8, u8)], config: &SessionConfig) -> std::result::Result<Estimate, String> {
    let delta = config.confidence_delta / 5.0;
    let log_term = (2.0 / delta).ln();
    let mut counts = [0usize; 5];
    let mut s_hat = 0.0;
    let mut s_radius = 0.0;
    for (k, &(x, y, sign)) in CHSH_TERMS.iter().enumerate() {
        let (n, sum) = samples
            .iter()
            .filter(|s| s.0 == x && s.1 == y)
            .fold((0usize, 0.0), |(n, acc), s| (n + 1, acc + if s.2 == s.3 { 1.0 } else { -1.0 }));
        if n == 0 {
            return Err(format!("no sample for setting pair ({x},{y})"));
        }
        counts[k] = n;
        s_hat += sign * sum / n as f64;
        s_radius += (2.0 * log_term / n as f64).sqrt();
    }
    let (nq, errors) = samples
        .iter()
        .filter(|s| s.0 == RAW_X as u8 && s.1 == RAW_Y as u8)
        .fold((0usize, 0usize), |(n, e), s| (n + 1, e + usize::from(s.2 != s.3)));
    if nq == 0 {
        return Err("no sample for the key setting pair".into());
    }
    counts[4] = nq;
    Ok(Estimate {
        s_hat,
        q_hat: errors as f64 / nq as f64,
        s_radius,
        q_radius: (log_term / (2.0 * nq as f64)).sqrt(),
        counts,
    })
}

fn parity(bits: &[bool], set: &[u32]) -> bool {
    set.iter().fold(false, |acc, &i| acc ^ bits[i as usize])
}

/// Bit positions packed into u64 words, MSB-first within the logical order.
fn pack(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// 64 bits of `words` starting at bit `start` (bits past the end read as 0).
fn window(words: &[u64], start: usize) -> u64 {
    let (w, s) = (start / 64, start % 64);
    let lo = words.get(w).copied().unwrap_or(0) >> s;
    let hi = if s == 0 { 0 } else { words.get(w + 1).copied().unwrap_or(0) << (64 - s) };
    lo | hi
}

/// Toeplitz hash `h = T x` over GF(2) with `T[i][j] = r[i − j + n − 1]`, the
/// `n + out_len − 1` diagonal bits drawn from a ChaCha stream keyed by `seed`.
pub fn toeplitz_hash(bits: &[bool], out_len: usize, seed: &[u8; SEED_BYTES]) -> Vec<bool> {
    let n = bits.len();
    if n == 0 || out_len == 0 {
        return vec![false; out_len];
    }
    let mut rng = ChaCha20Rng::from_seed(*seed);
    let n_diag = n + out_len - 1;
    let diag: Vec<u64> = (0..n_diag.div_ceil(64)).map(|_| rng.next_u64()).collect();
    // Row i is r[i .. i + n] against x reversed.
    let reversed: Vec<bool> = bits.iter().rev().copied().collect();
    let x = pack(&reversed);
    let tail_bits = n % 64;
    (0..out_len)
        .map(|i| {
            let mut acc = 0u64;
            for (k, &xw) in x.iter().enumerate() {
                let mut w = window(&diag, i + 64 * k);
                if k == x.len() - 1 && tail_bits != 0 {
                    w &= (1u64 << tail_bits) - 1;
                }
                acc ^= w & xw;
            }
            acc.count_ones() % 2 == 1
        })
        .collect()
}

/// Output length `max(0, floor(n·r) − leakage − margin)`.
pub fn amplified_length(n: usize, leakage_bits: u64, rate: f64, margin: usize) -> usize {
    let budget = (n as f64 * rate.max(0.0)).floor() as i128 - leakage_bits as i128 - margin as i128;
    budget.max(0) as usize
}

/// Privacy amplification; `None` when no secret bits remain.
pub fn privacy_amplify(bits: &[bool], leakage_bits: u64, rate: f64, margin: usize, seed: &[u8; SEED_BYTES]) -> Option<Vec<bool>> {
    let len = amplified_length(bits.len(), leakage_bits, rate, margin);
    (len > 0).then(|| toeplitz_hash(bits, len, seed))
}

/// Bob's side of the two-pass parity bisection.
#[derive(Debug, Clone)]
struct Cascade {
    passes: Vec<Vec<Vec<u32>>>,
    pass: usize,
    /// Sets awaiting a parity; `None` while a whole-block query is pending.
    active: Vec<Vec<u32>>,
    bisecting: bool,
    corrections: usize,
}

impl Cascade {
    fn new(n: usize, q_hat: f64, permutation_seed: &[u8; SEED_BYTES]) -> Self {
        let block = if q_hat > 0.0 {
            ((0.73 / q_hat).ceil() as usize).clamp(1, n.max(1))
        } else {
            n.max(1)
        };
        let first: Vec<u32> = (0..n as u32).collect();
        let mut second = first.clone();
        second.shuffle(&mut ChaCha20Rng::from_seed(*permutation_seed));
        let blocks = |order: &[u32], size: usize| order.chunks(size.max(1)).map(<[u32]>::to_vec).collect::<Vec<_>>();
        Self {
            passes: vec![blocks(&first, block), blocks(&second, (2 * block).min(n.max(1)))],
            pass: 0,
            active: Vec::new(),
            bisecting: false,
            corrections: 0,
        }
    }

    /// First query of the current pass, or `None` when all passes are done.
    fn start_pass(&mut self) -> Option<Vec<Vec<u32>>> {
        let sets = self.passes.get(self.pass)?.clone();
        if sets.is_empty() {
            return None;
        }
        self.active = sets.clone();
        self.bisecting = false;
        Some(sets)
    }

    /// Applies Alice's parities; returns the next query if any.
    fn on_reply(&mut self, bob: &mut [bool], parities: &[bool]) -> Option<Vec<Vec<u32>>> {
        if !self.bisecting {
            // Whole-block parities: keep the blocks that disagree.
            let blocks = std::mem::take(&mut self.active);
            self.active = blocks
                .into_iter()
                .zip(parities)
                .filter(|(set, &p)| parity(bob, set) != p)
                .map(|(set, _)| set)
                .collect();
            self.bisecting = true;
        } else {
            // Parities of the left halves decide which half holds the error.
            let sets = std::mem::take(&mut self.active);
            self.active = sets
                .into_iter()
                .zip(parities)
                .map(|(set, &p)| {
                    let half = set.len() / 2;
                    if parity(bob, &set[..half]) != p {
                        set[..half].to_vec()
                    } else {
                        set[half..].to_vec()
                    }
                })
                .collect();
        }
        let (done, pending): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active).into_iter().partition(|s| s.len() == 1);
        for s in done {
            bob[s[0] as usize] ^= true;
            self.corrections += 1;
        }
        self.active = pending;
        if !self.active.is_empty() {
            return Some(self.active.iter().map(|s| s[..s.len() / 2].to_vec()).collect());
        }
        self.pass += 1;
        self.start_pass()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconciled {
    pub corrected: Vec<bool>,
    pub leakage_bits: u64,
    pub corrections: usize,
}

/// Two-pass parity bisection of Bob's bits toward Alice's, followed by a
/// `verification_bits`-bit hash comparison. Leakage counts every disclosed
/// parity and hash bit.
pub fn reconcile(
    alice: &[bool],
    bob: &[bool],
    q_hat: f64,
    permutation_seed: &[u8; SEED_BYTES],
    verification_seed: &[u8; SEED_BYTES],
    verification_bits: usize,
) -> Result<std::result::Result<Reconciled, u64>> {
    if alice.len() != bob.len() {
        return Err(ProtoError::LengthMismatch(alice.len(), bob.len()));
    }
    let mut corrected = bob.to_vec();
    let mut cascade = Cascade::new(alice.len(), q_hat, permutation_seed);
    let mut leakage = 0u64;
    let mut query = cascade.start_pass();
    while let Some(sets) = query {
        let replies: Vec<bool> = sets.iter().map(|s| parity(alice, s)).collect();
        leakage += replies.len() as u64;
        query = cascade.on_reply(&mut corrected, &replies);
    }
    leakage += verification_bits as u64;
    let ok = toeplitz_hash(alice, verification_bits, verification_seed) == toeplitz_hash(&corrected, verification_bits, verification_seed);
    Ok(if ok {
        Ok(Reconciled {
            corrected,
            leakage_bits: leakage,
            corrections: cascade.corrections,
        })
    } else {
        Err(leakage)
    })
}

fn random_seed<R: RngCore>(rng: &mut R) -> [u8; SEED_BYTES] {
    let mut seed = [0u8; SEED_BYTES];
    rng.fill_bytes(&mut seed);
    seed
}

fn seed_payload(kind: MessageKind, payload: &[u8]) -> Result<[u8; SEED_BYTES]> {
    payload.try_into().map_err(|_| ProtoError::MalformedPayload {
        kind,
        reason: "seed must be 32 bytes".into(),
    })
}

/// A party's local view of one heralded round.
#[derive(Debug, Clone, Copy)]
struct LocalRound {
    index: u32,
    setting: u8,
    outcome: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionStatus {
    Key,
    Abort { stage: AbortStage, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    AwaitBasis,
    AwaitSampleIndices,
    AwaitSampleValues,
    Reconciling,
    AwaitVerification,
    AwaitAmplification,
    AwaitDone,
    Done,
    Aborted,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Start => "start",
            Phase::AwaitBasis => "await-basis",
            Phase::AwaitSampleIndices => "await-sample-indices",
            Phase::AwaitSampleValues => "await-sample-values",
            Phase::Reconciling => "reconciling",
            Phase::AwaitVerification => "await-verification",
            Phase::AwaitAmplification => "await-amplification",
            Phase::AwaitDone => "await-done",
            Phase::Done => "done",
            Phase::Aborted => "aborted",
        }
    }

    fn terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Aborted)
    }
}

/// State shared by both machines.
struct PartyState {
    role: Party,
    config: SessionConfig,
    rng: ChaCha20Rng,
    rounds: Vec<LocalRound>,
    phase: Phase,
    peer_settings: Vec<u8>,
    sample: Vec<u32>,
    own_sample_bits: Vec<bool>,
    raw: Vec<bool>,
    estimate: Option<Estimate>,
    rate: f64,
    leakage: u64,
    key: Vec<bool>,
    abort: Option<(AbortStage, String)>,
    cascade: Option<Cascade>,
    verification_seed: Option<[u8; SEED_BYTES]>,
}

impl PartyState {
    fn new(role: Party, config: SessionConfig, rounds: Vec<LocalRound>, seed: u64) -> Self {
        let stream = match role {
            Party::Alice => ALICE_STREAM,
            Party::Bob => BOB_STREAM,
        };
        Self {
            role,
            config,
            rng: rng_for(seed, stream),
            rounds,
            phase: Phase::Start,
            peer_settings: Vec::new(),
            sample: Vec::new(),
            own_sample_bits: Vec::new(),
            raw: Vec::new(),
            estimate: None,
            rate: 0.0,
            leakage: 0,
            key: Vec::new(),
            abort: None,
            cascade: None,
            verification_seed: None,
        }
    }

    fn settings_payload(&self) -> Vec<u8> {
        self.rounds.iter().map(|r| r.setting).collect()
    }

    fn joint_settings(&self) -> Vec<(u8, u8)> {
        self.rounds
            .iter()
            .zip(&self.peer_settings)
            .map(|(r, &p)| match self.role {
                Party::Alice => (r.setting, p),
                Party::Bob => (p, r.setting),
            })
            .collect()
    }

    fn record_basis(&mut self, payload: &[u8]) -> Result<()> {
        if payload.len() != self.rounds.len() {
            return Err(ProtoError::MalformedPayload {
                kind: MessageKind::BasisAnnounce,
                reason: format!("{} settings for {} heralded rounds", payload.len(), self.rounds.len()),
            });
        }
        self.peer_settings = payload.to_vec();
        Ok(())
    }

    /// Adopts the published sample and derives the raw key.
    fn adopt_sample(&mut self, sample: Vec<u32>) -> Result<()> {
        let settings = self.joint_settings();
        let mut in_sample = vec![false; self.rounds.len()];
        let mut pos = 0;
        for &idx in &sample {
            while pos < self.rounds.len() && self.rounds[pos].index < idx {
                pos += 1;
            }
            if pos == self.rounds.len() || self.rounds[pos].index != idx {
                return Err(ProtoError::MalformedPayload {
                    kind: MessageKind::SampleIndices,
                    reason: format!("round {idx} is not a heralded round"),
                });
            }
            in_sample[pos] = true;
        }
        self.own_sample_bits = self
            .rounds
            .iter()
            .zip(&in_sample)
            .filter(|(_, &s)| s)
            .map(|(r, _)| r.outcome == 1)
            .collect();
        self.raw = self
            .rounds
            .iter()
            .zip(&settings)
            .zip(&in_sample)
            .filter(|((_, &st), &s)| !s && st == (RAW_X as u8, RAW_Y as u8))
            .map(|((r, _), _)| r.outcome == 1)
            .collect();
        self.sample = sample;
        Ok(())
    }

    fn estimate_from(&mut self, peer_bits: &[bool]) -> std::result::Result<(), String> {
        if peer_bits.len() != self.own_sample_bits.len() {
            return Err("sample value count mismatch".into());
        }
        let settings = self.joint_settings();
        let setting_of = |idx: u32| {
            let k = self.rounds.binary_search_by_key(&idx, |r| r.index).expect("sample validated");
            settings[k]
        };
        let samples: Vec<(u8, u8, u8, u8)> = self
            .sample
            .iter()
            .zip(self.own_sample_bits.iter().zip(peer_bits))
            .map(|(&idx, (&own, &peer))| {
                let (x, y) = setting_of(idx);
                let (a, b) = match self.role {
                    Party::Alice => (own, peer),
                    Party::Bob => (peer, own),
                };
                (x, y, u8::from(a), u8::from(b))
            })
            .collect();
        let est = estimate(&samples, &self.config)?;
        self.rate = est.worst_case_rate();
        let lower = est.s_hat - est.s_radius;
        self.estimate = Some(est);
        if lower <= 2.0 {
            return Err(format!("CHSH lower bound {lower:.4} does not exceed 2"));
        }
        Ok(())
    }

    fn abort(&mut self, stage: AbortStage, reason: String) -> Vec<ProtocolMessage> {
        self.phase = Phase::Aborted;
        let msg = abort_message(stage, &reason);
        self.abort = Some((stage, reason));
        vec![msg]
    }

    fn unexpected(&self, kind: MessageKind) -> ProtoError {
        ProtoError::UnexpectedMessage {
            kind,
            state: self.phase.name(),
        }
    }

    fn amplification_length(&self) -> usize {
        amplified_length(self.raw.len(), self.leakage, self.rate, self.config.security_margin)
    }
}

fn msg(kind: MessageKind, payload: Vec<u8>) -> ProtocolMessage {
    ProtocolMessage { kind, payload }
}

struct AliceMachine(PartyState);
struct BobMachine(PartyState);

impl AliceMachine {
    fn start(&mut self) -> Vec<ProtocolMessage> {
        self.0.phase = Phase::AwaitBasis;
        vec![msg(MessageKind::BasisAnnounce, self.0.settings_payload())]
    }

    fn handle(&mut self, m: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let st = &mut self.0;
        if m.kind == MessageKind::Abort {
            let (stage, reason) = parse_abort(&m.payload)?;
            st.phase = Phase::Aborted;
            st.abort = Some((stage, reason));
            return Ok(vec![]);
        }
        match (st.phase, m.kind) {
            (Phase::AwaitBasis, MessageKind::BasisAnnounce) => {
                st.record_basis(&m.payload)?;
                let indices: Vec<u32> = st.rounds.iter().map(|r| r.index).collect();
                let settings = st.joint_settings();
                let plan = match plan_sample(&indices, &settings, &st.config, &mut st.rng) {
                    Ok(p) => p,
                    Err(reason) => return Ok(st.abort(AbortStage::Sifting, reason)),
                };
                st.adopt_sample(plan.sample)?;
                st.phase = Phase::AwaitSampleValues;
                Ok(vec![
                    msg(MessageKind::SampleIndices, encode_indices(&st.sample)),
                    msg(MessageKind::SampleValues, encode_bits(&st.own_sample_bits)),
                ])
            }
            (Phase::AwaitSampleValues, MessageKind::SampleValues) => {
                let peer = decode_bits(m.kind, &m.payload)?;
                if let Err(reason) = st.estimate_from(&peer) {
                    return Ok(st.abort(AbortStage::Estimation, reason));
                }
                st.phase = Phase::Reconciling;
                Ok(vec![msg(MessageKind::HashSeed, random_seed(&mut st.rng).to_vec())])
            }
            (Phase::Reconciling, MessageKind::ParityQuery) => {
                let sets = decode_sets(&m.payload, st.raw.len())?;
                let parities: Vec<bool> = sets.iter().map(|s| parity(&st.raw, s)).collect();
                st.leakage += parities.len() as u64;
                Ok(vec![msg(MessageKind::ParityReply, encode_bits(&parities))])
            }
            (Phase::Reconciling, MessageKind::HashSeed) => {
                let seed = seed_payload(m.kind, &m.payload)?;
                let hash = toeplitz_hash(&st.raw, st.config.verification_bits, &seed);
                st.leakage += hash.len() as u64;
                let mut out = vec![msg(MessageKind::ParityReply, encode_bits(&hash))];
                let len = st.amplification_length();
                if len == 0 {
                    out.extend(st.abort(AbortStage::Amplification, "no secret bits remain after leakage".into()));
                    return Ok(out);
                }
                let seed = random_seed(&mut st.rng);
                st.key = toeplitz_hash(&st.raw, len, &seed);
                st.phase = Phase::AwaitDone;
                out.push(msg(MessageKind::HashSeed, seed.to_vec()));
                Ok(out)
            }
            (Phase::AwaitDone, MessageKind::Done) => {
                st.phase = Phase::Done;
                Ok(vec![msg(MessageKind::Done, vec![])])
            }
            (_, kind) => Err(st.unexpected(kind)),
        }
    }
}

impl BobMachine {
    fn handle(&mut self, m: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let st = &mut self.0;
        if m.kind == MessageKind::Abort {
            let (stage, reason) = parse_abort(&m.payload)?;
            st.phase = Phase::Aborted;
            st.abort = Some((stage, reason));
            return Ok(vec![]);
        }
        match (st.phase, m.kind) {
            (Phase::Start, MessageKind::BasisAnnounce) => {
                st.record_basis(&m.payload)?;
                st.phase = Phase::AwaitSampleIndices;
                Ok(vec![msg(MessageKind::BasisAnnounce, st.settings_payload())])
            }
            (Phase::AwaitSampleIndices, MessageKind::SampleIndices) => {
                let sample = decode_indices(m.kind, &m.payload)?;
                st.adopt_sample(sample)?;
                st.phase = Phase::AwaitSampleValues;
                Ok(vec![])
            }
            (Phase::AwaitSampleValues, MessageKind::SampleValues) => {
                let peer = decode_bits(m.kind, &m.payload)?;
                let reply = msg(MessageKind::SampleValues, encode_bits(&st.own_sample_bits));
                // Alice reaches the same verdict and announces any abort.
                let _ = st.estimate_from(&peer);
                st.phase = Phase::Reconciling;
                Ok(vec![reply])
            }
            (Phase::Reconciling, MessageKind::HashSeed) if st.cascade.is_none() => {
                let seed = seed_payload(m.kind, &m.payload)?;
                let q_hat = st.estimate.as_ref().map_or(0.5, |e| e.q_hat);
                let mut cascade = Cascade::new(st.raw.len(), q_hat, &seed);
                let query = cascade.start_pass();
                st.cascade = Some(cascade);
                Ok(match query {
                    Some(sets) => vec![msg(MessageKind::ParityQuery, encode_sets(&sets))],
                    None => Self::request_verification(st),
                })
            }
            (Phase::Reconciling, MessageKind::ParityReply) => {
                let parities = decode_bits(m.kind, &m.payload)?;
                st.leakage += parities.len() as u64;
                let cascade = st.cascade.as_mut().expect("reconciliation started");
                Ok(match cascade.on_reply(&mut st.raw, &parities) {
                    Some(sets) => vec![msg(MessageKind::ParityQuery, encode_sets(&sets))],
                    None => Self::request_verification(st),
                })
            }
            (Phase::AwaitVerification, MessageKind::ParityReply) => {
                let theirs = decode_bits(m.kind, &m.payload)?;
                st.leakage += theirs.len() as u64;
                let seed = st.verification_seed.expect("seed sent");
                let ours = toeplitz_hash(&st.raw, st.config.verification_bits, &seed);
                if ours != theirs {
                    return Ok(st.abort(AbortStage::Reconciliation, "verification hash mismatch".into()));
                }
                st.phase = Phase::AwaitAmplification;
                Ok(vec![])
            }
            (Phase::AwaitAmplification, MessageKind::HashSeed) => {
                let seed = seed_payload(m.kind, &m.payload)?;
                let len = st.amplification_length();
                if len == 0 {
                    return Ok(st.abort(AbortStage::Amplification, "no secret bits remain after leakage".into()));
                }
                st.key = toeplitz_hash(&st.raw, len, &seed);
                st.phase = Phase::AwaitDone;
                Ok(vec![msg(MessageKind::Done, vec![])])
            }
            (Phase::AwaitDone, MessageKind::Done) => {
                st.phase = Phase::Done;
                Ok(vec![])
            }
            (_, kind) => Err(st.unexpected(kind)),
        }
    }

    fn request_verification(st: &mut PartyState) -> Vec<ProtocolMessage> {
        let seed = random_seed(&mut st.rng);
        st.verification_seed = Some(seed);
        st.phase = Phase::AwaitVerification;
        vec![msg(MessageKind::HashSeed, seed.to_vec())]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub status: SessionStatus,
    /// Alice's final key (empty on abort).
    pub key_bits: Vec<bool>,
    pub bob_key_bits: Vec<bool>,
    pub leakage_bits: u64,
    pub estimated_s: f64,
    pub estimated_q: f64,
    pub s_radius: f64,
    pub q_radius: f64,
    /// Worst-case key rate used for amplification.
    pub key_rate: f64,
    /// Raw key length after removing the published sample.
    pub n_raw: usize,
    pub transcript: Transcript,
}

impl SessionOutcome {
    pub fn keys_match(&self) -> bool {
        self.key_bits == self.bob_key_bits
    }
}

/// Upper bound on messages before the driver gives up.
const MAX_MESSAGES: usize = 1 << 20;

/// Runs both parties on given records through an ordered in-process channel.
pub fn run_session_on_records(records: &[RoundRecord], config: &SessionConfig, seed: u64) -> Result<SessionOutcome> {
    let heralded: Vec<&RoundRecord> = records.iter().filter(|r| r.heralded).collect();
    let local = |f: fn(&RoundRecord) -> (u8, u8)| -> Vec<LocalRound> {
        heralded
            .iter()
            .map(|r| {
                let (setting, outcome) = f(r);
                LocalRound {
                    index: r.index,
                    setting,
                    outcome,
                }
            })
            .collect()
    };
    let mut alice = AliceMachine(PartyState::new(Party::Alice, config.clone(), local(|r| (r.x, r.a)), seed));
    let mut bob = BobMachine(PartyState::new(Party::Bob, config.clone(), local(|r| (r.y, r.b)), seed));

    let mut transcript = Transcript::default();
    let mut queue: VecDeque<(Party, ProtocolMessage)> = alice.start().into_iter().map(|m| (Party::Alice, m)).collect();
    while let Some((sender, message)) = queue.pop_front() {
        if transcript.entries.len() >= MAX_MESSAGES {
            return Err(ProtoError::Runaway(MAX_MESSAGES));
        }
        message.check_length()?;
        transcript.entries.push(TranscriptEntry {
            seq: transcript.entries.len() as u32,
            sender,
            message: message.clone(),
        });
        let replies = match sender.peer() {
            Party::Alice if !alice.0.phase.terminal() => alice.handle(&message)?,
            Party::Bob if !bob.0.phase.terminal() => bob.handle(&message)?,
            _ => vec![],
        };
        queue.extend(replies.into_iter().map(|m| (sender.peer(), m)));
    }

    let status = match (&alice.0.abort, &bob.0.abort) {
        (Some((stage, reason)), _) | (None, Some((stage, reason))) => SessionStatus::Abort {
            stage: *stage,
            reason: reason.clone(),
        },
        (None, None) if alice.0.phase == Phase::Done && bob.0.phase == Phase::Done => SessionStatus::Key,
        _ => SessionStatus::Abort {
            stage: AbortStage::Reconciliation,
            reason: "session stalled".into(),
        },
    };
    let est = alice.0.estimate.clone();
    let keyed = status == SessionStatus::Key;
    Ok(SessionOutcome {
        key_bits: if keyed { alice.0.key.clone() } else { vec![] },
        bob_key_bits: if keyed { bob.0.key.clone() } else { vec![] },
        leakage_bits: alice.0.leakage,
        estimated_s: est.as_ref().map_or(f64::NAN, |e| e.s_hat),
        estimated_q: est.as_ref().map_or(f64::NAN, |e| e.q_hat),
        s_radius: est.as_ref().map_or(f64::NAN, |e| e.s_radius),
        q_radius: est.as_ref().map_or(f64::NAN, |e| e.q_radius),
        key_rate: alice.0.rate,
        n_raw: alice.0.raw.len(),
        status,
        transcript,
    })
}

/// Simulates `n` rounds of the scenario and runs the full protocol on them.
pub fn run_session(s: &Scenario, n: usize, seed: u64) -> Result<SessionOutcome> {
    run_session_with(s, n, seed, &SessionConfig::default())
}

pub fn run_session_with(s: &Scenario, n: usize, seed: u64, config: &SessionConfig) -> Result<SessionOutcome> {
    let records = simulate_rounds(s, n, seed)?;
    run_session_on_records(&records, config, seed)
}
