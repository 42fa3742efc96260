//! Range-variant asymmetric numeral systems (rANS) over integer frequency
//! tables.
//!
//! The state is a 64-bit head plus a stack of 32-bit words. The head stays in
//! `[2³², 2⁶⁴)` between operations: a push that would overflow first moves
//! the low 32 bits of the head onto the stack, and a pop that drops the head
//! below 2³² pulls a word back. Pushing and popping are exact inverses, so
//! the coder behaves as a stack of symbols.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Lower bound of the head between operations.
pub const HEAD_MIN: u64 = 1 << 32;

/// Largest supported table precision in bits.
pub const MAX_PRECISION: u32 = 31;

/// Generator used by [`seed_state`]: ChaCha20 seeded through
/// `SeedableRng::seed_from_u64`, one `next_u32` per word.
pub const SEED_GENERATOR: &str = "chacha20-u64seed-v1";

/// Integer probability table whose frequencies sum to `2^precision`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPmf {
    precision: u32,
    freqs: Vec<u32>,
    // n + 1 entries; the last is 2^precision.
    cum: Vec<u32>,
}

impl QuantizedPmf {
    /// Builds a table from explicit frequencies.
    pub fn from_freqs(freqs: Vec<u32>, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        if freqs.is_empty() {
            return Err(Error::config("empty frequency table"));
        }
        if let Some(i) = freqs.iter().position(|&f| f == 0) {
            return Err(Error::config(format!("symbol {i} has zero frequency")));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > 1 << precision {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != 1 << precision {
            return Err(Error::config(format!(
                "frequencies sum to {acc}, expected 2^{precision}"
            )));
        }
        Ok(Self {
            precision,
            freqs,
            cum,
        })
    }

    /// Every symbol equally likely. `n` must divide `2^precision`.
    pub fn uniform(n: usize, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        let total = 1u64 << precision;
        if n == 0 || total % n as u64 != 0 {
            return Err(Error::config(format!(
                "{n} symbols do not divide 2^{precision}"
            )));
        }
        Self::from_freqs(vec![(total / n as u64) as u32; n], precision)
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Exclusive prefix sums, one per symbol.
    pub fn cum(&self) -> &[u32] {
        &self.cum[..self.freqs.len()]
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.freqs[symbol]
    }

    /// Probability of `symbol` as represented in the table.
    pub fn prob(&self, symbol: usize) -> f64 {
        self.freqs[symbol] as f64 / (1u64 << self.precision) as f64
    }

    /// Information content of `symbol` in bits.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        self.precision as f64 - (self.freqs[symbol] as f64).log2()
    }

    fn symbol_for(&self, slot: u32) -> usize {
        self.cum.partition_point(|&c| c <= slot) - 1
    }
}

fn check_precision(precision: u32) -> Result<()> {
    if precision == 0 || precision > MAX_PRECISION {
        return Err(Error::config(format!(
            "precision {precision} outside 1..={MAX_PRECISION}"
        )));
    }
    Ok(())
}

/// Quantizes real probabilities to a table summing to `2^precision`.
///
/// Each symbol first receives one unit; the remaining `2^precision − n` units
/// are apportioned by largest remainder, ties going to the lowest index.
/// The input is renormalized, so it only needs to sum to 1 within `1e-4`.
pub fn quantize_pmf(probs: &[f64], precision: u32) -> Result<QuantizedPmf> {
    check_precision(precision)?;
    let n = probs.len();
    let total = 1u64 << precision;
    if n == 0 {
        return Err(Error::config("empty probability vector"));
    }
    if n as u64 > total {
        return Err(Error::config(format!(
            "{n} symbols exceed 2^{precision} slots"
        )));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Domain(format!("invalid probability {p}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Domain(format!("probabilities sum to {sum}")));
    }

    let spare = (total - n as u64) as f64;
    let mut freqs = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    let mut assigned = 0i64;
    for &p in probs {
        let quota = spare * (p / sum);
        let whole = quota.floor();
        freqs.push(1 + whole as u32);
        remainders.push(quota - whole);
        assigned += whole as i64;
    }
    let leftover = (total - n as u64) as i64 - assigned;

    // Largest remainder first, lowest index on ties.
    let order = |a: &usize, b: &usize| {
        remainders[*b]
            .partial_cmp(&remainders[*a])
            .expect("finite remainders")
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..n).collect();
    if leftover > 0 {
        let k = leftover as usize;
        if k < n {
            idx.select_nth_unstable_by(k - 1, order);
        }
        for &i in &idx[..k.min(n)] {
            freqs[i] += 1;
        }
    } else if leftover < 0 {
        // Rounding pushed the floors past the budget; take units back from
        // the smallest remainders among symbols that can spare one.
        idx.sort_by(|a, b| order(b, a));
        let mut owed = -leftover;
        for &i in &idx {
            if owed == 0 {
                break;
            }
            if freqs[i] > 1 {
                freqs[i] -= 1;
                owed -= 1;
            }
        }
    }
    QuantizedPmf::from_freqs(freqs, precision)
}

/// Coder state: 64-bit head and a LIFO stack of 32-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnsState {
    head: u64,
    stack: Vec<u32>,
}

impl Default for AnsState {
    fn default() -> Self {
        Self::new()
    }
}

impl AnsState {
    /// Empty state holding no information.
    pub fn new() -> Self {
        Self {
            head: HEAD_MIN,
            stack: Vec::new(),
        }
    }

    pub fn head(&self) -> u64 {
        self.head
    }

    pub fn words(&self) -> &[u32] {
        &self.stack
    }

    /// Exact size in bits: the significant bits of the head plus 32 per
    /// stacked word.
    pub fn bit_length(&self) -> u64 {
        32 * self.stack.len() as u64 + (64 - self.head.leading_zeros()) as u64
    }

    pub fn push(&mut self, symbol: usize, pmf: &QuantizedPmf) -> Result<()> {
        let Some(&freq) = pmf.freqs.get(symbol) else {
            return Err(Error::config(format!(
                "symbol {symbol} outside alphabet of {}",
                pmf.len()
            )));
        };
        let (freq, start, r) = (freq as u64, pmf.cum[symbol] as u64, pmf.precision);
        let limit = freq << (64 - r);
        if self.head >= limit {
            self.stack.push(self.head as u32);
            self.head >>= 32;
        }
        self.head = ((self.head / freq) << r) + (self.head % freq) + start;
        debug_assert!(self.head >= HEAD_MIN);
        Ok(())
    }

    /// Removes and returns the top symbol. On underflow the state is left
    /// unchanged.
    pub fn pop(&mut self, pmf: &QuantizedPmf) -> Result<usize> {
        let r = pmf.precision;
        let slot = (self.head & ((1u64 << r) - 1)) as u32;
        let symbol = pmf.symbol_for(slot);
        let (freq, start) = (pmf.freqs[symbol] as u64, pmf.cum[symbol] as u64);
        let mut head = freq * (self.head >> r) + slot as u64 - start;
        if head < HEAD_MIN {
            let Some(word) = self.stack.pop() else {
                return Err(Error::Underflow(format!(
                    "pop needs a word but the stack is empty (head {:#x})",
                    self.head
                )));
            };
            head = (head << 32) | word as u64;
        }
        self.head = head;
        Ok(symbol)
    }

    /// Head as 8 bytes little-endian, word count as u32, then the words.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.stack.len());
        out.extend(self.head.to_le_bytes());
        out.extend((self.stack.len() as u32).to_le_bytes());
        for w in &self.stack {
            out.extend(w.to_le_bytes());
        }
        out
    }

    /// Parses [`AnsState::to_bytes`] output; returns the state and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 12 {
            return Err(Error::stream("truncated ANS state header"));
        }
        let head = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let end = 12 + 4 * count;
        if bytes.len() < end {
            return Err(Error::stream(format!(
                "ANS state declares {count} words but is truncated"
            )));
        }
        if head < HEAD_MIN {
            return Err(Error::stream(format!("ANS head {head:#x} below 2^32")));
        }
        let stack = bytes[12..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((Self { head, stack }, end))
    }
}

/// State whose stack holds `n_words` pseudorandom words, used as the initial
/// bits that bits-back decoding consumes.
pub fn seed_state(n_words: usize, seed: u64) -> AnsState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    AnsState {
        head: HEAD_MIN,
        stack: (0..n_words).map(|_| rng.next_u32()).collect(),
    }
}
