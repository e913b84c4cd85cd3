//! Counter-based random streams.
//!
//! A draw is a pure function of `(seed, stream, counter)`: the ChaCha8 block
//! function keyed by `seed`, nonce `stream`, at word position `2 * counter`.
//! Sub-streams are carved out by appending a 16-bit digit to the stream id,
//! so distinct split paths never share a stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const DIGIT_BITS: u32 = 16;
const MAX_PARENT: u64 = 1 << (64 - DIGIT_BITS);

/// Position of a counter-based stream. Enough to replay it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    counter: u64,
    core: ChaCha8Rng,
}

impl RngState {
    /// Root stream. Root ids used with [`RngState::split`] must lie in
    /// `1..=65535`; larger ids are reserved for split children.
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(RngPosition {
            seed,
            stream,
            counter: 0,
        })
    }

    /// Rebuild a stream at a recorded position.
    pub fn at(pos: RngPosition) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(pos.seed);
        core.set_stream(pos.stream);
        core.set_word_pos(u128::from(pos.counter) * 2);
        Self {
            seed: pos.seed,
            stream: pos.stream,
            counter: pos.counter,
            core,
        }
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.stream,
            counter: self.counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream identified by `tag`, starting at counter 0.
    ///
    /// Panics if `tag == u16::MAX`, if this stream is the reserved id 0, or if
    /// the split depth (four levels) is exhausted.
    pub fn split(&self, tag: u16) -> Self {
        assert!(tag < u16::MAX, "split tag {tag} is reserved");
        assert!(self.stream != 0, "stream 0 cannot be split");
        assert!(self.stream < MAX_PARENT, "stream split depth exhausted");
        let child = (self.stream << DIGIT_BITS) | (u64::from(tag) + 1);
        Self::new(self.seed, child)
    }

    /// One raw 64-bit draw; advances the counter by exactly one.
    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_raw() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (`n > 0`), by widening multiply.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_raw()) * n as u128) >> 64) as usize
    }
}

// Every RngCore method consumes whole 64-bit draws so the counter always
// equals the number of draws taken.
impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
