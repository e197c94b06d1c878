//! Functional model of a set-associative last-level cache.
//!
//! The model is cycle-free: an access either hits or misses, misses insert the
//! line and may evict the least-recently-used resident of its set. Exact LRU
//! replacement is used instead of the pseudo-LRU found on real parts so that
//! behaviour can be checked against a brute-force recency-list oracle; this is
//! a known fidelity gap. Addressing is flat physical: line = addr / line_size,
//! set = line mod sets, with no virtual-memory translation.
//!
//! Two hardware prefetchers are modeled, just detailed enough that the usual
//! evasion techniques (probing only even sets, randomizing access order) have
//! observable effect:
//!   - spatial: a demand miss also fills the 128-byte pair line (line ^ 1),
//!   - streaming: three consecutive accesses by one owner at strictly
//!     increasing line numbers fill the line after the last one.

use arrayvec::ArrayVec;
use thiserror::Error;

/// Who inserted a cache line. Owners are address-disjoint by construction in
/// the rest of the pipeline, so a hit never changes ownership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Attacker,
    Victim,
    Masker,
    Prefetch,
}

impl Owner {
    pub const ALL: [Owner; 4] = [Owner::Attacker, Owner::Victim, Owner::Masker, Owner::Prefetch];

    fn index(self) -> usize {
        match self {
            Owner::Attacker => 0,
            Owner::Victim => 1,
            Owner::Masker => 2,
            Owner::Prefetch => 3,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("set count {0} is not a positive power of two")]
    SetsNotPowerOfTwo(usize),
    #[error("associativity must be positive")]
    ZeroWays,
    #[error("line size {0} is not a positive power of two")]
    LineSizeNotPowerOfTwo(usize),
    #[error("associativity {0} exceeds the supported maximum of 16")]
    TooManyWays(usize),
}

/// Geometry of the simulated LLC.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheConfig {
    pub sets: usize,
    pub ways: usize,
    pub line_size: usize,
    /// Run length of strictly ascending line accesses that arms the
    /// streaming prefetcher. The exact depth on real parts is not public;
    /// three is the modeled default.
    pub stream_trigger: u32,
}

impl CacheConfig {
    /// A cache with 64-byte lines and the default streaming trigger.
    pub fn new(sets: usize, ways: usize) -> Result<Self, ConfigError> {
        Self::with_line_size(sets, ways, 64)
    }

    pub fn with_line_size(sets: usize, ways: usize, line_size: usize) -> Result<Self, ConfigError> {
        let cfg = CacheConfig { sets, ways, line_size, stream_trigger: 3 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sets == 0 || !self.sets.is_power_of_two() {
            return Err(ConfigError::SetsNotPowerOfTwo(self.sets));
        }
        if self.ways == 0 {
            return Err(ConfigError::ZeroWays);
        }
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return Err(ConfigError::LineSizeNotPowerOfTwo(self.line_size));
        }
        Ok(())
    }

    /// Total capacity in bytes.
    pub fn capacity(&self) -> usize {
        self.sets * self.ways * self.line_size
    }

    /// Total line slots.
    pub fn total_lines(&self) -> usize {
        self.sets * self.ways
    }

    #[inline]
    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size as u64
    }

    #[inline]
    pub fn set_of_line(&self, line: u64) -> usize {
        (line & (self.sets as u64 - 1)) as usize
    }
}

/// Result of one demand access.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessOutcome {
    pub hit: bool,
    /// Line displaced by the demand insertion, if the set was full.
    pub evicted: Option<(u64, Owner)>,
    /// Lines brought in as prefetch side effects (at most the spatial pair
    /// line and one streamed line per access).
    pub prefetched: ArrayVec<u64, 2>,
}

#[derive(Clone, Copy, Debug, Default)]
struct StreamState {
    last_line: u64,
    run: u32,
}

/// Words per set block: slot 0 holds the fill count, slot 1 the recency
/// permutation (one nibble per way, most recent in the low nibble), then one
/// packed `tag << 2 | owner` word per way. Rounded to a power of two so one
/// set stays within one or two host cache lines.
fn block_stride(ways: usize) -> usize {
    (ways + 2).next_power_of_two()
}

const LEN_SLOT: usize = 0;
const ORDER_SLOT: usize = 1;
const TAGS_SLOT: usize = 2;

#[inline]
fn pack(tag: u64, owner: Owner) -> u64 {
    tag << 2 | owner.index() as u64
}

#[inline]
fn unpack(word: u64) -> (u64, Owner) {
    (word >> 2, Owner::ALL[(word & 3) as usize])
}

/// Mutable cache contents.
///
/// Per-set state lives in one contiguous block: resident tags plus a nibble
/// permutation tracking exact recency order. Recency order is total within
/// each set. The state has no internal sharing; each simulation owns one
/// exclusively.
#[derive(Clone, Debug)]
pub struct CacheState {
    config: CacheConfig,
    line_shift: u32,
    stride: usize,
    blocks: Vec<u64>,
    occupancy: [u64; 4],
    stream: [StreamState; 4],
}

impl CacheState {
    pub fn new(config: CacheConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        if config.ways > 16 {
            // The recency permutation packs one nibble per way.
            return Err(ConfigError::TooManyWays(config.ways));
        }
        let stride = block_stride(config.ways);
        Ok(CacheState {
            config,
            line_shift: config.line_size.trailing_zeros(),
            stride,
            blocks: vec![0; config.sets * stride],
            occupancy: [0; 4],
            stream: [StreamState::default(); 4],
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Number of resident lines inserted by `owner`.
    pub fn occupancy(&self, owner: Owner) -> u64 {
        self.occupancy[owner.index()]
    }

    /// Resident lines across all owners.
    pub fn total_occupancy(&self) -> u64 {
        self.occupancy.iter().sum()
    }

    /// Lines resident in one set, most recently used first.
    pub fn set_contents(&self, set: usize) -> Vec<(u64, Owner)> {
        let block = &self.blocks[set * self.stride..(set + 1) * self.stride];
        let len = block[LEN_SLOT] as usize;
        let order = block[ORDER_SLOT];
        (0..len)
            .map(|pos| {
                let way = (order >> (4 * pos)) & 0xf;
                unpack(block[TAGS_SLOT + way as usize])
            })
            .collect()
    }

    /// Performs one demand access and, when enabled, its prefetch side
    /// effects. On a miss the line is inserted most-recently-used; a full set
    /// evicts its least-recently-used line. On a hit the line becomes
    /// most-recently-used. Prefetch insertions may themselves evict within
    /// their own set but are not reported as the demand eviction.
    pub fn access(&mut self, addr: u64, owner: Owner, prefetchers_enabled: bool) -> AccessOutcome {
        let line = addr >> self.line_shift;
        let (hit, evicted) = self.touch(line, owner);
        let mut outcome = AccessOutcome { hit, evicted, prefetched: ArrayVec::new() };
        if prefetchers_enabled {
            let (spatial, stream) = self.run_prefetchers(line, owner, hit);
            outcome.prefetched.extend(spatial);
            outcome.prefetched.extend(stream);
        }
        outcome
    }

    /// Demand access without outcome bookkeeping; returns the hit flag.
    /// Semantically identical to [`CacheState::access`].
    #[inline]
    pub fn access_quiet(&mut self, addr: u64, owner: Owner, prefetchers_enabled: bool) -> bool {
        let line = addr >> self.line_shift;
        let (hit, _) = self.touch(line, owner);
        if prefetchers_enabled {
            self.run_prefetchers(line, owner, hit);
        }
        hit
    }

    fn run_prefetchers(&mut self, line: u64, owner: Owner, hit: bool) -> (Option<u64>, Option<u64>) {
        // Spatial prefetcher: a demand miss also fills the 128-byte pair.
        let spatial = if !hit {
            let pair = line ^ 1;
            self.insert_if_absent(pair, Owner::Prefetch).then_some(pair)
        } else {
            None
        };
        let st = &mut self.stream[owner.index()];
        if st.run > 0 && line > st.last_line {
            st.run += 1;
        } else {
            st.run = 1;
        }
        st.last_line = line;
        let stream = if st.run >= self.config.stream_trigger {
            let next = line + 1;
            self.insert_if_absent(next, Owner::Prefetch).then_some(next)
        } else {
            None
        };
        (spatial, stream)
    }

    /// Demand touch: returns (hit, evicted).
    #[inline]
    fn touch(&mut self, line: u64, owner: Owner) -> (bool, Option<(u64, Owner)>) {
        let set = (line & (self.config.sets as u64 - 1)) as usize;
        let ways = self.config.ways;
        let block = &mut self.blocks[set * self.stride..set * self.stride + TAGS_SLOT + ways];
        let len = block[LEN_SLOT] as usize;
        let order = block[ORDER_SLOT];

        for way in 0..len {
            if block[TAGS_SLOT + way] >> 2 == line {
                // Hit: move this way's nibble to the front of the order.
                let pos = nibble_position(order, way as u64);
                block[ORDER_SLOT] = promote_nibble(order, pos, way as u64);
                return (true, None);
            }
        }

        if len < ways {
            block[TAGS_SLOT + len] = pack(line, owner);
            block[ORDER_SLOT] = (order << 4) | len as u64;
            block[LEN_SLOT] = (len + 1) as u64;
            self.occupancy[owner.index()] += 1;
            return (false, None);
        }

        // Full set: replace the least-recently-used way (last order nibble).
        let lru_way = ((order >> (4 * (len - 1))) & 0xf) as usize;
        let (victim_tag, victim_owner) = unpack(block[TAGS_SLOT + lru_way]);
        block[TAGS_SLOT + lru_way] = pack(line, owner);
        block[ORDER_SLOT] = promote_nibble(order, len - 1, lru_way as u64);
        self.occupancy[victim_owner.index()] -= 1;
        self.occupancy[owner.index()] += 1;
        (false, Some((victim_tag, victim_owner)))
    }

    /// Prefetch fill: inserts `line` most-recently-used unless already
    /// resident. Returns true when a fill happened.
    fn insert_if_absent(&mut self, line: u64, owner: Owner) -> bool {
        let set = (line & (self.config.sets as u64 - 1)) as usize;
        let block = &self.blocks[set * self.stride..(set + 1) * self.stride];
        let len = block[LEN_SLOT] as usize;
        if block[TAGS_SLOT..TAGS_SLOT + len].iter().any(|&w| w >> 2 == line) {
            return false;
        }
        self.touch(line, owner);
        true
    }
}

/// Index of `way`'s nibble within the order word (must be present).
#[inline]
fn nibble_position(order: u64, way: u64) -> usize {
    let mut pos = 0;
    while (order >> (4 * pos)) & 0xf != way {
        pos += 1;
    }
    pos
}

/// Removes the nibble at `pos` and re-inserts `way` at the front; nibbles
/// above `pos` keep their positions, those below shift up by one.
#[inline]
fn promote_nibble(order: u64, pos: usize, way: u64) -> u64 {
    let low_mask = (1u64 << (4 * pos)) - 1;
    let low = order & low_mask;
    let high = if 4 * (pos + 1) >= 64 {
        0
    } else {
        order & !((1u64 << (4 * (pos + 1))) - 1)
    };
    high | (low << 4) | way
}
