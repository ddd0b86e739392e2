//! Reference selection: per-font candidate pools, the offline preference
//! table ranking pool members by structural similarity to each target, and
//! the lookup used during training and generation.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{Dataset, GlyphImage};
use crate::strokes::{describe_glyph, similarity, StrokeDescriptor};
use crate::{Error, Result};

/// Candidates per font.
pub const DEFAULT_POOL_SIZE: usize = 10;

const MAGIC: &[u8; 8] = b"DRGPREF1";
const PAD: u16 = u16::MAX;

/// Candidate characters of one font.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidatePool {
    pub font_id: usize,
    /// Sorted char ids.
    pub members: Vec<usize>,
}

/// Samples `pool_size` candidates per font from the glyphs it has. Each
/// font draws from its own stream so pools do not depend on font order.
pub fn sample_pools(dataset: &Dataset, pool_size: usize, seed: u64) -> Result<Vec<CandidatePool>> {
    let m = dataset.catalog.n_chars();
    if pool_size == 0 || pool_size >= m {
        return Err(Error::Config(format!("pool size {pool_size} must be in 1..{m}")));
    }
    Ok((0..dataset.catalog.n_fonts())
        .map(|font| {
            let avail = dataset.chars_of(font);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (font as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let k = pool_size.min(avail.len());
            let mut members: Vec<usize> = sample(&mut rng, avail.len(), k).into_iter().map(|i| avail[i]).collect();
            members.sort_unstable();
            CandidatePool { font_id: font, members }
        })
        .collect())
}

/// One ranked candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub char_id: usize,
    pub score: f64,
}

/// Ranks candidates against a target, best first; ties go to the smaller
/// char id. The candidate with char id `exclude` is skipped.
pub fn rank_candidates(target: &[StrokeDescriptor], candidates: &[(usize, Vec<StrokeDescriptor>)], exclude: usize) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = candidates
        .iter()
        .filter(|(ch, _)| *ch != exclude)
        .map(|(ch, d)| Ranked {
            char_id: *ch,
            score: similarity(target, d),
        })
        .collect();
    sort_ranking(&mut out);
    out
}

fn sort_ranking(r: &mut [Ranked]) {
    r.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.char_id.cmp(&b.char_id)));
}

/// Rankings for every (font, target char) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceTable {
    n_fonts: usize,
    n_chars: usize,
    pool_size: usize,
    pools: Vec<CandidatePool>,
    entries: Vec<Vec<Ranked>>,
}

impl PreferenceTable {
    /// Scores every pool member of every font against the content-font
    /// rendering of every target char.
    pub fn build(dataset: &Dataset, pools: &[CandidatePool], pool_size: usize, threshold: f32) -> Result<Self> {
        Self::build_with_progress(dataset, pools, pool_size, threshold, |_, _| {})
    }

    /// Like [`PreferenceTable::build`], calling `progress(font, elapsed)`
    /// after each font.
    pub fn build_with_progress(
        dataset: &Dataset,
        pools: &[CandidatePool],
        pool_size: usize,
        threshold: f32,
        mut progress: impl FnMut(usize, Duration),
    ) -> Result<Self> {
        let cat = &dataset.catalog;
        let (n, m) = (cat.n_fonts(), cat.n_chars());
        if pools.len() != n {
            return Err(Error::Config(format!("{} pools for {n} fonts", pools.len())));
        }
        if pool_size >= m || pools.iter().any(|p| p.members.len() > pool_size) {
            return Err(Error::Config(format!("pool size {pool_size} must be below {m} and bound every pool")));
        }
        let targets: Vec<Option<Vec<StrokeDescriptor>>> =
            (0..m).map(|b| dataset.content_glyph(b).map(|g| describe_glyph(g, threshold))).collect();
        let mut kept_pools = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n * m);
        for pool in pools {
            let t0 = Instant::now();
            let a = pool.font_id;
            let mut members = Vec::with_capacity(pool.members.len());
            let mut cands = Vec::with_capacity(pool.members.len());
            for &ch in &pool.members {
                match dataset.glyph(a, ch) {
                    Some(g) => {
                        members.push(ch);
                        cands.push((ch, describe_glyph(g, threshold)));
                    }
                    None => log::warn!(
                        "font {} has no glyph for {}; dropped from its pool",
                        cat.fonts[a],
                        cat.char_display(ch)
                    ),
                }
            }
            for (b, target) in targets.iter().enumerate() {
                entries.push(match target {
                    Some(t) => rank_candidates(t, &cands, b),
                    None => Vec::new(),
                });
            }
            kept_pools.push(CandidatePool { font_id: a, members });
            progress(a, t0.elapsed());
        }
        Ok(PreferenceTable {
            n_fonts: n,
            n_chars: m,
            pool_size,
            pools: kept_pools,
            entries,
        })
    }

    pub fn n_fonts(&self) -> usize {
        self.n_fonts
    }

    pub fn n_chars(&self) -> usize {
        self.n_chars
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn pool(&self, font: usize) -> &CandidatePool {
        &self.pools[font]
    }

    pub fn pools(&self) -> &[CandidatePool] {
        &self.pools
    }

    pub fn ranking(&self, font: usize, target: usize) -> &[Ranked] {
        &self.entries[font * self.n_chars + target]
    }

    /// Char id of the best-ranked candidate.
    pub fn best(&self, font: usize, target: usize) -> Result<usize> {
        self.ranking(font, target)
            .first()
            .map(|r| r.char_id)
            .ok_or(Error::NoCandidates { font, ch: target })
    }

    /// Uniformly random pool member other than the target.
    pub fn random(&self, font: usize, target: usize, rng: &mut impl Rng) -> Result<usize> {
        let cands: Vec<usize> = self.pools[font].members.iter().copied().filter(|&c| c != target).collect();
        if cands.is_empty() {
            return Err(Error::NoCandidates { font, ch: target });
        }
        Ok(cands[rng.random_range(0..cands.len())])
    }

    /// Reference char for `(font, target)`: the best match when `rs` is on,
    /// otherwise a random pool member.
    pub fn choose(&self, font: usize, target: usize, rs: bool, rng: &mut impl Rng) -> Result<usize> {
        if rs {
            self.best(font, target)
        } else {
            self.random(font, target, rng)
        }
    }

    /// Encodes the table. Each record keeps the top `pool_size − 1`
    /// candidates; rankings for targets outside the pool are truncated to
    /// that length. A trailer lists every pool so random selection survives
    /// a round trip.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.pool_size.saturating_sub(1);
        let mut out = Vec::with_capacity(20 + self.entries.len() * k * 6 + self.n_fonts * self.pool_size * 2);
        out.extend_from_slice(MAGIC);
        for v in [self.n_fonts, self.n_chars, self.pool_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for e in &self.entries {
            for i in 0..k {
                let (ch, s) = e.get(i).map_or((PAD, f32::NEG_INFINITY), |r| (r.char_id as u16, r.score as f32));
                out.extend_from_slice(&ch.to_le_bytes());
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        for p in &self.pools {
            for i in 0..self.pool_size {
                let ch = p.members.get(i).map_or(PAD, |&c| c as u16);
                out.extend_from_slice(&ch.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::PrefFormat(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (n, m, p) = (u32_at(8), u32_at(12), u32_at(16));
        if p == 0 || p >= m {
            return Err(bad("pool size out of range"));
        }
        let k = p - 1;
        let expected = 20 + n * m * k * 6 + n * p * 2;
        if bytes.len() != expected {
            return Err(Error::PrefFormat(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
        let mut off = 20;
        let mut entries = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            let mut e = Vec::new();
            for _ in 0..k {
                let ch = u16_at(off);
                let s = f32::from_le_bytes(bytes[off + 2..off + 6].try_into().expect("4 bytes"));
                off += 6;
                if ch != PAD {
                    if ch as usize >= m {
                        return Err(bad("char id out of range"));
                    }
                    e.push(Ranked {
                        char_id: ch as usize,
                        score: s as f64,
                    });
                }
            }
            entries.push(e);
        }
        let mut pools = Vec::with_capacity(n);
        for font in 0..n {
            let mut members = Vec::new();
            for _ in 0..p {
                let ch = u16_at(off);
                off += 2;
                if ch != PAD {
                    members.push(ch as usize);
                }
            }
            pools.push(CandidatePool { font_id: font, members });
        }
        Ok(PreferenceTable {
            n_fonts: n,
            n_chars: m,
            pool_size: p,
            pools,
            entries,
        })
    }

    /// Writes the table atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Picks the reference glyph from an explicit few-shot set: the candidate
/// structurally closest to `content`. A candidate for the target char
/// itself is only used when nothing else is available.
pub fn select_from_references<'a>(
    content: &GlyphImage,
    references: &'a [GlyphImage],
    threshold: f32,
) -> Result<&'a GlyphImage> {
    let target = describe_glyph(content, threshold);
    let cands: Vec<(usize, Vec<StrokeDescriptor>)> =
        references.iter().enumerate().map(|(i, g)| (i, describe_glyph(g, threshold))).collect();
    let others: Vec<_> = cands.iter().filter(|(i, _)| references[*i].char_id != content.char_id).cloned().collect();
    let pool = if others.is_empty() { &cands } else { &others };
    rank_candidates(&target, pool, usize::MAX)
        .first()
        .map(|r| &references[r.char_id])
        .ok_or(Error::NoCandidates {
            font: content.font_id,
            ch: content.char_id,
        })
}
