//! Training batches of `(x_s, x_c, y)` tuples with in-batch triplets.
//!
//! Tuples come in pairs. A primary tuple asks for char `b` in font `a` and
//! gets its reference `r` from the selector; its partner asks for `r` in the
//! same font. The partner supplies a same-font positive for the primary's
//! style anchor and a same-char positive (its content glyph) for the
//! content anchor.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::selector::PreferenceTable;
use crate::store::{Dataset, GlyphImage};
use crate::{Error, Result};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletMode {
    Style,
    Content,
}

/// Indices into the batch's embedding pool (see [`TrainingBatch::pool_image`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub mode: TripletMode,
}

#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub x_s: Vec<GlyphImage>,
    pub x_c: Vec<GlyphImage>,
    pub y: Vec<GlyphImage>,
    pub style_labels: Vec<usize>,
    pub content_labels: Vec<usize>,
    pub style_triplets: Vec<Triplet>,
    pub content_triplets: Vec<Triplet>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Pool index `i < len` is `x_s[i]`, otherwise `x_c[i − len]`.
    pub fn pool_image(&self, i: usize) -> &GlyphImage {
        if i < self.len() {
            &self.x_s[i]
        } else {
            &self.x_c[i - self.len()]
        }
    }

    pub fn triplet_images(&self, t: &Triplet) -> [&GlyphImage; 3] {
        [self.pool_image(t.anchor), self.pool_image(t.positive), self.pool_image(t.negative)]
    }
}

/// Whether `(font, ch)` can serve as a training target.
fn trainable(dataset: &Dataset, font: usize, ch: usize) -> bool {
    dataset.has(font, ch) && dataset.content_glyph(ch).is_some()
}

/// Number of trainable (seen font, char) targets.
pub fn target_count(dataset: &Dataset) -> usize {
    let m = dataset.catalog.n_chars();
    dataset.catalog.seen.iter().map(|&f| (0..m).filter(|&c| trainable(dataset, f, c)).count()).sum()
}

/// Steps in one pass over all trainable targets.
pub fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    target_count(dataset).div_ceil(batch_size.max(1)).max(1)
}

struct Tuple {
    font: usize,
    target: usize,
    reference: usize,
}

fn make_tuple(dataset: &Dataset, table: &PreferenceTable, font: usize, target: usize, rs: bool, rng: &mut ChaCha8Rng) -> Option<Tuple> {
    if !trainable(dataset, font, target) {
        return None;
    }
    let reference = table.choose(font, target, rs, rng).ok()?;
    dataset.has(font, reference).then_some(Tuple { font, target, reference })
}

/// Draws a batch of `batch_size` tuples from seen fonts. With `rs` on the
/// reference is the table's best match, otherwise a random pool member.
pub fn sample_training_batch(dataset: &Dataset, table: &PreferenceTable, batch_size: usize, rs: bool, seed: u64) -> Result<TrainingBatch> {
    let cat = &dataset.catalog;
    if cat.seen.len() < 2 {
        return Err(Error::TooFewFonts);
    }
    if cat.n_chars() < 2 {
        return Err(Error::TooFewChars);
    }
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size {batch_size} is below 2")));
    }
    if table.n_fonts() != cat.n_fonts() || table.n_chars() != cat.n_chars() {
        return Err(Error::Config("preference table does not match the dataset".into()));
    }
    let seen: Vec<usize> = cat.seen.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples: Vec<Tuple> = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while tuples.len() < batch_size {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Dataset("no trainable (font, char) targets in the seen split".into()));
        }
        let font = *seen.choose(&mut rng).expect("seen is non-empty");
        let target = rng.random_range(0..cat.n_chars());
        let Some(primary) = make_tuple(dataset, table, font, target, rs, &mut rng) else {
            continue;
        };
        let partner_target = primary.reference;
        tuples.push(primary);
        if tuples.len() < batch_size {
            if let Some(partner) = make_tuple(dataset, table, font, partner_target, rs, &mut rng) {
                tuples.push(partner);
            }
        }
    }

    let glyph = |f: usize, c: usize| dataset.glyph(f, c).expect("checked by make_tuple").clone();
    let mut batch = TrainingBatch {
        x_s: tuples.iter().map(|t| glyph(t.font, t.reference)).collect(),
        x_c: tuples.iter().map(|t| glyph(cat.content_font, t.target)).collect(),
        y: tuples.iter().map(|t| glyph(t.font, t.target)).collect(),
        style_labels: tuples.iter().map(|t| t.font).collect(),
        content_labels: tuples.iter().map(|t| t.target).collect(),
        style_triplets: Vec::new(),
        content_triplets: Vec::new(),
    };
    let n = batch.len();
    let ids: Vec<(usize, usize)> = (0..2 * n).map(|i| {
        let g = batch.pool_image(i);
        (g.font_id, g.char_id)
    }).collect();
    for i in 0..n {
        let (font, ch) = ids[i];
        let style_pos: Vec<usize> = (0..n).filter(|&j| j != i && ids[j].0 == font).collect();
        let style_neg: Vec<usize> = (0..2 * n).filter(|&k| ids[k].0 != font).collect();
        if let (Some(&p), Some(&q)) = (style_pos.choose(&mut rng), style_neg.choose(&mut rng)) {
            batch.style_triplets.push(Triplet {
                anchor: i,
                positive: p,
                negative: q,
                mode: TripletMode::Style,
            });
        }
        let same_char: Vec<usize> = (0..2 * n).filter(|&j| j != i && ids[j].1 == ch).collect();
        let cross_font: Vec<usize> = same_char.iter().copied().filter(|&j| ids[j].0 != font).collect();
        let content_pos = if cross_font.is_empty() { same_char } else { cross_font };
        let content_neg: Vec<usize> = (0..2 * n).filter(|&k| ids[k].1 != ch).collect();
        if let (Some(&p), Some(&q)) = (content_pos.choose(&mut rng), content_neg.choose(&mut rng)) {
            batch.content_triplets.push(Triplet {
                anchor: i,
                positive: p,
                negative: q,
                mode: TripletMode::Content,
            });
        }
    }
    Ok(batch)
}
