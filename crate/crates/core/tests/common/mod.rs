#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};

use fontgen::selector::{sample_pools, PreferenceTable, DEFAULT_POOL_SIZE};
use fontgen::store::Dataset;
use fontgen::synth::{fixture_dataset, style_family};

static SERIAL: Mutex<()> = Mutex::new(());

/// Serializes heavy tests so wall-clock budgets are not shared.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn lowercase() -> Vec<char> {
    ('a'..='z').collect()
}

/// `n_fonts` synthetic fonts over a..z at `size`, the last `n_unseen` held out.
pub fn fixture(n_fonts: usize, size: usize, n_unseen: usize, seed: u64) -> Dataset {
    fixture_dataset(&style_family(n_fonts, seed), &lowercase(), size, n_unseen).unwrap()
}

pub fn table(ds: &Dataset, seed: u64) -> PreferenceTable {
    let pools = sample_pools(ds, DEFAULT_POOL_SIZE, seed).unwrap();
    PreferenceTable::build(ds, &pools, DEFAULT_POOL_SIZE, 0.5).unwrap()
}
