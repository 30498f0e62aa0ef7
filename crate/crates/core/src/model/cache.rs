//! Append-only key/value cache with identity-checked rollback.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GameError, Result};

static NEXT_CACHE_ID: AtomicU64 = AtomicU64::new(1);

/// Per-layer keys and values for every cached position.
///
/// Each written position gets a stamp from a counter that never repeats within
/// one cache, so a snapshot can tell whether the prefix it describes was later
/// truncated and overwritten.
#[derive(Debug, Clone)]
pub struct KvCache {
    id: u64,
    model_fingerprint: u64,
    num_layers: usize,
    dim: usize,
    max_len: usize,
    len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    stamps: Vec<u64>,
    next_stamp: u64,
}

/// Opaque position checkpoint into one specific cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheSnapshot {
    cache_id: u64,
    model_fingerprint: u64,
    position: usize,
    last_stamp: u64,
}

impl CacheSnapshot {
    pub fn position(&self) -> usize {
        self.position
    }
}

impl KvCache {
    pub(crate) fn new(num_layers: usize, dim: usize, max_len: usize, model_fingerprint: u64) -> Self {
        KvCache {
            id: NEXT_CACHE_ID.fetch_add(1, Ordering::Relaxed),
            model_fingerprint,
            num_layers,
            dim,
            max_len,
            len: 0,
            keys: vec![0.0; num_layers * max_len * dim],
            values: vec![0.0; num_layers * max_len * dim],
            stamps: vec![0; max_len],
            next_stamp: 1,
        }
    }

    pub fn position(&self) -> usize {
        self.len
    }

    pub fn capacity(&self) -> usize {
        self.max_len
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    fn base(&self, layer: usize, pos: usize) -> usize {
        (layer * self.max_len + pos) * self.dim
    }

    pub(crate) fn write(&mut self, layer: usize, pos: usize, k: &[f32], v: &[f32]) {
        let b = self.base(layer, pos);
        self.keys[b..b + self.dim].copy_from_slice(k);
        self.values[b..b + self.dim].copy_from_slice(v);
    }

    /// Keys of `layer` for positions `0..n`, row-major `[n, dim]`.
    pub fn keys(&self, layer: usize, n: usize) -> &[f32] {
        let b = self.base(layer, 0);
        &self.keys[b..b + n * self.dim]
    }

    pub fn values(&self, layer: usize, n: usize) -> &[f32] {
        let b = self.base(layer, 0);
        &self.values[b..b + n * self.dim]
    }

    pub(crate) fn commit(&mut self) {
        self.stamps[self.len] = self.next_stamp;
        self.next_stamp += 1;
        self.len += 1;
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            cache_id: self.id,
            model_fingerprint: self.model_fingerprint,
            position: self.len,
            last_stamp: if self.len == 0 { 0 } else { self.stamps[self.len - 1] },
        }
    }

    /// Roll back to `snap`. Fails when the snapshot belongs to another cache or
    /// model, points past the current position, or its prefix was rewritten.
    pub fn restore(&mut self, snap: &CacheSnapshot) -> Result<()> {
        if snap.cache_id != self.id || snap.model_fingerprint != self.model_fingerprint {
            return Err(GameError::Identity(format!(
                "snapshot from cache {} (model {:016x}) applied to cache {} (model {:016x})",
                snap.cache_id, snap.model_fingerprint, self.id, self.model_fingerprint
            )));
        }
        if snap.position > self.len {
            return Err(GameError::Contract(format!(
                "snapshot position {} is ahead of cache position {}",
                snap.position, self.len
            )));
        }
        let stamp = if snap.position == 0 { 0 } else { self.stamps[snap.position - 1] };
        if stamp != snap.last_stamp {
            return Err(GameError::Identity(format!(
                "prefix at position {} was rewritten since the snapshot",
                snap.position
            )));
        }
        self.len = snap.position;
        Ok(())
    }

    /// Cached state of positions `0..position()` as raw bytes, for replay comparisons.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in 0..self.num_layers {
            for x in self.keys(l, self.len).iter().chain(self.values(l, self.len)) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}
