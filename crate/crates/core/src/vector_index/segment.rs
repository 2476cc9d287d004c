//! `vectors.seg` binary layout, little-endian throughout:
//!
//! ```text
//! magic "SINRVSEG" | version u32 | backend u8 + 3 reserved | dim u32 | count u64
//! max_links u32 | ef_construction u32 | ef_search u32 | level_seed u64
//! entry u32 (u32::MAX = none) | max_level u8 + 3 reserved
//! fingerprint: u16 length + utf-8 bytes
//! ids: count x u64
//! vectors: count x dim x f32
//! graph: u64 byte length, then per slot: level u8, and per layer a varint
//!        count followed by varint slot deltas (lists are sorted)
//! tombstones: ceil(count / 8) bytes, LSB first
//! checksum: xxh64 of everything before it
//! ```

use std::collections::HashMap;

use xxhash_rust::xxh64::xxh64;

use super::hnsw::Graph;
use super::{Backend, Core, HnswParams, VectorIndex, VectorStore};
use crate::error::{Error, Result};
use crate::ids::SearchId;

pub const MAGIC: &[u8; 8] = b"SINRVSEG";
pub const VERSION: u32 = 1;
const FILE: &str = "vectors.seg";

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub fn encode(index: &VectorIndex) -> Vec<u8> {
    let store = &index.core.store;
    let graph = &index.core.graph;
    let n = store.len();
    let mut out = Vec::with_capacity(64 + n * (8 + 4 * store.dim + 40));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match index.backend {
        Backend::Hnsw => 0,
        Backend::Exact => 1,
    });
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let p = &index.params;
    out.extend_from_slice(&(p.max_links as u32).to_le_bytes());
    out.extend_from_slice(&(p.ef_construction as u32).to_le_bytes());
    out.extend_from_slice(&(p.ef_search as u32).to_le_bytes());
    out.extend_from_slice(&p.level_seed.to_le_bytes());
    out.extend_from_slice(&graph.entry.unwrap_or(u32::MAX).to_le_bytes());
    out.push(graph.max_level);
    out.extend_from_slice(&[0; 3]);
    let fp = index.fingerprint.as_bytes();
    out.extend_from_slice(&(fp.len() as u16).to_le_bytes());
    out.extend_from_slice(fp);

    for id in &store.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for x in &store.data {
        out.extend_from_slice(&x.to_le_bytes());
    }

    let mut g = Vec::new();
    for (level, layers) in graph.levels.iter().zip(&graph.links) {
        g.push(*level);
        for list in layers {
            put_varint(&mut g, list.len() as u64);
            let mut prev = 0u32;
            for &s in list {
                put_varint(&mut g, u64::from(s - prev));
                prev = s;
            }
        }
    }
    out.extend_from_slice(&(g.len() as u64).to_le_bytes());
    out.extend_from_slice(&g);

    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, &t) in store.tombstones.iter().enumerate() {
        if t {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    let sum = xxh64(&out, 0);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::corrupt(FILE, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::corrupt(FILE, "varint overflow"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VectorIndex> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(Error::corrupt(FILE, "bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if xxh64(body, 0) != u64::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(Error::corrupt(FILE, "checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(FILE, format!("unsupported version {version}")));
    }
    let backend = match r.u8()? {
        0 => Backend::Hnsw,
        1 => Backend::Exact,
        b => return Err(Error::corrupt(FILE, format!("unknown backend tag {b}"))),
    };
    r.take(3)?;
    let dim = r.u32()? as usize;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::corrupt(FILE, "count overflow"))?;
    let params = HnswParams {
        max_links: r.u32()? as usize,
        ef_construction: r.u32()? as usize,
        ef_search: r.u32()? as usize,
        level_seed: r.u64()?,
    };
    let entry = match r.u32()? {
        u32::MAX => None,
        e => Some(e),
    };
    let max_level = r.u8()?;
    r.take(3)?;
    let fp_len = r.u16()? as usize;
    let fingerprint = std::str::from_utf8(r.take(fp_len)?)
        .map_err(|_| Error::corrupt(FILE, "fingerprint is not utf-8"))?
        .to_owned();

    let mut index = VectorIndex::new(dim, backend, params)
        .map_err(|e| Error::corrupt(FILE, e.to_string()))?
        .with_fingerprint(fingerprint);

    let ids: Vec<SearchId> = r
        .take(n.checked_mul(8).ok_or_else(|| Error::corrupt(FILE, "count overflow"))?)?
        .chunks_exact(8)
        .map(|c| SearchId::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data: Vec<f32> = r
        .take(n.checked_mul(dim * 4).ok_or_else(|| Error::corrupt(FILE, "count overflow"))?)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let glen = r.u64()? as usize;
    let gbytes = r.take(glen)?;
    let mut g = Reader { buf: gbytes, pos: 0 };
    let mut graph = Graph {
        entry,
        max_level,
        ..Graph::default()
    };
    if glen > 0 {
        for _ in 0..n {
            let level = g.u8()?;
            let mut layers = Vec::with_capacity(level as usize + 1);
            for _ in 0..=level {
                let count = g.varint()? as usize;
                let mut list = Vec::with_capacity(count.min(1024));
                let mut prev = 0u64;
                for _ in 0..count {
                    prev += g.varint()?;
                    if prev >= n as u64 {
                        return Err(Error::corrupt(FILE, "link out of range"));
                    }
                    list.push(prev as u32);
                }
                layers.push(list);
            }
            graph.levels.push(level);
            graph.links.push(layers);
        }
        if g.pos != gbytes.len() {
            return Err(Error::corrupt(FILE, "trailing graph bytes"));
        }
    }
    if backend == Backend::Hnsw && graph.levels.len() != n {
        return Err(Error::corrupt(FILE, "graph does not cover every slot"));
    }

    let bits = r.take(n.div_ceil(8))?;
    if r.pos != body.len() {
        return Err(Error::corrupt(FILE, "trailing bytes"));
    }
    let tombstones: Vec<bool> = (0..n).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();

    let mut store = VectorStore::new(dim);
    let mut slots = HashMap::with_capacity(n);
    for (i, id) in ids.into_iter().enumerate() {
        let slot = store.push(id, &data[i * dim..(i + 1) * dim], tombstones[i]);
        slots.insert(id, slot);
    }
    let live = tombstones.iter().filter(|&&t| !t).count();
    index.core = Core {
        store,
        graph,
        slots,
        live,
    };
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::vector_index::IndexedVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(backend: Backend) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<IndexedVector> = (0..150)
            .map(|i| {
                let vals: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                IndexedVector::live(SearchId(i * 977), EmbeddingVector::new(vals).unwrap())
            })
            .collect();
        let mut idx = VectorIndex::build(12, backend, HnswParams::default(), entries)
            .unwrap()
            .with_fingerprint("local-hash/test");
        idx.remove(SearchId(977)).unwrap();
        idx
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for b in [Backend::Hnsw, Backend::Exact] {
            let idx = sample(b);
            let bytes = encode(&idx);
            let back = decode(&bytes).unwrap();
            assert!(back.same_state(&idx));
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn detects_corruption() {
        let bytes = encode(&sample(Backend::Hnsw));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Corrupt { .. })));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"nope").is_err());
    }

    #[test]
    fn varint_edges() {
        for v in [0u64, 127, 128, 16_383, 16_384, u64::from(u32::MAX), u64::MAX] {
            let mut b = Vec::new();
            put_varint(&mut b, v);
            assert_eq!(Reader { buf: &b, pos: 0 }.varint().unwrap(), v);
        }
    }
}
