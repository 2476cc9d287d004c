//! Content-addressed chunk identifiers.
//!
//! Ids are 64-bit xxh64 digests of the chunk's document, token span, layer
//! and text. The 8-byte digest is what goes to disk; the `s_`/`r_` prefixed
//! hex form is what users see.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use xxhash_rust::xxh64::{xxh64, Xxh64};

use crate::ingest::TokenSpan;

const ID_SEED: u64 = 0x5349_4e52_5f49_4453; // "SINR_IDS"
const CONTENT_SEED: u64 = 0x5349_4e52_5f54_5854; // "SINR_TXT"

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Search,
    Retrieve,
}

impl Layer {
    fn tag(self) -> &'static [u8] {
        match self {
            Layer::Search => b"search",
            Layer::Retrieve => b"retrieve",
        }
    }
}

/// Digest of a chunk: doc id, span, layer and text all feed the hash.
pub(crate) fn chunk_digest(doc_id: &str, span: TokenSpan, layer: Layer, text: &str) -> u64 {
    let mut h = Xxh64::new(ID_SEED);
    h.update(&(doc_id.len() as u64).to_le_bytes());
    h.update(doc_id.as_bytes());
    h.update(&(span.start as u64).to_le_bytes());
    h.update(&(span.end as u64).to_le_bytes());
    h.update(layer.tag());
    h.update(&content_hash(text).to_le_bytes());
    h.digest()
}

/// Hash of a piece of text, used for document change detection.
pub fn content_hash(text: &str) -> u64 {
    xxh64(text.as_bytes(), CONTENT_SEED)
}

macro_rules! chunk_id {
    ($name:ident, $prefix:literal) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u64);

        impl $name {
            pub fn to_le_bytes(self) -> [u8; 8] {
                self.0.to_le_bytes()
            }

            pub fn from_le_bytes(bytes: [u8; 8]) -> Self {
                Self(u64::from_le_bytes(bytes))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{:016x}"), self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(self, f)
            }
        }

        impl FromStr for $name {
            type Err = crate::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let hex = s.strip_prefix($prefix).ok_or_else(|| {
                    crate::Error::Contract(format!("id `{s}` lacks prefix `{}`", $prefix))
                })?;
                if hex.len() != 16 {
                    return Err(crate::Error::Contract(format!("id `{s}` is not 16 hex digits")));
                }
                u64::from_str_radix(hex, 16)
                    .map(Self)
                    .map_err(|e| crate::Error::Contract(format!("id `{s}`: {e}")))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

chunk_id!(SearchId, "s_");
chunk_id!(RetrieveId, "r_");
