//! Shared domain types: object and node identifiers, replicated objects,
//! locality descriptors and the join-time proximity metric.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};

/// Width of an [`ObjectId`] in bytes (160 bits).
pub const OBJECT_ID_LEN: usize = 20;

/// Content-derived object identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId([u8; OBJECT_ID_LEN]);

impl ObjectId {
    pub const fn from_bytes(bytes: [u8; OBJECT_ID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; OBJECT_ID_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight hex digits, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({})", self.short())
    }
}

/// Node identifier. Ordering is the deterministic voting order.
///
/// Ids are assigned in declaration order and survive promotions. A node
/// that comes back after a crash is a new incarnation with a fresh id.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// The role a node currently plays.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Role {
    Agent,
    RAgent,
    Lus,
    Client,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::RAgent => "ragent",
            Role::Lus => "lus",
            Role::Client => "client",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Network and geographic position of a node, broad tier last.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct LocalityDescriptor {
    pub network_domain: String,
    pub as_domain: String,
    pub country: String,
    pub continent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("locality field `{0}` must be non-empty")]
pub struct EmptyLocalityField(pub &'static str);

impl LocalityDescriptor {
    pub fn new(
        network_domain: impl Into<String>,
        as_domain: impl Into<String>,
        country: impl Into<String>,
        continent: impl Into<String>,
    ) -> Result<Self, EmptyLocalityField> {
        let loc = Self {
            network_domain: network_domain.into(),
            as_domain: as_domain.into(),
            country: country.into(),
            continent: continent.into(),
        };
        for (name, value) in [
            ("network_domain", &loc.network_domain),
            ("as_domain", &loc.as_domain),
            ("country", &loc.country),
            ("continent", &loc.continent),
        ] {
            if value.is_empty() {
                return Err(EmptyLocalityField(name));
            }
        }
        Ok(loc)
    }

    /// Tiers from broadest to narrowest.
    fn tiers(&self) -> [&str; 4] {
        [
            &self.continent,
            &self.country,
            &self.as_domain,
            &self.network_domain,
        ]
    }
}

/// Number of matching tiers scanning continent, country, AS domain and
/// network domain in that order, stopping at the first mismatch.
pub fn proximity_rank(a: &LocalityDescriptor, b: &LocalityDescriptor) -> u8 {
    a.tiers()
        .iter()
        .zip(b.tiers().iter())
        .take_while(|(x, y)| x == y)
        .count() as u8
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum KeyKind {
    /// Matches objects whose type tag equals the key.
    ExactType,
    /// Matches objects that declared the key among their index keys.
    Pattern,
}

impl KeyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyKind::ExactType => "exact",
            KeyKind::Pattern => "pattern",
        }
    }
}

/// A catalogue key and search criterion.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PatternKey {
    pub kind: KeyKind,
    pub key: String,
}

impl PatternKey {
    pub fn exact(key: impl Into<String>) -> Self {
        Self {
            kind: KeyKind::ExactType,
            key: key.into(),
        }
    }

    pub fn pattern(key: impl Into<String>) -> Self {
        Self {
            kind: KeyKind::Pattern,
            key: key.into(),
        }
    }
}

impl fmt::Display for PatternKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind.as_str(), self.key)
    }
}

/// A replicated, typed payload.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DistObject {
    pub id: ObjectId,
    pub type_tag: String,
    pub index_keys: BTreeSet<String>,
    pub payload: Vec<u8>,
    pub version: u64,
}

impl DistObject {
    /// Creates version 0 of an object; the id is derived from the creation
    /// encoding and stays fixed across later updates.
    pub fn new<I, S>(type_tag: impl Into<String>, index_keys: I, payload: Vec<u8>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let type_tag = type_tag.into();
        let index_keys: BTreeSet<String> = index_keys.into_iter().map(Into::into).collect();
        let id = derive_object_id(&canonical_encode(&type_tag, &index_keys, &payload));
        Self {
            id,
            type_tag,
            index_keys,
            payload,
            version: 0,
        }
    }

    pub fn matches(&self, criterion: &PatternKey) -> bool {
        match criterion.kind {
            KeyKind::ExactType => self.type_tag == criterion.key,
            KeyKind::Pattern => self.index_keys.contains(&criterion.key),
        }
    }

    /// Every catalogue key this object is listed under.
    pub fn keys(&self) -> Vec<PatternKey> {
        keys_for(&self.type_tag, &self.index_keys)
    }
}

pub(crate) fn keys_for(type_tag: &str, index_keys: &BTreeSet<String>) -> Vec<PatternKey> {
    std::iter::once(PatternKey::exact(type_tag))
        .chain(index_keys.iter().map(PatternKey::pattern))
        .collect()
}

/// Canonical byte encoding of an object's identity fields: the type tag,
/// then each index key in byte order, then the payload, each preceded by a
/// big-endian `u32` length.
pub fn canonical_encode<'a, I>(type_tag: &str, index_keys: I, payload: &[u8]) -> Vec<u8>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut keys: Vec<&str> = index_keys.into_iter().map(String::as_str).collect();
    keys.sort_unstable();
    keys.dedup();

    let mut out = Vec::with_capacity(
        12 + type_tag.len() + payload.len() + keys.iter().map(|k| 4 + k.len()).sum::<usize>(),
    );
    push_field(&mut out, type_tag.as_bytes());
    for key in keys {
        push_field(&mut out, key.as_bytes());
    }
    push_field(&mut out, payload);
    out
}

fn push_field(out: &mut Vec<u8>, bytes: &[u8]) {
    let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX bytes");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(bytes);
}

/// SHA-256 of the canonical encoding, truncated to 160 bits.
pub fn derive_object_id(encoded: &[u8]) -> ObjectId {
    let digest = Sha256::digest(encoded);
    let mut id = [0u8; OBJECT_ID_LEN];
    id.copy_from_slice(&digest[..OBJECT_ID_LEN]);
    ObjectId(id)
}
