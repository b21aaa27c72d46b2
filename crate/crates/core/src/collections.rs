//! Cryptographic collections: secure multisets of vote shares.
//!
//! A collection holds tuples `(signer, value)` contributed via [`new_share`]
//! and merged with [`combine`]. Combine is commutative, associative and
//! idempotent, so partial collections can be folded in any order as votes
//! travel up an aggregation tree. [`Collection::has`] answers threshold
//! queries ("did at least `t` distinct signers contribute `v`?") counting
//! only shares whose authenticator verifies against the keyring.
//!
//! Two schemes are modeled. `NaiveSet` ships every per-share authenticator,
//! so its wire size grows linearly with cardinality. `Aggregate` ships a
//! single combined authenticator of constant size, at a higher fixed
//! verification cost. Real signatures are replaced by a keyed deterministic
//! digest; the aggregate tag is an unordered XOR fold over the deduplicated
//! share set, which preserves the algebraic laws and detects forgery by a
//! test adversary that does not hold the keys.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Index of a process within a scenario, stable for the run's duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ProcessId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// 32-byte deterministic authenticator over `(key, value)`.
pub type Tag = [u8; 32];

/// Which collection scheme is in use; mixing schemes is an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// One authenticator per share on the wire.
    NaiveSet,
    /// A single constant-size combined authenticator.
    Aggregate,
}

/// One signed contribution: `(signer, value)` plus its authenticator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    pub signer: ProcessId,
    pub value: Vec<u8>,
    pub tag: Tag,
}

/// Map from process to its 32-byte secret seed. Keys never change mid-run.
#[derive(Debug, Clone, Default)]
pub struct Keyring {
    keys: BTreeMap<ProcessId, [u8; 32]>,
}

impl Keyring {
    /// Derives one key per process from a scenario seed.
    pub fn generate(n: u32, seed: u64) -> Self {
        let mut keys = BTreeMap::new();
        for i in 0..n {
            let mut h = Sha256::new();
            h.update(b"keyring");
            h.update(seed.to_le_bytes());
            h.update(i.to_le_bytes());
            keys.insert(ProcessId(i), h.finalize().into());
        }
        Self { keys }
    }

    pub fn key(&self, p: ProcessId) -> Option<&[u8; 32]> {
        self.keys.get(&p)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CollectionError {
    #[error("signer {0} has no key in the keyring")]
    KeyNotFound(ProcessId),
    #[error("cannot combine collections with different schemes")]
    SchemeMismatch,
}

/// Secure multiset of shares, deduplicated by `(signer, value)`.
///
/// For the `Aggregate` scheme the combined authenticator is maintained as
/// the XOR fold of the member tags; because members form a set, re-adding
/// an existing share never cancels its contribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Collection {
    scheme: Scheme,
    // Keyed by (signer, value) so dedup and deterministic order come for free.
    shares: BTreeMap<(ProcessId, Vec<u8>), Tag>,
    aggregate_tag: Tag,
}

/// Computes the authenticator for `(key, value)`.
fn share_tag(key: &[u8; 32], value: &[u8]) -> Tag {
    let mut h = Sha256::new();
    h.update(b"share");
    h.update(key);
    h.update((value.len() as u64).to_le_bytes());
    h.update(value);
    h.finalize().into()
}

fn xor_into(acc: &mut Tag, other: &Tag) {
    for (a, b) in acc.iter_mut().zip(other.iter()) {
        *a ^= *b;
    }
}

/// Creates a singleton collection containing `(signer, value)`.
pub fn new_share(
    signer: ProcessId,
    value: &[u8],
    keyring: &Keyring,
    scheme: Scheme,
) -> Result<Collection, CollectionError> {
    let key = keyring
        .key(signer)
        .ok_or(CollectionError::KeyNotFound(signer))?;
    let tag = share_tag(key, value);
    let mut c = Collection::empty(scheme);
    c.insert_raw(signer, value.to_vec(), tag);
    Ok(c)
}

/// Union of two collections; errors if the schemes differ.
pub fn combine(c1: &Collection, c2: &Collection) -> Result<Collection, CollectionError> {
    if c1.scheme != c2.scheme {
        return Err(CollectionError::SchemeMismatch);
    }
    let mut out = c1.clone();
    for ((signer, value), tag) in &c2.shares {
        out.insert_raw(*signer, value.clone(), *tag);
    }
    Ok(out)
}

impl Collection {
    pub fn empty(scheme: Scheme) -> Self {
        Self {
            scheme,
            shares: BTreeMap::new(),
            aggregate_tag: [0u8; 32],
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Number of distinct `(signer, value)` tuples.
    pub fn cardinality(&self) -> usize {
        self.shares.len()
    }

    pub fn aggregate_tag(&self) -> &Tag {
        &self.aggregate_tag
    }

    pub fn shares(&self) -> impl Iterator<Item = Share> + '_ {
        self.shares.iter().map(|((signer, value), tag)| Share {
            signer: *signer,
            value: value.clone(),
            tag: *tag,
        })
    }

    pub fn signers_of(&self, value: &[u8]) -> impl Iterator<Item = ProcessId> + '_ {
        let value = value.to_vec();
        self.shares
            .keys()
            .filter(move |(_, v)| *v == value)
            .map(|(s, _)| *s)
    }

    fn insert_raw(&mut self, signer: ProcessId, value: Vec<u8>, tag: Tag) {
        if self.shares.insert((signer, value), tag).is_none() {
            xor_into(&mut self.aggregate_tag, &tag);
        } else {
            // Same (signer, value) seen again: set semantics keep the first
            // tag and the fold unchanged. Overwriting would require removing
            // the old tag from the XOR, and honest re-signing yields the
            // identical tag anyway.
        }
    }

    /// Swaps one stored tag; test hook for modeling in-flight tampering.
    pub fn tamper_tag(&mut self, signer: ProcessId, value: &[u8], new_tag: Tag) -> bool {
        if let Some(slot) = self.shares.get_mut(&(signer, value.to_vec())) {
            let old = *slot;
            *slot = new_tag;
            xor_into(&mut self.aggregate_tag, &old);
            xor_into(&mut self.aggregate_tag, &new_tag);
            true
        } else {
            false
        }
    }

    /// True iff at least `t` distinct signers contributed `value` and every
    /// counted share verifies against the keyring. Tampered shares are
    /// excluded from the count rather than reported as an error.
    pub fn has(&self, value: &[u8], t: usize, keyring: &Keyring) -> bool {
        let mut good = 0usize;
        for ((signer, v), tag) in &self.shares {
            if v != value {
                continue;
            }
            match keyring.key(*signer) {
                Some(key) if share_tag(key, v) == *tag => good += 1,
                _ => {}
            }
            if good >= t {
                return true;
            }
        }
        good >= t
    }

    /// Checks authenticator integrity: per-share for `NaiveSet`, combined
    /// fold for `Aggregate`.
    pub fn verify(&self, keyring: &Keyring) -> bool {
        match self.scheme {
            Scheme::NaiveSet => self.shares.iter().all(|((signer, value), tag)| {
                keyring
                    .key(*signer)
                    .map(|k| share_tag(k, value) == *tag)
                    .unwrap_or(false)
            }),
            Scheme::Aggregate => {
                let mut expect = [0u8; 32];
                for ((signer, value), _) in &self.shares {
                    match keyring.key(*signer) {
                        Some(k) => xor_into(&mut expect, &share_tag(k, value)),
                        None => return false,
                    }
                }
                expect == self.aggregate_tag
            }
        }
    }

    /// Wire size in bytes under the given cost model.
    pub fn wire_size(&self, model: &CryptoCostModel) -> u64 {
        match self.scheme {
            Scheme::NaiveSet => self.cardinality() as u64 * model.share_wire_bytes,
            Scheme::Aggregate => model.aggregate_wire_bytes,
        }
    }
}

/// Kinds of crypto work the simulator charges to a process's local clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CryptoOp {
    /// Producing one share.
    Sign,
    /// Checking `element_count` contributions.
    Verify,
    /// Folding `element_count` contributions into an existing collection.
    Combine,
}

/// Durations (µs) and sizes (bytes) for the cost and size models.
///
/// The defaults mirror the relative costs of a fast elliptic-curve scheme
/// (`secp_like`) and a pairing-based aggregation scheme (`bls_like`): the
/// aggregate verify is ~30x slower per call but constant in the number of
/// elements, with a small per-element folding cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CryptoCostModel {
    pub sign_us: u64,
    pub verify_us: u64,
    pub aggregate_per_element_us: u64,
    pub share_wire_bytes: u64,
    pub aggregate_wire_bytes: u64,
}

impl CryptoCostModel {
    pub fn secp_like() -> Self {
        Self {
            sign_us: 100,
            verify_us: 100,
            aggregate_per_element_us: 0,
            share_wire_bytes: 64,
            aggregate_wire_bytes: 96,
        }
    }

    pub fn bls_like() -> Self {
        Self {
            sign_us: 1200,
            verify_us: 3000,
            aggregate_per_element_us: 50,
            share_wire_bytes: 64,
            aggregate_wire_bytes: 96,
        }
    }
}

/// Deterministic CPU cost in microseconds for `op` over `element_count`
/// contributions under `scheme`.
pub fn cpu_cost(
    op: CryptoOp,
    scheme: Scheme,
    element_count: usize,
    model: &CryptoCostModel,
) -> u64 {
    let k = element_count as u64;
    match (op, scheme) {
        (CryptoOp::Sign, _) => model.sign_us,
        (CryptoOp::Verify, Scheme::NaiveSet) => k * model.verify_us,
        (CryptoOp::Verify, Scheme::Aggregate) => {
            if k == 0 {
                0
            } else {
                model.verify_us + k * model.aggregate_per_element_us
            }
        }
        (CryptoOp::Combine, Scheme::NaiveSet) => 0,
        (CryptoOp::Combine, Scheme::Aggregate) => k * model.aggregate_per_element_us,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyring() -> Keyring {
        Keyring::generate(8, 42)
    }

    // Independent oracle: recompute the authenticator from first principles
    // rather than through share_tag.
    fn oracle_tag(keyring: &Keyring, signer: ProcessId, value: &[u8]) -> Tag {
        let mut h = Sha256::new();
        h.update(b"share");
        h.update(keyring.key(signer).unwrap());
        h.update((value.len() as u64).to_le_bytes());
        h.update(value);
        h.finalize().into()
    }

    #[test]
    fn singleton_construction() {
        let kr = keyring();
        let c = new_share(ProcessId(0), b"v", &kr, Scheme::NaiveSet).unwrap();
        assert_eq!(c.cardinality(), 1);
        assert!(c.has(b"v", 1, &kr));
        assert!(c.verify(&kr));
    }

    #[test]
    fn new_share_is_deterministic() {
        let kr = keyring();
        let a = new_share(ProcessId(0), b"v", &kr, Scheme::Aggregate).unwrap();
        let b = new_share(ProcessId(0), b"v", &kr, Scheme::Aggregate).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tags_bind_the_signer() {
        let kr = keyring();
        let t0 = oracle_tag(&kr, ProcessId(0), b"v");
        let t1 = oracle_tag(&kr, ProcessId(1), b"v");
        assert_ne!(t0, t1);
        let c0 = new_share(ProcessId(0), b"v", &kr, Scheme::NaiveSet).unwrap();
        assert_eq!(c0.shares().next().unwrap().tag, t0);
    }

    #[test]
    fn unknown_signer_is_rejected() {
        let kr = keyring();
        assert_eq!(
            new_share(ProcessId(99), b"v", &kr, Scheme::NaiveSet).unwrap_err(),
            CollectionError::KeyNotFound(ProcessId(99))
        );
    }

    #[test]
    fn combine_laws_hold_on_small_cases() {
        let kr = keyring();
        let c1 = new_share(ProcessId(0), b"v", &kr, Scheme::Aggregate).unwrap();
        let c2 = new_share(ProcessId(1), b"v", &kr, Scheme::Aggregate).unwrap();
        let c3 = new_share(ProcessId(2), b"w", &kr, Scheme::Aggregate).unwrap();

        let ab = combine(&c1, &c2).unwrap();
        let ba = combine(&c2, &c1).unwrap();
        assert_eq!(ab, ba);

        let left = combine(&combine(&c1, &c2).unwrap(), &c3).unwrap();
        let right = combine(&c1, &combine(&c2, &c3).unwrap()).unwrap();
        assert_eq!(left, right);

        assert_eq!(combine(&c1, &c1).unwrap(), c1);
        assert_eq!(left.cardinality(), 3);
        assert!(left.verify(&kr));
    }

    #[test]
    fn scheme_mismatch_is_an_error() {
        let kr = keyring();
        let a = new_share(ProcessId(0), b"v", &kr, Scheme::NaiveSet).unwrap();
        let b = new_share(ProcessId(1), b"v", &kr, Scheme::Aggregate).unwrap();
        assert_eq!(combine(&a, &b).unwrap_err(), CollectionError::SchemeMismatch);
    }

    #[test]
    fn threshold_counting() {
        let kr = keyring();
        let mut c = Collection::empty(Scheme::NaiveSet);
        for i in 0..3 {
            c = combine(&c, &new_share(ProcessId(i), b"v", &kr, Scheme::NaiveSet).unwrap())
                .unwrap();
        }
        assert!(c.has(b"v", 3, &kr));
        assert!(!c.has(b"v", 4, &kr));
        assert!(Collection::empty(Scheme::NaiveSet).has(b"v", 0, &kr));
    }

    #[test]
    fn tampered_share_is_not_counted() {
        let kr = keyring();
        let mut c = Collection::empty(Scheme::NaiveSet);
        for i in 0..3 {
            c = combine(&c, &new_share(ProcessId(i), b"v", &kr, Scheme::NaiveSet).unwrap())
                .unwrap();
        }
        // Flip one byte of one tag; the oracle confirms the recomputed tag
        // no longer matches, so only two shares may be counted.
        let mut bad = oracle_tag(&kr, ProcessId(1), b"v");
        bad[0] ^= 0xff;
        assert!(c.tamper_tag(ProcessId(1), b"v", bad));
        assert!(!c.has(b"v", 3, &kr));
        assert!(c.has(b"v", 2, &kr));
    }

    #[test]
    fn forged_tag_fails_verification() {
        let kr = keyring();
        // p1 "signs" with p0's key: recomputation from the keyring disagrees.
        let forged_tag = oracle_tag(&kr, ProcessId(0), b"v");
        let mut c = Collection::empty(Scheme::NaiveSet);
        c.insert_raw(ProcessId(1), b"v".to_vec(), forged_tag);
        assert!(!c.verify(&kr));

        let mut c = Collection::empty(Scheme::Aggregate);
        c.insert_raw(ProcessId(1), b"v".to_vec(), forged_tag);
        assert!(!c.verify(&kr));
    }

    #[test]
    fn verify_is_order_invariant_exhaustively() {
        // All 5! fold orders of five singletons produce the same collection.
        let kr = keyring();
        let singles: Vec<Collection> = (0..5)
            .map(|i| new_share(ProcessId(i), b"v", &kr, Scheme::Aggregate).unwrap())
            .collect();
        let mut reference: Option<Collection> = None;
        permute(&mut (0..5).collect::<Vec<_>>(), 0, &mut |order| {
            let mut acc = Collection::empty(Scheme::Aggregate);
            for &i in order.iter() {
                acc = combine(&acc, &singles[i]).unwrap();
            }
            assert!(acc.verify(&kr));
            match &reference {
                Some(r) => assert_eq!(&acc, r),
                None => reference = Some(acc),
            }
        });
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn wire_sizes() {
        let kr = Keyring::generate(400, 1);
        let model = CryptoCostModel::secp_like();
        let mut c = Collection::empty(Scheme::NaiveSet);
        for i in 0..267 {
            c = combine(&c, &new_share(ProcessId(i), b"v", &kr, Scheme::NaiveSet).unwrap())
                .unwrap();
        }
        // 2f+1 = 267 for N = 400.
        assert_eq!(c.wire_size(&model), 267 * 64);
        assert_eq!(Collection::empty(Scheme::NaiveSet).wire_size(&model), 0);

        let model = CryptoCostModel::bls_like();
        let mut a = Collection::empty(Scheme::Aggregate);
        assert_eq!(a.wire_size(&model), 96);
        for i in 0..50 {
            a = combine(&a, &new_share(ProcessId(i), b"v", &kr, Scheme::Aggregate).unwrap())
                .unwrap();
        }
        assert_eq!(a.wire_size(&model), 96);
    }

    #[test]
    fn cpu_costs() {
        let secp = CryptoCostModel::secp_like();
        let bls = CryptoCostModel::bls_like();
        assert_eq!(cpu_cost(CryptoOp::Verify, Scheme::NaiveSet, 10, &secp), 1000);
        assert_eq!(cpu_cost(CryptoOp::Verify, Scheme::NaiveSet, 0, &secp), 0);
        // Aggregate verify is 30x a single secp verify, plus the fold cost.
        assert_eq!(bls.verify_us, 30 * secp.verify_us);
        assert_eq!(
            cpu_cost(CryptoOp::Verify, Scheme::Aggregate, 4, &bls),
            3000 + 4 * 50
        );
        assert_eq!(cpu_cost(CryptoOp::Sign, Scheme::Aggregate, 1, &bls), 1200);
    }
}
