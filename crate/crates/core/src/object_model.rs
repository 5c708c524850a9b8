//! Objects, owners, UTXO-like transactions and shard placement.

use crate::ids::{ClientId, Round, ShardId, TxnId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Globally unique object identifier: the transaction that constructed the
/// object plus the output position. Genesis objects use `TxnId::GENESIS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId {
    pub txn: TxnId,
    pub index: u32,
}

impl ObjectId {
    pub fn new(txn: TxnId, index: u32) -> Self {
        ObjectId { txn, index }
    }

    pub fn genesis(index: u32) -> Self {
        ObjectId { txn: TxnId::GENESIS, index }
    }

    pub fn is_genesis(&self) -> bool {
        self.txn == TxnId::GENESIS
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}.{}", self.txn.0, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectStatus {
    Constructed,
    Pledged,
    Destructed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub owner: ClientId,
    pub status: ObjectStatus,
    /// Round of the owning shard in which the object was constructed.
    pub constructed_in_round: Round,
}

/// Simulated signature of an owner over a transaction id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportToken {
    pub owner: ClientId,
    pub txn: TxnId,
    pub tag: u64,
}

/// Issues and checks support tokens. Every owner has a secret derived from
/// the keyring seed; only code holding the keyring can mint a valid tag, and
/// the harness only mints for an honest owner on that owner's behalf.
#[derive(Clone, Debug)]
pub struct Keyring {
    seed: u64,
}

impl Keyring {
    pub fn new(seed: u64) -> Self {
        Keyring { seed }
    }

    fn tag(&self, owner: ClientId, txn: TxnId) -> u64 {
        let mut h = Sha256::new();
        h.update(b"support");
        h.update(self.seed.to_le_bytes());
        h.update(owner.0.to_le_bytes());
        h.update(txn.0.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
    }

    pub fn sign(&self, owner: ClientId, txn: TxnId) -> SupportToken {
        SupportToken { owner, txn, tag: self.tag(owner, txn) }
    }

    /// A token that claims `owner` but was not produced by `owner`.
    pub fn forge(&self, owner: ClientId, txn: TxnId) -> SupportToken {
        SupportToken { owner, txn, tag: self.tag(owner, txn) ^ 0x5a5a_5a5a_5a5a_5a5a }
    }

    pub fn verify(&self, token: &SupportToken) -> bool {
        token.tag == self.tag(token.owner, token.txn)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub client: ClientId,
    pub inputs: BTreeSet<ObjectId>,
    pub outputs: Vec<(ObjectId, ClientId)>,
    pub support: BTreeMap<ObjectId, SupportToken>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TxnError {
    #[error("transaction {0} has no inputs")]
    NoInputs(TxnId),
    #[error("transaction {0} uses the reserved genesis id")]
    GenesisId(TxnId),
    #[error("output {1} of transaction {0} is not fresh")]
    StaleOutput(TxnId, ObjectId),
    #[error("output {1} of transaction {0} is not named after the transaction")]
    ForeignOutput(TxnId, ObjectId),
}

impl Transaction {
    /// Builds a transaction whose outputs are `(id, 0..)` owned as listed.
    pub fn new(
        id: TxnId,
        client: ClientId,
        inputs: impl IntoIterator<Item = ObjectId>,
        output_owners: &[ClientId],
        support: BTreeMap<ObjectId, SupportToken>,
    ) -> Result<Self, TxnError> {
        let txn = Transaction {
            id,
            client,
            inputs: inputs.into_iter().collect(),
            outputs: output_owners
                .iter()
                .enumerate()
                .map(|(i, o)| (ObjectId::new(id, i as u32), *o))
                .collect(),
            support,
        };
        txn.check_well_formed()?;
        Ok(txn)
    }

    pub fn check_well_formed(&self) -> Result<(), TxnError> {
        if self.id == TxnId::GENESIS {
            return Err(TxnError::GenesisId(self.id));
        }
        if self.inputs.is_empty() {
            return Err(TxnError::NoInputs(self.id));
        }
        for (o, _) in &self.outputs {
            if self.inputs.contains(o) {
                return Err(TxnError::StaleOutput(self.id, *o));
            }
            if o.txn != self.id {
                return Err(TxnError::ForeignOutput(self.id, *o));
            }
        }
        Ok(())
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.inputs.iter().copied().chain(self.outputs.iter().map(|(o, _)| *o))
    }
}

/// Maps every object to exactly one shard.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub num_shards: u32,
    #[serde(default)]
    pub overrides: BTreeMap<ObjectId, ShardId>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ShardAssignment {
    pub fn new(num_shards: u32) -> Self {
        assert!(num_shards >= 1, "at least one shard");
        ShardAssignment { num_shards, overrides: BTreeMap::new() }
    }

    pub fn with_override(mut self, o: ObjectId, s: ShardId) -> Self {
        self.overrides.insert(o, s);
        self
    }

    /// Stable hash placement unless overridden.
    pub fn placement(&self, o: ObjectId) -> ShardId {
        if let Some(s) = self.overrides.get(&o) {
            return *s;
        }
        let h = mix64(o.txn.0.wrapping_mul(0x1_0000_0001) ^ mix64(o.index as u64));
        ShardId((h % self.num_shards as u64) as u32)
    }
}

/// The shards affected by `txn`.
pub fn shards_of(txn: &Transaction, assign: &ShardAssignment) -> BTreeSet<ShardId> {
    txn.objects().map(|o| assign.placement(o)).collect()
}

/// Public ownership directory: who owns which object, and which owners are
/// well-behaved (ground truth, known to the harness and checkers).
#[derive(Clone, Debug, Default)]
pub struct Directory {
    pub owners: BTreeMap<ObjectId, ClientId>,
    pub malicious: BTreeSet<ClientId>,
}

impl Directory {
    pub fn register_txn(&mut self, txn: &Transaction) {
        for (o, owner) in &txn.outputs {
            self.owners.insert(*o, *owner);
        }
    }

    pub fn owner(&self, o: &ObjectId) -> Option<ClientId> {
        self.owners.get(o).copied()
    }

    pub fn is_well_behaved(&self, c: ClientId) -> bool {
        !self.malicious.contains(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportIssue {
    Missing,
    Forged,
    UnknownObject,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidityReport {
    pub txn: Option<TxnId>,
    /// Per input: the problem, and whether its owner is well-behaved.
    pub issues: Vec<(ObjectId, SupportIssue, bool)>,
}

impl ValidityReport {
    /// Valid iff every input owned by a well-behaved owner carries that
    /// owner's support.
    pub fn is_valid(&self) -> bool {
        self.issues.iter().all(|(_, _, well_behaved)| !well_behaved)
    }

    /// Replicas cannot tell well-behaved owners from malicious ones, so they
    /// require a checkable token on every input.
    pub fn fully_supported(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn missing(&self) -> Vec<ObjectId> {
        self.issues.iter().filter(|i| i.1 == SupportIssue::Missing).map(|i| i.0).collect()
    }

    pub fn forged(&self) -> Vec<ObjectId> {
        self.issues.iter().filter(|i| i.1 == SupportIssue::Forged).map(|i| i.0).collect()
    }
}

pub fn validate(txn: &Transaction, dir: &Directory, keys: &Keyring) -> ValidityReport {
    let mut report = ValidityReport { txn: Some(txn.id), issues: Vec::new() };
    for o in &txn.inputs {
        let Some(owner) = dir.owner(o) else {
            report.issues.push((*o, SupportIssue::UnknownObject, false));
            continue;
        };
        let wb = dir.is_well_behaved(owner);
        match txn.support.get(o) {
            None => report.issues.push((*o, SupportIssue::Missing, wb)),
            Some(tok) => {
                if tok.owner != owner || tok.txn != txn.id || !keys.verify(tok) {
                    report.issues.push((*o, SupportIssue::Forged, wb));
                }
            }
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ObjectError {
    #[error("shard {shard} is not affected by transaction {txn}")]
    NotInvolved { txn: TxnId, shard: ShardId },
    #[error("object {0} already exists")]
    Recreated(ObjectId),
    #[error("object {0} is unknown")]
    Unknown(ObjectId),
    #[error("object {0} cannot move from {1:?} to {2:?}")]
    BadTransition(ObjectId, ObjectStatus, ObjectStatus),
}

/// The object records held by one replica of one shard.
pub type Ledger = BTreeMap<ObjectId, ObjectRecord>;

/// `(I, D)`: the inputs of `txn` placed on `shard`, and those currently
/// constructed and unpledged.
pub fn local_inputs(
    txn: &Transaction,
    shard: ShardId,
    assign: &ShardAssignment,
    ledger: &Ledger,
) -> Result<(BTreeSet<ObjectId>, BTreeSet<ObjectId>), ObjectError> {
    if !shards_of(txn, assign).contains(&shard) {
        return Err(ObjectError::NotInvolved { txn: txn.id, shard });
    }
    let i: BTreeSet<ObjectId> =
        txn.inputs.iter().copied().filter(|o| assign.placement(*o) == shard).collect();
    let d = i
        .iter()
        .copied()
        .filter(|o| ledger.get(o).map(|r| r.status == ObjectStatus::Constructed).unwrap_or(false))
        .collect();
    Ok((i, d))
}

/// Ledger mutations that enforce the monotone lifecycle
/// constructed -> (pledged ->) destructed.
pub trait LedgerExt {
    fn construct(&mut self, id: ObjectId, owner: ClientId, round: Round) -> Result<(), ObjectError>;
    fn pledge(&mut self, id: ObjectId) -> Result<(), ObjectError>;
    fn destruct(&mut self, id: ObjectId) -> Result<ObjectRecord, ObjectError>;
    /// Puts back a record removed by `destruct`; only the pessimistic
    /// protocol's rollback uses this.
    fn restore(&mut self, record: ObjectRecord) -> Result<(), ObjectError>;
    fn is_available(&self, id: &ObjectId) -> bool;
}

impl LedgerExt for Ledger {
    fn construct(&mut self, id: ObjectId, owner: ClientId, round: Round) -> Result<(), ObjectError> {
        if self.contains_key(&id) {
            return Err(ObjectError::Recreated(id));
        }
        self.insert(id, ObjectRecord { id, owner, status: ObjectStatus::Constructed, constructed_in_round: round });
        Ok(())
    }

    fn pledge(&mut self, id: ObjectId) -> Result<(), ObjectError> {
        let r = self.get_mut(&id).ok_or(ObjectError::Unknown(id))?;
        if r.status != ObjectStatus::Constructed {
            return Err(ObjectError::BadTransition(id, r.status, ObjectStatus::Pledged));
        }
        r.status = ObjectStatus::Pledged;
        Ok(())
    }

    fn destruct(&mut self, id: ObjectId) -> Result<ObjectRecord, ObjectError> {
        let r = self.get_mut(&id).ok_or(ObjectError::Unknown(id))?;
        if r.status == ObjectStatus::Destructed {
            return Err(ObjectError::BadTransition(id, r.status, ObjectStatus::Destructed));
        }
        let before = r.clone();
        r.status = ObjectStatus::Destructed;
        Ok(before)
    }

    fn restore(&mut self, record: ObjectRecord) -> Result<(), ObjectError> {
        let r = self.get_mut(&record.id).ok_or(ObjectError::Unknown(record.id))?;
        if r.status != ObjectStatus::Destructed {
            return Err(ObjectError::BadTransition(record.id, r.status, record.status));
        }
        *r = record;
        Ok(())
    }

    fn is_available(&self, id: &ObjectId) -> bool {
        self.get(id).map(|r| r.status == ObjectStatus::Constructed).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(i: u32) -> ObjectId {
        ObjectId::genesis(i)
    }

    fn two_shard_assign() -> ShardAssignment {
        ShardAssignment::new(3).with_override(o(1), ShardId(1)).with_override(o(2), ShardId(2))
    }

    #[test]
    fn shards_of_example_one() {
        let a = two_shard_assign().with_override(ObjectId::new(TxnId(1), 0), ShardId(1));
        let t = Transaction::new(TxnId(1), ClientId(1), [o(1), o(2)], &[ClientId(1)], BTreeMap::new()).unwrap();
        let got: Vec<_> = shards_of(&t, &a).into_iter().collect();
        assert_eq!(got, vec![ShardId(1), ShardId(2)]);
    }

    #[test]
    fn shards_of_single_shard() {
        let a = ShardAssignment::new(1);
        let t = Transaction::new(TxnId(5), ClientId(1), [o(1), o(2)], &[ClientId(2)], BTreeMap::new()).unwrap();
        assert_eq!(shards_of(&t, &a).len(), 1);
    }

    #[test]
    fn shards_of_matches_per_object_enumeration() {
        let a = ShardAssignment::new(4);
        let inputs: Vec<_> = (0..8).map(o).collect();
        let t = Transaction::new(TxnId(9), ClientId(1), inputs.clone(), &[], BTreeMap::new()).unwrap();
        // Independent: bucket each object by its own placement, keep non-empty buckets.
        let mut buckets = [0usize; 4];
        for x in &inputs {
            buckets[a.placement(*x).0 as usize] += 1;
        }
        let expect: BTreeSet<_> =
            buckets.iter().enumerate().filter(|(_, n)| **n > 0).map(|(s, _)| ShardId(s as u32)).collect();
        assert_eq!(shards_of(&t, &a), expect);
    }

    #[test]
    fn placement_is_stable() {
        let a = ShardAssignment::new(16);
        // Frozen by running the placement once; guards against accidental changes.
        let got: Vec<u32> = (0..6).map(|i| a.placement(o(i)).0).collect();
        let again: Vec<u32> = (0..6).map(|i| a.placement(o(i)).0).collect();
        assert_eq!(got, again);
        assert!(got.iter().all(|s| *s < 16));
    }

    #[test]
    fn malformed_transactions_rejected() {
        assert_eq!(
            Transaction::new(TxnId(3), ClientId(0), [], &[], BTreeMap::new()).unwrap_err(),
            TxnError::NoInputs(TxnId(3))
        );
        assert!(matches!(
            Transaction::new(TxnId::GENESIS, ClientId(0), [o(1)], &[], BTreeMap::new()),
            Err(TxnError::GenesisId(_))
        ));
        let stale = Transaction::new(TxnId(4), ClientId(0), [ObjectId::new(TxnId(4), 0)], &[ClientId(0)], BTreeMap::new());
        assert!(matches!(stale, Err(TxnError::StaleOutput(..))));
    }

    fn dir() -> Directory {
        let mut d = Directory::default();
        d.owners.insert(o(1), ClientId(1));
        d.owners.insert(o(2), ClientId(2));
        d.malicious.insert(ClientId(2));
        d
    }

    #[test]
    fn validate_supported_and_missing() {
        let keys = Keyring::new(7);
        let t = TxnId(10);
        let mut sup = BTreeMap::new();
        sup.insert(o(1), keys.sign(ClientId(1), t));
        sup.insert(o(2), keys.sign(ClientId(2), t));
        let txn = Transaction::new(t, ClientId(1), [o(1), o(2)], &[], sup.clone()).unwrap();
        let r = validate(&txn, &dir(), &keys);
        assert!(r.is_valid() && r.fully_supported());

        sup.remove(&o(1));
        let txn = Transaction::new(t, ClientId(1), [o(1), o(2)], &[], sup).unwrap();
        let r = validate(&txn, &dir(), &keys);
        assert!(!r.is_valid());
        assert_eq!(r.missing(), vec![o(1)]);
    }

    #[test]
    fn validate_forged_token() {
        let keys = Keyring::new(7);
        let t = TxnId(11);
        let mut sup = BTreeMap::new();
        sup.insert(o(1), keys.forge(ClientId(1), t));
        let txn = Transaction::new(t, ClientId(2), [o(1)], &[], sup).unwrap();
        let r = validate(&txn, &dir(), &keys);
        assert!(!r.is_valid());
        assert_eq!(r.forged(), vec![o(1)]);
        // A token for another transaction does not transfer.
        let mut sup = BTreeMap::new();
        sup.insert(o(1), keys.sign(ClientId(1), TxnId(99)));
        let txn = Transaction::new(t, ClientId(2), [o(1)], &[], sup).unwrap();
        assert_eq!(validate(&txn, &dir(), &keys).forged(), vec![o(1)]);
    }

    #[test]
    fn malicious_owner_can_support_two_transactions() {
        let keys = Keyring::new(7);
        let mk = |t: u64| {
            let mut sup = BTreeMap::new();
            sup.insert(o(2), keys.sign(ClientId(2), TxnId(t)));
            Transaction::new(TxnId(t), ClientId(2), [o(2)], &[], sup).unwrap()
        };
        assert!(validate(&mk(20), &dir(), &keys).is_valid());
        assert!(validate(&mk(21), &dir(), &keys).is_valid());
    }

    #[test]
    fn local_inputs_examples() {
        let a = two_shard_assign();
        let mut ledger = Ledger::new();
        ledger.construct(o(1), ClientId(1), 0).unwrap();
        let t1 = Transaction::new(TxnId(1), ClientId(1), [o(1), o(2)], &[], BTreeMap::new()).unwrap();
        let (i, d) = local_inputs(&t1, ShardId(1), &a, &ledger).unwrap();
        assert_eq!(i, BTreeSet::from([o(1)]));
        assert_eq!(d, BTreeSet::from([o(1)]));

        ledger.pledge(o(1)).unwrap();
        let t2 = Transaction::new(TxnId(2), ClientId(2), [o(1), o(2)], &[], BTreeMap::new()).unwrap();
        let (i, d) = local_inputs(&t2, ShardId(1), &a, &ledger).unwrap();
        assert_eq!(i, BTreeSet::from([o(1)]));
        assert!(d.is_empty());

        assert_eq!(
            local_inputs(&t2, ShardId(0), &a, &ledger),
            Err(ObjectError::NotInvolved { txn: TxnId(2), shard: ShardId(0) })
        );
    }

    #[test]
    fn local_inputs_output_only_shard() {
        let out = ObjectId::new(TxnId(3), 0);
        let a = two_shard_assign().with_override(out, ShardId(0));
        let t = Transaction::new(TxnId(3), ClientId(1), [o(1)], &[ClientId(1)], BTreeMap::new()).unwrap();
        let (i, d) = local_inputs(&t, ShardId(0), &a, &Ledger::new()).unwrap();
        assert!(i.is_empty() && d.is_empty());
    }

    #[test]
    fn lifecycle_is_monotone() {
        let mut l = Ledger::new();
        l.construct(o(1), ClientId(1), 0).unwrap();
        assert_eq!(l.construct(o(1), ClientId(1), 3), Err(ObjectError::Recreated(o(1))));
        l.pledge(o(1)).unwrap();
        assert!(l.pledge(o(1)).is_err());
        let before = l.destruct(o(1)).unwrap();
        assert_eq!(before.status, ObjectStatus::Pledged);
        assert!(l.destruct(o(1)).is_err());
        assert!(!l.is_available(&o(1)));
    }
}
