//! Transactions, endorsements, hash-chained blocks and the per-peer world
//! state.
//!
//! Every hashed structure has one canonical byte encoding: fields in
//! declaration order, integers as 8-byte big-endian, strings and other blobs
//! prefixed by their 8-byte length, reals as their shortest round-trip decimal
//! string. The chain export reuses that encoding, and the decoder rejects any
//! record that does not re-encode to the exact bytes it was read from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::fusion::{DeviceLayout, DeviceReading, FusedVector, FusionError, TrainingWindow};
use crate::ids::PeerId;

pub const HASH_ALGORITHM: &str = "sha256";
const CHAIN_MAGIC: &[u8; 10] = b"AIBC-CHAIN";
const CHAIN_VERSION: u64 = 1;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl serde::Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("peer {0} does not hold the chaincode")]
    NotEndorser(PeerId),
    #[error("malformed reading: {0}")]
    Reading(#[from] FusionError),
    #[error("empty blocks are not allowed")]
    EmptyBlock,
    #[error("expected block {expected}, got {actual}")]
    SequenceGap { expected: u64, actual: u64 },
    #[error("block {seq} does not link to the local tip")]
    PrevHashMismatch { seq: u64 },
    #[error("block {seq} carries {flags} validity flags for {txs} transactions")]
    FlagCount { seq: u64, flags: usize, txs: usize },
    #[error("block {seq} has an unset validity flag")]
    UnsetFlag { seq: u64 },
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("integrity check failed at block {seq}: {reason}")]
    Integrity { seq: u64, reason: String },
    #[error("chain decode error: {0}")]
    Decode(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

/// Appends canonical field encodings to a buffer.
#[derive(Default)]
pub struct Canonical {
    buf: Vec<u8>,
}

impl Canonical {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.str(&v.to_string())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        vs.iter().for_each(|&v| {
            self.f64(v);
        });
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(&d.0)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn hash(&self) -> Digest {
        Digest::of(&self.buf)
    }
}

/// Strict reader for the canonical encoding.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| LedgerError::Decode(format!("truncated at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, LedgerError> {
        let n = self.u64()?;
        if n > (self.data.len() - self.pos) as u64 {
            return Err(LedgerError::Decode(format!("length {n} overruns input")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8], LedgerError> {
        let n = self.len()?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String, LedgerError> {
        std::str::from_utf8(self.bytes()?)
            .map(str::to_string)
            .map_err(|e| LedgerError::Decode(e.to_string()))
    }

    fn f64(&mut self) -> Result<f64, LedgerError> {
        let s = self.str()?;
        let v: f64 = s
            .parse()
            .map_err(|_| LedgerError::Decode(format!("`{s}` is not a number")))?;
        if v.to_string() != s {
            return Err(LedgerError::Decode(format!("`{s}` is not canonical")));
        }
        Ok(v)
    }

    fn f64s(&mut self) -> Result<Vec<f64>, LedgerError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn digest(&mut self) -> Result<Digest, LedgerError> {
        let b = self.bytes()?;
        let arr: [u8; 32] = b
            .try_into()
            .map_err(|_| LedgerError::Decode("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub tx_id: String,
    pub app_id: String,
    pub slot: u64,
    pub reading: DeviceReading,
}

/// World-state delta proposed by chaincode: set one device's value.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteSet {
    pub device_id: String,
    pub values: Vec<f64>,
}

impl WriteSet {
    /// Digest binding the result to its transaction.
    pub fn digest(&self, tx_id: &str) -> Digest {
        let mut c = Canonical::new();
        c.str(tx_id).str(&self.device_id).f64s(&self.values);
        c.hash()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endorsement {
    pub peer: PeerId,
    pub result_digest: Digest,
    pub signature: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Validity {
    Unset,
    Valid,
    InvalidEndorsement,
    OutlierRejected,
}

impl Validity {
    fn code(self) -> u64 {
        match self {
            Validity::Unset => 0,
            Validity::Valid => 1,
            Validity::InvalidEndorsement => 2,
            Validity::OutlierRejected => 3,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        Some(match c {
            0 => Validity::Unset,
            1 => Validity::Valid,
            2 => Validity::InvalidEndorsement,
            3 => Validity::OutlierRejected,
            _ => return None,
        })
    }

    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndorsedTransaction {
    pub tx: Transaction,
    pub result: WriteSet,
    pub endorsements: Vec<Endorsement>,
}

impl EndorsedTransaction {
    fn encode(&self, c: &mut Canonical) {
        let tx = &self.tx;
        c.str(&tx.tx_id)
            .str(&tx.app_id)
            .u64(tx.slot)
            .str(&tx.reading.device_id)
            .u64(tx.reading.slot)
            .f64s(&tx.reading.values)
            .str(&self.result.device_id)
            .f64s(&self.result.values)
            .u64(self.endorsements.len() as u64);
        for e in &self.endorsements {
            c.u64(e.peer.0 as u64).digest(&e.result_digest).digest(&e.signature);
        }
    }

    fn decode(r: &mut Cursor<'_>) -> Result<Self, LedgerError> {
        let tx_id = r.str()?;
        let app_id = r.str()?;
        let slot = r.u64()?;
        let device_id = r.str()?;
        let reading_slot = r.u64()?;
        let values = r.f64s()?;
        let result = WriteSet {
            device_id: r.str()?,
            values: r.f64s()?,
        };
        let n = r.len()?;
        let endorsements = (0..n)
            .map(|_| {
                let peer = r.u64()?;
                let peer = u32::try_from(peer).map_err(|_| LedgerError::Decode("peer id".into()))?;
                Ok(Endorsement {
                    peer: PeerId(peer),
                    result_digest: r.digest()?,
                    signature: r.digest()?,
                })
            })
            .collect::<Result<_, LedgerError>>()?;
        Ok(Self {
            tx: Transaction {
                tx_id,
                app_id,
                slot,
                reading: DeviceReading {
                    device_id,
                    slot: reading_slot,
                    values,
                },
            },
            result,
            endorsements,
        })
    }
}

/// Keyed-hash "signatures": each peer holds a secret registered here.
#[derive(Debug, Clone, Default)]
pub struct PeerSecrets {
    secrets: BTreeMap<PeerId, [u8; 32]>,
}

impl PeerSecrets {
    pub fn generate<R: RngCore>(peers: impl IntoIterator<Item = PeerId>, rng: &mut R) -> Self {
        let secrets = peers
            .into_iter()
            .map(|p| {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                (p, s)
            })
            .collect();
        Self { secrets }
    }

    pub fn secret(&self, peer: PeerId) -> Option<&[u8; 32]> {
        self.secrets.get(&peer)
    }

    pub fn verify(&self, e: &Endorsement) -> bool {
        self.secret(e.peer)
            .is_some_and(|s| sign(s, &e.result_digest) == e.signature)
    }
}

pub fn sign(secret: &[u8; 32], digest: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(secret);
    buf.extend_from_slice(&digest.0);
    Digest::of(&buf)
}

#[derive(Debug, Clone, Default)]
pub struct EndorsementPolicy {
    required: BTreeMap<String, BTreeSet<PeerId>>,
}

impl EndorsementPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requires every peer in `endorsers` for transactions of `app_id`.
    /// Empty endorser sets are ignored.
    pub fn require(&mut self, app_id: impl Into<String>, endorsers: impl IntoIterator<Item = PeerId>) {
        let set: BTreeSet<_> = endorsers.into_iter().collect();
        if !set.is_empty() {
            self.required.insert(app_id.into(), set);
        }
    }

    pub fn required_for(&self, app_id: &str) -> Option<&BTreeSet<PeerId>> {
        self.required.get(app_id)
    }
}

/// The replicated transaction logic: validate the reading and propose it as
/// the device's new value.
#[derive(Debug, Clone)]
pub struct Chaincode {
    layout: DeviceLayout,
}

impl Chaincode {
    pub fn new(layout: DeviceLayout) -> Self {
        Self { layout }
    }

    pub fn layout(&self) -> &DeviceLayout {
        &self.layout
    }

    pub fn execute(&self, tx: &Transaction) -> Result<WriteSet, LedgerError> {
        tx.reading.validate(&self.layout)?;
        Ok(WriteSet {
            device_id: tx.reading.device_id.clone(),
            values: tx.reading.values.clone(),
        })
    }
}

/// An endorsing peer's chaincode host, with its scratch proposals.
#[derive(Debug, Clone)]
pub struct Endorser {
    pub peer: PeerId,
    secret: Option<[u8; 32]>,
    /// Tampers with every result it endorses.
    pub corrupt: bool,
    proposals: BTreeMap<String, WriteSet>,
}

impl Endorser {
    /// `secret` is `None` for peers that do not hold the chaincode.
    pub fn new(peer: PeerId, secret: Option<[u8; 32]>) -> Self {
        Self {
            peer,
            secret,
            corrupt: false,
            proposals: BTreeMap::new(),
        }
    }

    pub fn execute_chaincode(
        &mut self,
        chaincode: &Chaincode,
        tx: &Transaction,
    ) -> Result<(WriteSet, Endorsement), LedgerError> {
        let secret = self.secret.ok_or(LedgerError::NotEndorser(self.peer))?;
        let mut result = chaincode.execute(tx)?;
        if self.corrupt {
            result.values.iter_mut().for_each(|v| *v += 1.0);
        }
        let result_digest = result.digest(&tx.tx_id);
        let endorsement = Endorsement {
            peer: self.peer,
            result_digest,
            signature: sign(&secret, &result_digest),
        };
        self.proposals.insert(tx.tx_id.clone(), result.clone());
        Ok((result, endorsement))
    }

    /// Temporary proposed update for `tx_id`, if any.
    pub fn proposal(&self, tx_id: &str) -> Option<&WriteSet> {
        self.proposals.get(tx_id)
    }

    /// Drops scratch proposals once their block is decided either way.
    pub fn discard_proposals(&mut self) {
        self.proposals.clear();
    }
}

/// Endorsement check run by every peer before voting.
pub fn check_endorsements(etx: &EndorsedTransaction, policy: &EndorsementPolicy, secrets: &PeerSecrets) -> Validity {
    let Some(required) = policy.required_for(&etx.tx.app_id) else {
        return Validity::InvalidEndorsement;
    };
    let expected = etx.result.digest(&etx.tx.tx_id);
    let present: BTreeSet<PeerId> = etx.endorsements.iter().map(|e| e.peer).collect();
    let ok = required.iter().all(|p| present.contains(p))
        && etx
            .endorsements
            .iter()
            .all(|e| secrets.verify(e) && e.result_digest == expected);
    if ok {
        Validity::Valid
    } else {
        Validity::InvalidEndorsement
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub seq: u64,
    pub prev_hash: Digest,
    pub txs: Vec<EndorsedTransaction>,
    pub block_hash: Digest,
}

impl Block {
    fn encode_body(seq: u64, prev_hash: &Digest, txs: &[EndorsedTransaction], c: &mut Canonical) {
        c.str(HASH_ALGORITHM).u64(seq).digest(prev_hash).u64(txs.len() as u64);
        txs.iter().for_each(|t| t.encode(c));
    }

    pub fn compute_hash(seq: u64, prev_hash: &Digest, txs: &[EndorsedTransaction]) -> Digest {
        let mut c = Canonical::new();
        Self::encode_body(seq, prev_hash, txs, &mut c);
        c.hash()
    }

    pub fn new(seq: u64, prev_hash: Digest, txs: Vec<EndorsedTransaction>) -> Self {
        let block_hash = Self::compute_hash(seq, &prev_hash, &txs);
        Self {
            seq,
            prev_hash,
            txs,
            block_hash,
        }
    }

    /// Block 0 carrying the initial device values.
    pub fn genesis(initial: Vec<DeviceReading>) -> Self {
        let txs = initial
            .into_iter()
            .map(|reading| EndorsedTransaction {
                tx: Transaction {
                    tx_id: format!("genesis-{}", reading.device_id),
                    app_id: "genesis".into(),
                    slot: reading.slot,
                    reading: reading.clone(),
                },
                result: WriteSet {
                    device_id: reading.device_id,
                    values: reading.values,
                },
                endorsements: Vec::new(),
            })
            .collect();
        Self::new(0, Digest::ZERO, txs)
    }

    pub fn hash_matches(&self) -> bool {
        Self::compute_hash(self.seq, &self.prev_hash, &self.txs) == self.block_hash
    }

    fn encode(&self, c: &mut Canonical) {
        Self::encode_body(self.seq, &self.prev_hash, &self.txs, c);
        c.digest(&self.block_hash);
    }

    fn decode(r: &mut Cursor<'_>) -> Result<Self, LedgerError> {
        let alg = r.str()?;
        if alg != HASH_ALGORITHM {
            return Err(LedgerError::Decode(format!("unknown hash algorithm `{alg}`")));
        }
        let seq = r.u64()?;
        let prev_hash = r.digest()?;
        let n = r.len()?;
        let txs = (0..n)
            .map(|_| EndorsedTransaction::decode(r))
            .collect::<Result<_, _>>()?;
        let block_hash = r.digest()?;
        Ok(Self {
            seq,
            prev_hash,
            txs,
            block_hash,
        })
    }
}

/// Assigns sequence numbers and chains blocks to the committed tip.
#[derive(Debug, Clone)]
pub struct Orderer {
    tip_seq: u64,
    tip_hash: Digest,
    pub allow_empty: bool,
}

impl Orderer {
    pub fn new(genesis: &Block) -> Self {
        Self {
            tip_seq: genesis.seq,
            tip_hash: genesis.block_hash,
            allow_empty: false,
        }
    }

    /// Builds the next block over the committed tip, ordering transactions by
    /// `(app_id, tx_id)`.
    pub fn build_block(&self, mut txs: Vec<EndorsedTransaction>) -> Result<Block, LedgerError> {
        if txs.is_empty() && !self.allow_empty {
            return Err(LedgerError::EmptyBlock);
        }
        txs.sort_by(|a, b| (&a.tx.app_id, &a.tx.tx_id).cmp(&(&b.tx.app_id, &b.tx.tx_id)));
        Ok(Block::new(self.tip_seq + 1, self.tip_hash, txs))
    }

    /// Moves the tip after `block` was decided.
    pub fn advance(&mut self, block: &Block) {
        self.tip_seq = block.seq;
        self.tip_hash = block.block_hash;
    }

    pub fn tip(&self) -> (u64, Digest) {
        (self.tip_seq, self.tip_hash)
    }
}

/// A block as committed by one peer, with its validity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittedBlock {
    pub block: Arc<Block>,
    pub flags: Vec<Validity>,
    pub commit_digest: Digest,
}

impl CommittedBlock {
    pub fn new(block: Arc<Block>, flags: Vec<Validity>) -> Self {
        let commit_digest = Self::compute_commit_digest(&block.block_hash, &flags);
        Self {
            block,
            flags,
            commit_digest,
        }
    }

    fn compute_commit_digest(block_hash: &Digest, flags: &[Validity]) -> Digest {
        let mut c = Canonical::new();
        c.digest(block_hash).u64(flags.len() as u64);
        flags.iter().for_each(|f| {
            c.u64(f.code());
        });
        c.hash()
    }

    pub fn valid_count(&self) -> usize {
        self.flags.iter().filter(|f| f.is_valid()).count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut c = Canonical::new();
        self.block.encode(&mut c);
        c.u64(self.flags.len() as u64);
        self.flags.iter().for_each(|f| {
            c.u64(f.code());
        });
        c.digest(&self.commit_digest);
        c.finish()
    }

    /// Strict decode: the bytes must be exactly the canonical encoding.
    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Cursor::new(bytes);
        let block = Block::decode(&mut r)?;
        let n = r.len()?;
        let flags = (0..n)
            .map(|_| {
                let c = r.u64()?;
                Validity::from_code(c).ok_or_else(|| LedgerError::Decode(format!("bad validity code {c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let commit_digest = r.digest()?;
        if !r.done() {
            return Err(LedgerError::Decode("trailing bytes in record".into()));
        }
        let out = Self {
            block: Arc::new(block),
            flags,
            commit_digest,
        };
        if out.encode() != bytes {
            return Err(LedgerError::Decode("record is not in canonical form".into()));
        }
        Ok(out)
    }

    /// Self-consistency of one record (hashes and flag count).
    pub fn verify(&self) -> Result<(), LedgerError> {
        let seq = self.block.seq;
        if !self.block.hash_matches() {
            return Err(LedgerError::Integrity {
                seq,
                reason: "block hash mismatch".into(),
            });
        }
        if self.flags.len() != self.block.txs.len() {
            return Err(LedgerError::Integrity {
                seq,
                reason: "flag count mismatch".into(),
            });
        }
        if Self::compute_commit_digest(&self.block.block_hash, &self.flags) != self.commit_digest {
            return Err(LedgerError::Integrity {
                seq,
                reason: "commit digest mismatch".into(),
            });
        }
        Ok(())
    }
}

/// Checks every record and every link of a committed chain.
pub fn verify_chain(chain: &[CommittedBlock]) -> Result<(), LedgerError> {
    let mut prev: Option<&Block> = None;
    for cb in chain {
        cb.verify()?;
        let b = &cb.block;
        let (expected_seq, expected_prev) = match prev {
            None => (0, Digest::ZERO),
            Some(p) => (p.seq + 1, p.block_hash),
        };
        if b.seq != expected_seq {
            return Err(LedgerError::Integrity {
                seq: b.seq,
                reason: format!("expected sequence {expected_seq}"),
            });
        }
        if b.prev_hash != expected_prev {
            return Err(LedgerError::Integrity {
                seq: b.seq,
                reason: "previous hash does not link".into(),
            });
        }
        prev = Some(b);
    }
    Ok(())
}

/// Writes the chain export: header, then one length-prefixed record per block.
pub fn write_chain<W: Write>(mut w: W, chain: &[CommittedBlock]) -> Result<(), LedgerError> {
    let mut c = Canonical::new();
    c.bytes(CHAIN_MAGIC)
        .u64(CHAIN_VERSION)
        .str(HASH_ALGORITHM)
        .u64(chain.len() as u64);
    for cb in chain {
        c.bytes(&cb.encode());
    }
    w.write_all(&c.finish())?;
    Ok(())
}

pub fn read_chain<R: Read>(mut r: R) -> Result<Vec<CommittedBlock>, LedgerError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut cur = Cursor::new(&data);
    if cur.bytes()? != CHAIN_MAGIC {
        return Err(LedgerError::Decode("bad magic".into()));
    }
    if cur.u64()? != CHAIN_VERSION {
        return Err(LedgerError::Decode("unsupported version".into()));
    }
    if cur.str()? != HASH_ALGORITHM {
        return Err(LedgerError::Decode("unsupported hash algorithm".into()));
    }
    let n = cur.len()?;
    let chain = (0..n)
        .map(|_| CommittedBlock::decode(cur.bytes()?))
        .collect::<Result<Vec<_>, _>>()?;
    if !cur.done() {
        return Err(LedgerError::Decode("trailing bytes".into()));
    }
    Ok(chain)
}

/// Text index: `seq,hash,tx_count,valid_count` per block.
pub fn write_chain_index<W: Write>(mut w: W, chain: &[CommittedBlock]) -> std::io::Result<()> {
    writeln!(w, "seq,hash,tx_count,valid_count")?;
    for cb in chain {
        writeln!(
            w,
            "{},{},{},{}",
            cb.block.seq,
            cb.block.block_hash,
            cb.block.txs.len(),
            cb.valid_count()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub current: BTreeMap<String, Vec<f64>>,
    pub window: TrainingWindow,
}

/// One peer's copy of the ledger.
#[derive(Debug, Clone)]
pub struct Ledger {
    chain: Vec<CommittedBlock>,
    world: WorldState,
}

impl Ledger {
    /// Initializes from the genesis block; `window` is the dataset the
    /// detector was trained on.
    pub fn new(genesis: Arc<Block>, window: TrainingWindow) -> Self {
        let current = genesis
            .txs
            .iter()
            .map(|t| (t.result.device_id.clone(), t.result.values.clone()))
            .collect();
        let flags = vec![Validity::Valid; genesis.txs.len()];
        Self {
            chain: vec![CommittedBlock::new(genesis, flags)],
            world: WorldState { current, window },
        }
    }

    pub fn chain(&self) -> &[CommittedBlock] {
        &self.chain
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn tip(&self) -> &Block {
        &self.chain.last().expect("genesis always present").block
    }

    /// Commits a decided block. Valid transactions update the world state in
    /// order; `column` (the slot's fused data and its flagged features) is
    /// pushed into the dataset window.
    pub fn append_block(
        &mut self,
        block: Arc<Block>,
        flags: Vec<Validity>,
        column: Option<(FusedVector, Vec<usize>)>,
    ) -> Result<(), LedgerError> {
        let tip = self.tip();
        if block.seq != tip.seq + 1 {
            return Err(LedgerError::SequenceGap {
                expected: tip.seq + 1,
                actual: block.seq,
            });
        }
        if block.prev_hash != tip.block_hash {
            return Err(LedgerError::PrevHashMismatch { seq: block.seq });
        }
        if flags.len() != block.txs.len() {
            return Err(LedgerError::FlagCount {
                seq: block.seq,
                flags: flags.len(),
                txs: block.txs.len(),
            });
        }
        if flags.contains(&Validity::Unset) {
            return Err(LedgerError::UnsetFlag { seq: block.seq });
        }
        if let Some((v, flagged)) = column {
            self.record_column(v, flagged)?;
        }
        for (etx, f) in block.txs.iter().zip(&flags) {
            if f.is_valid() {
                self.world
                    .current
                    .insert(etx.result.device_id.clone(), etx.result.values.clone());
            }
        }
        self.chain.push(CommittedBlock::new(block, flags));
        Ok(())
    }

    /// Pushes a committed slot's fused data into the dataset window.
    pub fn record_column(&mut self, v: FusedVector, flagged: Vec<usize>) -> Result<(), LedgerError> {
        self.world.window.push_flagged(v, flagged)?;
        Ok(())
    }

    pub fn query(&self, device_id: &str) -> Result<&[f64], LedgerError> {
        self.world
            .current
            .get(device_id)
            .map(Vec::as_slice)
            .ok_or_else(|| LedgerError::UnknownDevice(device_id.to_string()))
    }

    pub fn verify(&self) -> Result<(), LedgerError> {
        verify_chain(&self.chain)
    }

    /// World-state snapshot: `device_id,value...` rows in device-id order.
    pub fn write_world_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "device_id,values")?;
        for (dev, vals) in &self.world.current {
            write!(w, "{dev}")?;
            for v in vals {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng_for;

    fn layout() -> DeviceLayout {
        DeviceLayout::new([("A", 1), ("B", 2)]).unwrap()
    }

    struct Fixture {
        chaincode: Chaincode,
        secrets: PeerSecrets,
        policy: EndorsementPolicy,
        endorsers: Vec<Endorser>,
    }

    fn fixture() -> Fixture {
        let peers = [PeerId(0), PeerId(1), PeerId(2)];
        let secrets = PeerSecrets::generate(peers, &mut rng_for(1, 0));
        let mut policy = EndorsementPolicy::new();
        policy.require("app0", [PeerId(0), PeerId(1)]);
        policy.require("app1", [PeerId(2)]);
        let endorsers = peers
            .iter()
            .map(|&p| Endorser::new(p, secrets.secret(p).copied()))
            .collect();
        Fixture {
            chaincode: Chaincode::new(layout()),
            secrets,
            policy,
            endorsers,
        }
    }

    fn tx(id: &str, app: &str, dev: &str, vals: Vec<f64>) -> Transaction {
        Transaction {
            tx_id: id.into(),
            app_id: app.into(),
            slot: 1,
            reading: DeviceReading::new(dev, 1, vals),
        }
    }

    fn endorse(f: &mut Fixture, t: Transaction, by: &[usize]) -> EndorsedTransaction {
        let mut result = None;
        let endorsements = by
            .iter()
            .map(|&i| {
                let (r, e) = f.endorsers[i].execute_chaincode(&f.chaincode, &t).unwrap();
                result.get_or_insert(r);
                e
            })
            .collect();
        EndorsedTransaction {
            tx: t,
            result: result.unwrap(),
            endorsements,
        }
    }

    fn genesis() -> Arc<Block> {
        Arc::new(Block::genesis(vec![
            DeviceReading::new("A", 0, vec![1.0]),
            DeviceReading::new("B", 0, vec![2.0, 3.0]),
        ]))
    }

    fn ledger() -> Ledger {
        Ledger::new(genesis(), TrainingWindow::new(layout(), 10).unwrap())
    }

    #[test]
    fn honest_endorsers_agree() {
        let mut f = fixture();
        let t = tx("t1", "app0", "A", vec![5.0]);
        let (_, e0) = f.endorsers[0].execute_chaincode(&f.chaincode, &t).unwrap();
        let (_, e1) = f.endorsers[1].execute_chaincode(&f.chaincode, &t).unwrap();
        assert_eq!(e0.result_digest, e1.result_digest);
        assert_ne!(e0.signature, e1.signature);
        assert!(f.endorsers[0].proposal("t1").is_some());
        f.endorsers[0].discard_proposals();
        assert!(f.endorsers[0].proposal("t1").is_none());

        f.endorsers[1].corrupt = true;
        let (_, bad) = f.endorsers[1].execute_chaincode(&f.chaincode, &t).unwrap();
        assert_ne!(bad.result_digest, e0.result_digest);

        let unknown = tx("t2", "app0", "Z", vec![1.0]);
        assert!(matches!(
            f.endorsers[0].execute_chaincode(&f.chaincode, &unknown),
            Err(LedgerError::Reading(FusionError::UnknownDevice(_)))
        ));
        let mut regular = Endorser::new(PeerId(9), None);
        assert_eq!(
            regular.execute_chaincode(&f.chaincode, &t).unwrap_err(),
            LedgerError::NotEndorser(PeerId(9))
        );
    }

    #[test]
    fn endorsement_checks() {
        let mut f = fixture();
        let good = endorse(&mut f, tx("t1", "app0", "A", vec![5.0]), &[0, 1]);
        assert_eq!(check_endorsements(&good, &f.policy, &f.secrets), Validity::Valid);

        let missing = endorse(&mut f, tx("t1", "app0", "A", vec![5.0]), &[0]);
        assert_eq!(
            check_endorsements(&missing, &f.policy, &f.secrets),
            Validity::InvalidEndorsement
        );

        f.endorsers[1].corrupt = true;
        let mismatch = endorse(&mut f, tx("t1", "app0", "A", vec![5.0]), &[0, 1]);
        assert_eq!(
            check_endorsements(&mismatch, &f.policy, &f.secrets),
            Validity::InvalidEndorsement
        );

        let mut forged = good.clone();
        forged.endorsements[0].signature = Digest::of(b"forged");
        assert_eq!(
            check_endorsements(&forged, &f.policy, &f.secrets),
            Validity::InvalidEndorsement
        );

        let mut tampered = good.clone();
        tampered.result.values[0] = 6.0;
        assert_eq!(
            check_endorsements(&tampered, &f.policy, &f.secrets),
            Validity::InvalidEndorsement
        );
    }

    #[test]
    fn blocks_chain_and_order() {
        let mut f = fixture();
        let g = genesis();
        let orderer = Orderer::new(&g);
        let a = endorse(&mut f, tx("t2", "app1", "B", vec![1.0, 1.0]), &[2]);
        let b = endorse(&mut f, tx("t1", "app0", "A", vec![5.0]), &[0, 1]);
        let blk = orderer.build_block(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(blk.seq, 1);
        assert_eq!(blk.prev_hash, g.block_hash);
        assert_eq!(blk.txs[0].tx.tx_id, "t1");
        let again = orderer.build_block(vec![b, a]).unwrap();
        assert_eq!(again.block_hash, blk.block_hash);
        assert_eq!(orderer.build_block(vec![]).unwrap_err(), LedgerError::EmptyBlock);
    }

    #[test]
    fn append_applies_only_valid() {
        let mut f = fixture();
        let mut l = ledger();
        assert_eq!(l.query("A").unwrap(), &[1.0]);
        assert!(matches!(l.query("Q"), Err(LedgerError::UnknownDevice(_))));

        let mut orderer = Orderer::new(l.tip());
        let a = endorse(&mut f, tx("t1", "app0", "A", vec![5.0]), &[0, 1]);
        let b = endorse(&mut f, tx("t2", "app1", "B", vec![9.0, 9.0]), &[2]);
        let blk = Arc::new(orderer.build_block(vec![a, b]).unwrap());
        l.append_block(blk.clone(), vec![Validity::Valid, Validity::InvalidEndorsement], None)
            .unwrap();
        orderer.advance(&blk);
        assert_eq!(l.query("A").unwrap(), &[5.0]);
        assert_eq!(l.query("B").unwrap(), &[2.0, 3.0]);

        // same block again is a sequence gap (seq not tip + 1)
        assert!(matches!(
            l.append_block(blk.clone(), vec![Validity::Valid; 2], None),
            Err(LedgerError::SequenceGap { .. })
        ));
        let skip = Arc::new(Block::new(5, blk.block_hash, vec![]));
        assert!(matches!(
            l.append_block(skip, vec![], None),
            Err(LedgerError::SequenceGap { expected: 2, actual: 5 })
        ));
        let fork = Arc::new(Block::new(2, Digest::ZERO, vec![]));
        assert!(matches!(
            l.append_block(fork, vec![], None),
            Err(LedgerError::PrevHashMismatch { seq: 2 })
        ));
        l.verify().unwrap();
    }

    #[test]
    fn chain_export_roundtrip_and_tamper() {
        let mut f = fixture();
        let mut l = ledger();
        let mut orderer = Orderer::new(l.tip());
        for k in 0..3 {
            let t = endorse(&mut f, tx(&format!("t{k}"), "app0", "A", vec![k as f64 + 0.5]), &[0, 1]);
            let blk = Arc::new(orderer.build_block(vec![t]).unwrap());
            l.append_block(blk.clone(), vec![Validity::Valid], None).unwrap();
            orderer.advance(&blk);
        }
        let mut buf = Vec::new();
        write_chain(&mut buf, l.chain()).unwrap();
        let back = read_chain(buf.as_slice()).unwrap();
        assert_eq!(back, l.chain());
        verify_chain(&back).unwrap();

        // change a committed value without touching the hash
        let mut forged = back.clone();
        let mut blk = (*forged[2].block).clone();
        blk.txs[0].result.values[0] = 42.0;
        forged[2].block = Arc::new(blk);
        assert!(matches!(
            verify_chain(&forged),
            Err(LedgerError::Integrity { seq: 2, .. })
        ));

        let mut idx = Vec::new();
        write_chain_index(&mut idx, l.chain()).unwrap();
        let idx = String::from_utf8(idx).unwrap();
        assert_eq!(idx.lines().count(), 5);
        assert!(idx.lines().nth(1).unwrap().starts_with("0,"));
    }

    #[test]
    fn identical_sequences_give_identical_state() {
        let mut f = fixture();
        let mut l1 = ledger();
        let mut l2 = ledger();
        let mut orderer = Orderer::new(l1.tip());
        for k in 0..4 {
            let t = endorse(&mut f, tx(&format!("t{k}"), "app1", "B", vec![k as f64, -0.1]), &[2]);
            let blk = Arc::new(orderer.build_block(vec![t]).unwrap());
            let col = FusedVector::from_slice(k + 1, &[0.0, k as f64, -0.1]);
            l1.append_block(blk.clone(), vec![Validity::Valid], Some((col.clone(), vec![])))
                .unwrap();
            l2.append_block(blk.clone(), vec![Validity::Valid], Some((col, vec![])))
                .unwrap();
            orderer.advance(&blk);
        }
        assert_eq!(l1.world(), l2.world());
        assert_eq!(l1.world().window.len(), 4);
        let mut a = Vec::new();
        let mut b = Vec::new();
        l1.write_world_csv(&mut a).unwrap();
        l2.write_world_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap(), "device_id,values\nA,1\nB,3,-0.1\n");
    }
}
