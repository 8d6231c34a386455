//! Hash-chained ledger of model digests and the committee that extends it.
//!
//! Blocks carry SHA-256 digests of local and global models, never the models
//! themselves. The committee leader is whichever RSU the latest term-boundary
//! block hash selects (`hash mod M`), so every node derives the same leader
//! without any voting round.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub type NodeId = u32;

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash_bytes(payload: &[u8]) -> Digest {
    Digest(Sha256::digest(payload).into())
}

/// SHA-256 over the little-endian `f64` serialization of the parameters.
/// `0.0` and `-0.0` hash differently.
pub fn hash_model(params: &ModelParams) -> Result<Digest> {
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("cannot hash non-finite parameters"));
    }
    Ok(hash_bytes(&params.to_le_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    LocalModelHash,
    GlobalModelHash,
}

impl RecordKind {
    fn tag(self) -> u8 {
        match self {
            RecordKind::LocalModelHash => 0,
            RecordKind::GlobalModelHash => 1,
        }
    }

    fn letter(self) -> char {
        match self {
            RecordKind::LocalModelHash => 'L',
            RecordKind::GlobalModelHash => 'G',
        }
    }
}

/// One ledger entry. For local records `node_id` is the uploader and `round`
/// its local round; for global records `node_id` is the aggregating leader
/// and `round` the global model version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashRecord {
    pub kind: RecordKind,
    pub node_id: NodeId,
    pub round: u64,
    pub digest: Digest,
}

/// Encoded size of one record: tag, node id, round, digest.
pub const RECORD_BYTES: usize = 1 + 4 + 8 + 32;
/// Encoded size of a block without records: index, prev hash, record count,
/// timestamp.
pub const BLOCK_OVERHEAD_BYTES: usize = 8 + 32 + 4 + 8;

impl HashRecord {
    pub fn local(node_id: NodeId, round: u64, digest: Digest) -> Self {
        HashRecord {
            kind: RecordKind::LocalModelHash,
            node_id,
            round,
            digest,
        }
    }

    pub fn global(node_id: NodeId, round: u64, digest: Digest) -> Self {
        HashRecord {
            kind: RecordKind::GlobalModelHash,
            node_id,
            round,
            digest,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind.tag());
        out.extend_from_slice(&self.node_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.digest.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub records: Vec<HashRecord>,
    pub timestamp_ms: u64,
    pub block_hash: Digest,
}

/// Canonical little-endian encoding hashed into `block_hash`.
pub fn canonical_block_bytes(index: u64, prev_hash: &Digest, records: &[HashRecord], timestamp_ms: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOCK_OVERHEAD_BYTES + records.len() * RECORD_BYTES);
    out.extend_from_slice(&index.to_le_bytes());
    out.extend_from_slice(&prev_hash.0);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        r.encode_into(&mut out);
    }
    out.extend_from_slice(&timestamp_ms.to_le_bytes());
    out
}

impl Block {
    pub fn seal(index: u64, prev_hash: Digest, records: Vec<HashRecord>, timestamp_ms: u64) -> Block {
        let block_hash = hash_bytes(&canonical_block_bytes(index, &prev_hash, &records, timestamp_ms));
        Block {
            index,
            prev_hash,
            records,
            timestamp_ms,
            block_hash,
        }
    }

    pub fn recompute_hash(&self) -> Digest {
        hash_bytes(&canonical_block_bytes(
            self.index,
            &self.prev_hash,
            &self.records,
            self.timestamp_ms,
        ))
    }

    pub fn serialized_len(&self) -> usize {
        BLOCK_OVERHEAD_BYTES + self.records.len() * RECORD_BYTES
    }
}

/// When the pending record pool is sealed into a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCutPolicy {
    pub max_wait_s: f64,
    pub max_records: usize,
    pub max_block_bytes: usize,
}

impl Default for BlockCutPolicy {
    fn default() -> Self {
        BlockCutPolicy {
            max_wait_s: 2.0,
            max_records: 10,
            max_block_bytes: 10 * 1024 * 1024,
        }
    }
}

impl BlockCutPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_wait_s > 0.0 && self.max_wait_s.is_finite()) {
            return Err(Error::config("chain.max_wait_s", "must be positive"));
        }
        if self.max_records == 0 {
            return Err(Error::config("chain.max_records", "must be positive"));
        }
        if self.max_block_bytes < BLOCK_OVERHEAD_BYTES + RECORD_BYTES {
            return Err(Error::config("chain.max_block_bytes", "must fit at least one record"));
        }
        Ok(())
    }
}

pub fn should_cut_block(
    pending_records: usize,
    pending_bytes: usize,
    elapsed_since_first_s: f64,
    policy: &BlockCutPolicy,
) -> bool {
    pending_records >= policy.max_records
        || pending_bytes >= policy.max_block_bytes
        || (pending_records >= 1 && elapsed_since_first_s >= policy.max_wait_s)
}

/// Leader identity index `digest mod m`, reading the digest as a big-endian
/// unsigned integer. The index refers to committee members in configuration
/// order.
pub fn elect_leader(block_hash: &Digest, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::contract("committee must have at least one member"));
    }
    let m = m as u128;
    let rem = block_hash.0.iter().fold(0u128, |acc, &b| (acc * 256 + b as u128) % m);
    Ok(rem as usize)
}

/// Empirical leader frequencies over committee indices `0..m`.
pub fn leader_probabilities(observed: &[usize], m: usize) -> Result<Vec<f64>> {
    if observed.is_empty() {
        return Err(Error::contract("no leader observations"));
    }
    let mut counts = vec![0u64; m];
    for &id in observed {
        *counts
            .get_mut(id)
            .ok_or_else(|| Error::contract(format!("leader index {id} outside committee of {m}")))? += 1;
    }
    let n = observed.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Gini coefficient `ΣΣ|p_m − p_j| / (2 ΣΣ p_j)` over all ordered pairs.
pub fn gini(probabilities: &[f64]) -> Result<f64> {
    if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::contract("probabilities must be finite and non-negative"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &pm in probabilities {
        for &pj in probabilities {
            num += (pm - pj).abs();
            den += pj;
        }
    }
    if den <= 0.0 {
        return Err(Error::contract("probabilities must have a positive sum"));
    }
    Ok(num / (2.0 * den))
}

/// RSU committee: members, current leader, term progress and the blacklist
/// of nodes caught uploading models that do not match their on-chain digest.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitteeState {
    members: Vec<NodeId>,
    leader: NodeId,
    term_blocks: u32,
    blocks_in_term: u32,
    term: u64,
    blacklist: BTreeSet<NodeId>,
}

impl CommitteeState {
    /// Elects the first leader from the genesis block hash.
    pub fn from_genesis(members: Vec<NodeId>, term_blocks: u32, genesis: &Block) -> Result<Self> {
        if term_blocks == 0 {
            return Err(Error::config("term_blocks", "must be positive"));
        }
        let idx = elect_leader(&genesis.block_hash, members.len())?;
        Ok(CommitteeState {
            leader: members[idx],
            members,
            term_blocks,
            blocks_in_term: 0,
            term: 0,
            blacklist: BTreeSet::new(),
        })
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn leader(&self) -> NodeId {
        self.leader
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn term_blocks(&self) -> u32 {
        self.term_blocks
    }

    pub fn blocks_in_term(&self) -> u32 {
        self.blocks_in_term
    }

    pub fn is_blacklisted(&self, node: NodeId) -> bool {
        self.blacklist.contains(&node)
    }

    pub fn blacklist(&self) -> &BTreeSet<NodeId> {
        &self.blacklist
    }

    pub fn blacklist_node(&mut self, node: NodeId) {
        self.blacklist.insert(node);
    }

    /// Counts an appended block. When the term completes, elects the next
    /// leader from that block's hash, clears the blacklist and returns the new
    /// leader.
    pub fn on_block_appended(&mut self, block: &Block) -> Result<Option<NodeId>> {
        self.blocks_in_term += 1;
        if self.blocks_in_term < self.term_blocks {
            return Ok(None);
        }
        let idx = elect_leader(&block.block_hash, self.members.len())?;
        self.leader = self.members[idx];
        self.blocks_in_term = 0;
        self.term += 1;
        self.blacklist.clear();
        Ok(Some(self.leader))
    }
}

/// The ordered, fork-free block sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditOutcome {
    Ok,
    FirstBadBlock(u64),
}

impl Chain {
    pub fn genesis(records: Vec<HashRecord>, timestamp_ms: u64) -> Chain {
        Chain {
            blocks: vec![Block::seal(0, Digest::ZERO, records, timestamp_ms)],
        }
    }

    /// Wraps blocks without validating them (used when auditing dumps).
    pub fn from_blocks(blocks: Vec<Block>) -> Chain {
        Chain { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn contains_record(&self, record: &HashRecord) -> bool {
        self.blocks.iter().any(|b| b.records.contains(record))
    }

    /// Seals `records` onto the tip.
    pub fn append(&mut self, records: Vec<HashRecord>, timestamp_ms: u64, policy: &BlockCutPolicy) -> Result<&Block> {
        if records.is_empty() {
            return Err(Error::contract("a block needs at least one record"));
        }
        let tip = self
            .tip()
            .ok_or_else(|| Error::contract("chain has no genesis block"))?;
        let block = Block::seal(tip.index + 1, tip.block_hash, records, timestamp_ms);
        if block.serialized_len() > policy.max_block_bytes {
            return Err(Error::Policy(format!(
                "block of {} bytes exceeds the {}-byte limit",
                block.serialized_len(),
                policy.max_block_bytes
            )));
        }
        if block.records.len() > policy.max_records {
            return Err(Error::Policy(format!(
                "block of {} records exceeds the {}-record limit",
                block.records.len(),
                policy.max_records
            )));
        }
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Checks links, indices and stored hashes; returns the first offending
    /// block.
    pub fn audit(&self) -> AuditOutcome {
        for (i, block) in self.blocks.iter().enumerate() {
            let expected_prev = if i == 0 {
                Digest::ZERO
            } else {
                self.blocks[i - 1].block_hash
            };
            if block.index != i as u64 || block.prev_hash != expected_prev || block.recompute_hash() != block.block_hash
            {
                return AuditOutcome::FirstBadBlock(i as u64);
            }
        }
        AuditOutcome::Ok
    }

    pub fn verify(&self) -> bool {
        self.audit() == AuditOutcome::Ok
    }

    /// Line-oriented dump: a header `dbafl-chain v1 <count>` followed by one
    /// line per block,
    /// `<index> <timestamp_ms> <prev_hash> <block_hash> <records>`, where
    /// records are `<L|G>.<node>.<round>.<digest>` joined by commas. Hashes
    /// and digests are lowercase hex.
    pub fn dump(&self) -> String {
        let mut out = format!("dbafl-chain v1 {}\n", self.blocks.len());
        for b in &self.blocks {
            let records = if b.records.is_empty() {
                "-".to_string()
            } else {
                b.records
                    .iter()
                    .map(|r| format!("{}.{}.{}.{}", r.kind.letter(), r.node_id, r.round, r.digest))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                b.index, b.timestamp_ms, b.prev_hash, b.block_hash, records
            ));
        }
        out
    }

    /// Parses a dump produced by [`Chain::dump`] without validating hashes.
    pub fn parse_dump(text: &str) -> Result<Chain> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| format_err(1, "missing header"))?;
        let expected: usize = header
            .strip_prefix("dbafl-chain v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| format_err(1, "bad header"))?;
        let mut blocks = Vec::with_capacity(expected);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            blocks.push(parse_block_line(line, lineno)?);
        }
        if blocks.len() != expected {
            return Err(format_err(
                blocks.len() + 2,
                &format!("header announces {expected} blocks, found {}", blocks.len()),
            ));
        }
        Ok(Chain { blocks })
    }
}

fn format_err(line: usize, reason: &str) -> Error {
    Error::Format {
        line,
        reason: reason.to_string(),
    }
}

fn parse_block_line(line: &str, lineno: usize) -> Result<Block> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 5 {
        return Err(format_err(lineno, "expected 5 space-separated fields"));
    }
    let index = fields[0].parse().map_err(|_| format_err(lineno, "bad index"))?;
    let timestamp_ms = fields[1].parse().map_err(|_| format_err(lineno, "bad timestamp"))?;
    let prev_hash = Digest::from_hex(fields[2]).ok_or_else(|| format_err(lineno, "bad prev hash"))?;
    let block_hash = Digest::from_hex(fields[3]).ok_or_else(|| format_err(lineno, "bad block hash"))?;
    let records = if fields[4] == "-" {
        Vec::new()
    } else {
        fields[4]
            .split(',')
            .map(|r| parse_record(r).ok_or_else(|| format_err(lineno, &format!("bad record `{r}`"))))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Block {
        index,
        prev_hash,
        records,
        timestamp_ms,
        block_hash,
    })
}

fn parse_record(text: &str) -> Option<HashRecord> {
    let mut parts = text.split('.');
    let kind = match parts.next()? {
        "L" => RecordKind::LocalModelHash,
        "G" => RecordKind::GlobalModelHash,
        _ => return None,
    };
    let node_id = parts.next()?.parse().ok()?;
    let round = parts.next()?.parse().ok()?;
    let digest = Digest::from_hex(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    Some(HashRecord {
        kind,
        node_id,
        round,
        digest,
    })
}

/// Appends a block and advances the committee's term. Returns the new leader
/// when the block completed a term.
pub fn append_block(
    chain: &mut Chain,
    committee: &mut CommitteeState,
    records: Vec<HashRecord>,
    timestamp_ms: u64,
    policy: &BlockCutPolicy,
) -> Result<Option<NodeId>> {
    let block = chain.append(records, timestamp_ms, policy)?;
    committee.on_block_appended(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordCheck {
    Valid,
    TamperedAndBlacklisted,
}

/// Compares a received model against its on-chain digest. On mismatch the
/// uploader is blacklisted until the next leader election.
pub fn verify_record(
    chain: &Chain,
    claimed: &ModelParams,
    record: &HashRecord,
    committee: &mut CommitteeState,
) -> Result<RecordCheck> {
    if !chain.contains_record(record) {
        return Err(Error::contract("record is not on the chain"));
    }
    Ok(check_against(claimed, record, committee))
}

fn check_against(claimed: &ModelParams, record: &HashRecord, committee: &mut CommitteeState) -> RecordCheck {
    let matches = hash_model(claimed).map(|d| d == record.digest).unwrap_or(false);
    if matches {
        RecordCheck::Valid
    } else {
        committee.blacklist_node(record.node_id);
        RecordCheck::TamperedAndBlacklisted
    }
}

/// A contiguous run of blocks led by one RSU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaderTerm {
    /// Index of the block whose hash elected this leader.
    pub elected_at_block: u64,
    pub leader: NodeId,
}

/// Chain, committee and the pool of records waiting to be sealed, as held by
/// the simulation.
#[derive(Debug, Clone)]
pub struct Ledger {
    chain: Chain,
    committee: CommitteeState,
    policy: BlockCutPolicy,
    pending: Vec<HashRecord>,
    pending_since_s: Option<f64>,
    terms: Vec<LeaderTerm>,
}

impl Ledger {
    pub fn new(
        genesis_records: Vec<HashRecord>,
        timestamp_ms: u64,
        members: Vec<NodeId>,
        term_blocks: u32,
        policy: BlockCutPolicy,
    ) -> Result<Ledger> {
        policy.validate()?;
        let chain = Chain::genesis(genesis_records, timestamp_ms);
        let committee = CommitteeState::from_genesis(members, term_blocks, &chain.blocks()[0])?;
        let terms = vec![LeaderTerm {
            elected_at_block: 0,
            leader: committee.leader(),
        }];
        Ok(Ledger {
            chain,
            committee,
            policy,
            pending: Vec::new(),
            pending_since_s: None,
            terms,
        })
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn committee(&self) -> &CommitteeState {
        &self.committee
    }

    pub fn committee_mut(&mut self) -> &mut CommitteeState {
        &mut self.committee
    }

    pub fn policy(&self) -> &BlockCutPolicy {
        &self.policy
    }

    pub fn terms(&self) -> &[LeaderTerm] {
        &self.terms
    }

    pub fn pending(&self) -> &[HashRecord] {
        &self.pending
    }

    pub fn pending_since(&self) -> Option<f64> {
        self.pending_since_s
    }

    fn pending_bytes(&self) -> usize {
        BLOCK_OVERHEAD_BYTES + self.pending.len() * RECORD_BYTES
    }

    /// Adds a record to the pool, sealing first if it would not fit, and
    /// sealing afterwards if a count or size limit is reached. Returns the new
    /// leader if a seal completed a term.
    pub fn submit(&mut self, record: HashRecord, now_s: f64) -> Result<Option<NodeId>> {
        let mut elected = None;
        if !self.pending.is_empty() && self.pending_bytes() + RECORD_BYTES > self.policy.max_block_bytes {
            elected = self.seal(now_s)?;
        }
        if self.pending.is_empty() {
            self.pending_since_s = Some(now_s);
        }
        self.pending.push(record);
        if should_cut_block(self.pending.len(), self.pending_bytes(), 0.0, &self.policy) {
            elected = self.seal(now_s)?.or(elected);
        }
        Ok(elected)
    }

    /// Seals the pool if the wait limit has passed.
    pub fn on_timer(&mut self, now_s: f64) -> Result<Option<NodeId>> {
        match self.pending_since_s {
            Some(since) if should_cut_block(self.pending.len(), self.pending_bytes(), now_s - since, &self.policy) => {
                self.seal(now_s)
            }
            _ => Ok(None),
        }
    }

    /// Seals whatever is pending into a block stamped `now_s`.
    pub fn seal(&mut self, now_s: f64) -> Result<Option<NodeId>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let records = std::mem::take(&mut self.pending);
        self.pending_since_s = None;
        let elected = append_block(
            &mut self.chain,
            &mut self.committee,
            records,
            seconds_to_ms(now_s),
            &self.policy,
        )?;
        if let Some(leader) = elected {
            self.terms.push(LeaderTerm {
                elected_at_block: self.chain.tip().expect("non-empty").index,
                leader,
            });
        }
        Ok(elected)
    }

    pub fn contains_record(&self, record: &HashRecord) -> bool {
        self.pending.contains(record) || self.chain.contains_record(record)
    }

    /// [`verify_record`] against both sealed blocks and the pending pool.
    pub fn verify_record(&mut self, claimed: &ModelParams, record: &HashRecord) -> Result<RecordCheck> {
        if !self.contains_record(record) {
            return Err(Error::contract("record is not on the ledger"));
        }
        Ok(check_against(claimed, record, &mut self.committee))
    }
}

pub fn seconds_to_ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}
