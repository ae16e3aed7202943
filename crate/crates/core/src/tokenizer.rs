//! Byte-level BPE: training, encoding, decoding and vocabulary merging.
//!
//! Ids `0..256` are the raw bytes, followed by the special tokens, followed by
//! one token per learned merge. Special tokens are never produced by `encode`
//! and are stripped by `decode`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BYTE_ALPHABET: usize = 256;
pub const DEFAULT_SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary {target} is below byte alphabet plus {specials} special tokens")]
    TargetTooSmall { target: usize, specials: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: TokenId, vocab: usize },
    #[error("tokenizers use different base alphabets ({0} vs {1})")]
    AlphabetMismatch(usize, usize),
    #[error("malformed tokenizer file: {field}: {detail}")]
    MalformedFile { field: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(field: &str, detail: impl Into<String>) -> TokenizerError {
    TokenizerError::MalformedFile { field: field.to_string(), detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
    /// Lower is applied earlier. Equal to the rule's index in the merge list.
    pub priority: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    merges: Vec<MergeRule>,
    special_tokens: BTreeMap<String, TokenId>,
    base_alphabet_size: usize,
    /// Set when training ran out of mergeable pairs before reaching its target.
    pub exhausted: bool,
    pair_ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    lookup: HashMap<Vec<u8>, TokenId>,
    byte_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenizerMergeReport {
    pub base_size: usize,
    pub extension_size: usize,
    pub merged_size: usize,
    pub duplicates_dropped: usize,
    pub merges_dropped: usize,
    /// `id_mapping[ext_id]` is the id of that token in the merged vocabulary.
    pub id_mapping: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// True when the byte stream was not valid UTF-8 and replacement characters were inserted.
    pub lossy: bool,
}

impl Tokenizer {
    /// Pure byte-fallback tokenizer: 256 byte tokens plus the given specials and no merges.
    pub fn byte_level(special_tokens: &[&str]) -> Self {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut specials = BTreeMap::new();
        for name in special_tokens {
            specials.insert(name.to_string(), vocab.len() as TokenId);
            vocab.push(name.as_bytes().to_vec());
        }
        Self::from_parts(vocab, Vec::new(), specials, false)
    }

    fn from_parts(
        vocab: Vec<Vec<u8>>,
        merges: Vec<MergeRule>,
        special_tokens: BTreeMap<String, TokenId>,
        exhausted: bool,
    ) -> Self {
        let special_ids: HashSet<TokenId> = special_tokens.values().copied().collect();
        let lookup: HashMap<Vec<u8>, TokenId> = vocab
            .iter()
            .enumerate()
            .filter(|(id, _)| !special_ids.contains(&(*id as TokenId)))
            .map(|(id, bytes)| (bytes.clone(), id as TokenId))
            .collect();
        let pair_ranks = merges.iter().map(|m| ((m.left, m.right), (m.priority, m.result))).collect();
        let byte_ids = (0..=255u8).map(|b| lookup_byte(&lookup, b)).collect();
        Tokenizer {
            byte_ids,
            vocab,
            merges,
            special_tokens,
            base_alphabet_size: BYTE_ALPHABET,
            exhausted,
            pair_ranks,
            lookup,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn special_tokens(&self) -> &BTreeMap<String, TokenId> {
        &self.special_tokens
    }

    pub fn base_alphabet_size(&self) -> usize {
        self.base_alphabet_size
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.special_tokens.get(name).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_tokens.values().any(|&s| s == id)
    }

    /// Id of a non-special token with exactly these bytes.
    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.lookup.get(bytes).copied()
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    /// Byte-level encoding: start from raw bytes, then repeatedly merge the
    /// adjacent pair with the lowest merge priority until none applies.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.pair_ranks.get(&(w[0], w[1])).map(|&(p, r)| (p, w[0], w[1], r)))
                .min_by_key(|&(p, ..)| p);
            let Some((_, left, right, result)) = best else {
                break;
            };
            ids = replace_pair(&ids, left, right, result);
        }
        ids
    }

    /// Decode, replacing invalid UTF-8 sequences. Special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        Ok(self.decode_checked(ids)?.text)
    }

    pub fn decode_checked(&self, ids: &[TokenId]) -> Result<Decoded, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        match String::from_utf8(bytes) {
            Ok(text) => Ok(Decoded { text, lossy: false }),
            Err(e) => Ok(Decoded { text: String::from_utf8_lossy(e.as_bytes()).into_owned(), lossy: true }),
        }
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let bytes =
                self.vocab.get(id as usize).ok_or(TokenizerError::IdOutOfRange { id, vocab: self.vocab.len() })?;
            if !self.is_special(id) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: 1,
            kind: "byte_bpe".to_string(),
            vocab: self.vocab.iter().map(|b| B64.encode(b)).collect(),
            merges: self.merges.iter().map(|m| [m.left, m.right]).collect(),
            special_tokens: self.special_tokens.clone(),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: TokenizerFile = serde_json::from_str(text).map_err(|e| malformed("json", e.to_string()))?;
        if file.version != 1 {
            return Err(malformed("version", format!("unsupported version {}", file.version)));
        }
        if file.kind != "byte_bpe" {
            return Err(malformed("type", format!("expected byte_bpe, got {}", file.kind)));
        }
        let vocab = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, s)| B64.decode(s).map_err(|e| malformed("vocab", format!("entry {i}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        for (name, &id) in &file.special_tokens {
            let Some(bytes) = vocab.get(id as usize) else {
                return Err(malformed("special_tokens", format!("{name} has id {id} outside vocab")));
            };
            if bytes != name.as_bytes() {
                return Err(malformed("special_tokens", format!("{name} does not match vocab entry {id}")));
            }
        }
        let special_ids: HashSet<TokenId> = file.special_tokens.values().copied().collect();
        let mut seen = HashSet::new();
        let mut byte_count = 0usize;
        for (id, bytes) in vocab.iter().enumerate() {
            if !seen.insert(bytes.clone()) {
                return Err(malformed("vocab", format!("duplicate entry at id {id}")));
            }
            if special_ids.contains(&(id as TokenId)) {
                continue;
            }
            if byte_count < BYTE_ALPHABET {
                if bytes.as_slice() != [byte_count as u8] {
                    return Err(malformed("vocab", format!("id {id} should be byte {byte_count:#04x}")));
                }
                byte_count += 1;
            }
        }
        if byte_count < BYTE_ALPHABET {
            return Err(malformed("vocab", "fewer than 256 byte tokens"));
        }
        let lookup: HashMap<&[u8], TokenId> = vocab
            .iter()
            .enumerate()
            .filter(|(id, _)| !special_ids.contains(&(*id as TokenId)))
            .map(|(id, b)| (b.as_slice(), id as TokenId))
            .collect();
        let mut merges = Vec::with_capacity(file.merges.len());
        let mut seen_pairs = HashSet::new();
        for (priority, &[left, right]) in file.merges.iter().enumerate() {
            let get = |id: TokenId| {
                vocab
                    .get(id as usize)
                    .filter(|_| !special_ids.contains(&id))
                    .ok_or_else(|| malformed("merges", format!("merge {priority} references invalid id {id}")))
            };
            let mut joined = get(left)?.clone();
            joined.extend_from_slice(get(right)?);
            let Some(&result) = lookup.get(joined.as_slice()) else {
                return Err(malformed("merges", format!("merge {priority} result missing from vocab")));
            };
            if result <= left || result <= right {
                return Err(malformed("merges", format!("merge {priority} result id not above its inputs")));
            }
            if !seen_pairs.insert((left, right)) {
                return Err(malformed("merges", format!("merge {priority} repeats a pair")));
            }
            merges.push(MergeRule { left, right, result, priority: priority as u32 });
        }
        Ok(Self::from_parts(vocab, merges, file.special_tokens, false))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    #[serde(rename = "type")]
    kind: String,
    vocab: Vec<String>,
    merges: Vec<[TokenId; 2]>,
    special_tokens: BTreeMap<String, TokenId>,
}

fn lookup_byte(lookup: &HashMap<Vec<u8>, TokenId>, b: u8) -> TokenId {
    *lookup.get([b].as_slice()).expect("byte alphabet present")
}

/// Replace every non-overlapping occurrence of `(left, right)`, scanning left to right.
fn replace_pair(ids: &[TokenId], left: TokenId, right: TokenId, result: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Train a byte-level BPE tokenizer.
///
/// Pairs are counted within each line of each document (no pre-tokenization),
/// overlapping occurrences included. Each step merges the most frequent pair;
/// equal counts go to the smallest `(left_id, right_id)`. Pairs whose
/// concatenation already exists in the vocabulary are never selected, so every
/// merge creates a fresh token with id `256 + |specials| + priority`.
pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
    special_tokens: &[&str],
) -> Result<Tokenizer, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let floor = BYTE_ALPHABET + special_tokens.len();
    if target_vocab_size < floor {
        return Err(TokenizerError::TargetTooSmall { target: target_vocab_size, specials: special_tokens.len() });
    }

    let base = Tokenizer::byte_level(special_tokens);
    let mut vocab = base.vocab.clone();
    let mut known: HashSet<Vec<u8>> = vocab.iter().cloned().collect();

    // Identical lines are trained once with a multiplicity.
    let mut line_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for doc in corpus {
        for line in doc.as_ref().split('\n') {
            if line.len() >= 2 {
                *line_counts.entry(line.as_bytes()).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> =
        line_counts.into_iter().map(|(bytes, n)| (bytes.iter().map(|&b| b as TokenId).collect(), n)).collect();

    let mut merges = Vec::new();
    let mut exhausted = false;
    while vocab.len() < target_vocab_size {
        let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (word, n) in &words {
            for w in word.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(pair, _)| !known.contains(&concat(&vocab, *pair)))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), _)) = best else {
            exhausted = true;
            log::warn!(
                "corpus exhausted mergeable pairs at vocabulary size {} (target {target_vocab_size})",
                vocab.len()
            );
            break;
        };
        let result = vocab.len() as TokenId;
        let bytes = concat(&vocab, (left, right));
        known.insert(bytes.clone());
        vocab.push(bytes);
        merges.push(MergeRule { left, right, result, priority: merges.len() as u32 });
        for (word, _) in &mut words {
            if word.len() >= 2 {
                *word = replace_pair(word, left, right, result);
            }
        }
    }
    Ok(Tokenizer::from_parts(vocab, merges, base.special_tokens, exhausted))
}

fn concat(vocab: &[Vec<u8>], (left, right): (TokenId, TokenId)) -> Vec<u8> {
    let mut out = vocab[left as usize].clone();
    out.extend_from_slice(&vocab[right as usize]);
    out
}

/// Merge `extension` into `base`, keeping every base id unchanged.
///
/// Extension tokens whose bytes already exist in the base (including the byte
/// alphabet and same-named specials) map onto the base id. The rest get fresh
/// ids in extension order. Extension merges are rewritten through the id
/// mapping; a merge whose result collapsed onto a base token is dropped.
pub fn merge_tokenizers(
    base: &Tokenizer,
    extension: &Tokenizer,
) -> Result<(Tokenizer, TokenizerMergeReport), TokenizerError> {
    if base.base_alphabet_size != extension.base_alphabet_size {
        return Err(TokenizerError::AlphabetMismatch(base.base_alphabet_size, extension.base_alphabet_size));
    }
    let mut vocab = base.vocab.clone();
    let mut specials = base.special_tokens.clone();
    let base_index: HashMap<&[u8], TokenId> =
        base.vocab.iter().enumerate().map(|(id, b)| (b.as_slice(), id as TokenId)).collect();

    let mut id_mapping = Vec::with_capacity(extension.vocab.len());
    let mut duplicates = 0usize;
    for (ext_id, bytes) in extension.vocab.iter().enumerate() {
        let ext_special = extension.is_special(ext_id as TokenId);
        match base_index.get(bytes.as_slice()).copied() {
            Some(id) => {
                duplicates += 1;
                id_mapping.push(id);
            }
            None => {
                let id = vocab.len() as TokenId;
                vocab.push(bytes.clone());
                if ext_special {
                    let name = String::from_utf8_lossy(bytes).into_owned();
                    specials.insert(name, id);
                }
                id_mapping.push(id);
            }
        }
    }

    let base_size = base.vocab.len();
    let mut merges = base.merges.clone();
    let mut merges_dropped = 0usize;
    for m in &extension.merges {
        let result = id_mapping[m.result as usize];
        if (result as usize) < base_size {
            merges_dropped += 1;
            continue;
        }
        merges.push(MergeRule {
            left: id_mapping[m.left as usize],
            right: id_mapping[m.right as usize],
            result,
            priority: merges.len() as u32,
        });
    }

    let report = TokenizerMergeReport {
        base_size,
        extension_size: extension.vocab.len(),
        merged_size: vocab.len(),
        duplicates_dropped: duplicates,
        merges_dropped,
        id_mapping,
    };
    Ok((Tokenizer::from_parts(vocab, merges, specials, false), report))
}

/// Read a JSONL corpus, one document per line under the key `"text"`.
/// Blank lines are skipped; lines without a string `"text"` field are an error.
pub fn read_jsonl_corpus(path: impl AsRef<Path>) -> Result<Vec<String>, TokenizerError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed("jsonl", format!("line {}: {e}", lineno + 1)))?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| malformed("text", format!("line {} has no string \"text\"", lineno + 1)))?;
        docs.push(text.to_string());
    }
    Ok(docs)
}
