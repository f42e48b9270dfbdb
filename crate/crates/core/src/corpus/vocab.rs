//! Token inventories and the projection between a global and a local vocabulary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DeptError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Unk,
    Bos,
    Bytes(Vec<u8>),
}

impl Token {
    pub fn bytes(s: impl AsRef<[u8]>) -> Self {
        Token::Bytes(s.as_ref().to_vec())
    }

    pub fn is_special(&self) -> bool {
        !matches!(self, Token::Bytes(_))
    }

    /// Line representation used by the vocab file format.
    pub fn escaped(&self) -> String {
        match self {
            Token::Unk => "<unk>".to_string(),
            Token::Bos => "<bos>".to_string(),
            Token::Bytes(b) => escape_bytes(b),
        }
    }
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' && b != b'<' {
            s.push(b as char);
        } else {
            write!(s, "\\x{b:02x}").expect("write to String");
        }
    }
    s
}

fn unescape_bytes(line: &str) -> Result<Vec<u8>> {
    let raw = line.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            if raw.get(i + 1) != Some(&b'x') || i + 4 > raw.len() {
                return Err(DeptError::Format(format!("bad escape in vocab line {line:?}")));
            }
            let hex = std::str::from_utf8(&raw[i + 2..i + 4])
                .ok()
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| DeptError::Format(format!("bad escape in vocab line {line:?}")))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Ok(out)
}

/// An ordered token inventory. Ids are `0..len()` with no gaps.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Vec<u8>, u32>,
    unk: u32,
    bos: u32,
    max_token_len: usize,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocab {}

impl Vocab {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        let mut unk = None;
        let mut bos = None;
        let mut max_token_len = 0;
        for (i, t) in tokens.iter().enumerate() {
            let id = i as u32;
            match t {
                Token::Unk => {
                    if unk.replace(id).is_some() {
                        return Err(DeptError::InvalidVocab("UNK present more than once".into()));
                    }
                }
                Token::Bos => {
                    if bos.replace(id).is_some() {
                        return Err(DeptError::InvalidVocab("BOS present more than once".into()));
                    }
                }
                Token::Bytes(b) => {
                    if b.is_empty() {
                        return Err(DeptError::InvalidVocab("empty token".into()));
                    }
                    if index.insert(b.clone(), id).is_some() {
                        return Err(DeptError::InvalidVocab(format!(
                            "duplicate token {}",
                            escape_bytes(b)
                        )));
                    }
                    max_token_len = max_token_len.max(b.len());
                }
            }
        }
        let unk = unk.ok_or_else(|| DeptError::InvalidVocab("missing UNK".into()))?;
        let bos = bos.ok_or_else(|| DeptError::InvalidVocab("missing BOS".into()))?;
        Ok(Self { tokens, index, unk, bos, max_token_len })
    }

    /// `[UNK, BOS, byte 0, …, byte 255]`.
    pub fn byte_level() -> Self {
        let mut tokens = vec![Token::Unk, Token::Bos];
        tokens.extend((0..=255u8).map(|b| Token::Bytes(vec![b])));
        Self::new(tokens).expect("byte-level vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn max_token_len(&self) -> usize {
        self.max_token_len
    }

    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        self.index.get(bytes).copied()
    }

    pub fn id_of(&self, token: &Token) -> Option<u32> {
        match token {
            Token::Unk => Some(self.unk),
            Token::Bos => Some(self.bos),
            Token::Bytes(b) => self.id_of_bytes(b),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#vocab v1 size={}\n", self.len());
        for t in &self.tokens {
            s.push_str(&t.escaped());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DeptError::Format("empty vocab file".into()))?;
        let size: usize = header
            .strip_prefix("#vocab v1 size=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| DeptError::Format(format!("bad vocab header {header:?}")))?;
        let mut tokens = Vec::with_capacity(size);
        for line in lines {
            let t = match line {
                "<unk>" => Token::Unk,
                "<bos>" => Token::Bos,
                other => Token::Bytes(unescape_bytes(other)?),
            };
            tokens.push(t);
        }
        if tokens.len() != size {
            return Err(DeptError::Format(format!(
                "vocab header says {size} tokens, found {}",
                tokens.len()
            )));
        }
        Self::new(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Injective map from local token ids to global token ids (the indicator
/// projection selecting rows of the global embedding matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimMap {
    global_size: usize,
    local_to_global: Vec<u32>,
    global_to_local: Vec<Option<u32>>,
}

impl TrimMap {
    pub fn from_indices(global_size: usize, local_to_global: Vec<u32>) -> Result<Self> {
        let mut global_to_local = vec![None; global_size];
        for (local, &g) in local_to_global.iter().enumerate() {
            let slot = global_to_local.get_mut(g as usize).ok_or_else(|| {
                DeptError::InvalidArgument(format!("global id {g} >= global size {global_size}"))
            })?;
            if slot.replace(local as u32).is_some() {
                return Err(DeptError::InvalidArgument(format!(
                    "global id {g} mapped twice; trim map must be injective"
                )));
            }
        }
        Ok(Self { global_size, local_to_global, global_to_local })
    }

    pub fn identity(size: usize) -> Self {
        Self::from_indices(size, (0..size as u32).collect()).expect("identity is injective")
    }

    pub fn global_size(&self) -> usize {
        self.global_size
    }

    pub fn local_size(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn local_to_global(&self) -> &[u32] {
        &self.local_to_global
    }

    pub fn to_global(&self, local: u32) -> Option<u32> {
        self.local_to_global.get(local as usize).copied()
    }

    pub fn to_local(&self, global: u32) -> Option<u32> {
        self.global_to_local.get(global as usize).copied().flatten()
    }

    pub fn owns(&self, global: u32) -> bool {
        self.to_local(global).is_some()
    }

    pub fn is_identity(&self) -> bool {
        self.local_size() == self.global_size
            && self.local_to_global.iter().enumerate().all(|(i, &g)| i as u32 == g)
    }
}

pub fn build_trim_map(global: &Vocab, local: &Vocab) -> Result<TrimMap> {
    let mut map = Vec::with_capacity(local.len());
    for t in local.tokens() {
        let g = global.id_of(t).ok_or_else(|| DeptError::OutOfVocabulary(t.escaped()))?;
        map.push(g);
    }
    TrimMap::from_indices(global.len(), map)
}
